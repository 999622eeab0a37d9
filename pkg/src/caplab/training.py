"""Three-stage training: tag generator, word decoder, then self-critical.

Stage ``pos`` fits the encoder and tag generator with teacher forcing
while the word decoder stays untouched.  Stage ``caption_xe`` fits the
encoder and word decoder while the tag generator stays frozen; by
default each reference trains under the summary of its own tag plan
(teacher forced through the frozen generator), so a clip captioned
under several plans gives the decoder pairs that only the summary can
tell apart — the signal that makes guidance causal rather than
decorative.  The alternative ``clip`` guidance source precomputes one
greedily decoded summary per clip at stage entry and holds it
constant.  Stage ``caption_rl`` fine-tunes with a self-critical policy
gradient: a sampled caption is scored against a greedy baseline that
shares the same fused features and (greedily decoded) syntax summary,
and the advantage weights the teacher-forced likelihood of the sampled
tokens.  The syntax summary never receives gradient in any stage, and
neither does the baseline.

Every loop is deterministic for a given seed: epoch shuffles, the
reference picked per clip per epoch, and the sampling draws all come
from counter-keyed generators.  Progress goes to an append-only
JSON-lines log with one record per validation round.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .corpus import Dataset, Vocabulary
from .errors import DomainError, NumericError
from .inference import caption_split, decode_greedy, decode_sample
from .metrics import RefCorpus, cider_d, evaluate_split
from .model import CaptionModel, ModelConfig
from .optim import AdaDelta, clip_global_norm
from .posgen import PosSequence
from .tensor import Tensor, backward, no_grad

VAL_METRIC = "CIDEr-D"
STAGES = ("pos", "caption_xe", "caption_rl")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    patience: int = 30
    rho: float = 0.95
    eps: float = 1e-6
    clip_norm: float = 5.0
    learning_rate: float = 1.0
    seed: int = 0
    log_path: str | Path | None = None
    scst_temperature: float = 1.0
    freeze_encoder: bool = False   # applies to the caption stages
    # what the decoder's syntax summary is computed from during the
    # cross-entropy stage: each reference's own tags ("reference") or
    # one greedy decode per clip frozen at stage entry ("clip")
    guidance_source: str = "reference"

    def __post_init__(self):
        if self.epochs < 1:
            raise DomainError("epochs must be positive")
        if self.batch_size < 1:
            raise DomainError("batch_size must be positive")
        if self.patience < 1:
            raise DomainError("patience must be positive")
        if self.guidance_source not in ("reference", "clip"):
            raise DomainError(
                f"guidance_source must be 'reference' or 'clip', "
                f"got {self.guidance_source!r}")


@dataclass
class TrainResult:
    stage: str
    best_metric: float
    best_epoch: int
    epochs_run: int
    stopped_early: bool
    history: list[dict] = field(default_factory=list)


@dataclass
class RewardRecord:
    """One self-critical draw: sample, baseline, and their score gap."""

    sampled_ids: list[int]
    sampled_reward: float
    greedy_ids: list[int]
    greedy_reward: float

    @property
    def advantage(self) -> float:
        return self.sampled_reward - self.greedy_reward


def _append_jsonl(path, record):
    if path is None:
        return
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _epoch_rng(seed: int, epoch: int, salt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, salt, epoch)))


def _train_loop(model: CaptionModel, params: dict[str, Tensor], n_examples: int,
                cfg: TrainConfig, stage: str, clip_loss_fn, val_fn) -> TrainResult:
    """Shared schedule: shuffled minibatches, clipped updates, early stop
    on the validation metric, best-checkpoint restore.

    A validation tie keeps the most recent weights (training past a
    saturated metric still sharpens the model — a tag metric can hit its
    ceiling within a few epochs while the states the next stage consumes
    are still forming) but does not reset the patience counter: only a
    strictly better score counts as progress.
    """
    opt = AdaDelta(params, rho=cfg.rho, eps=cfg.eps, lr=cfg.learning_rate)
    best_metric = -math.inf
    best_epoch = -1
    best_snapshot = model.snapshot()
    bad_rounds = 0
    history = []
    epochs_run = 0
    stopped_early = False
    for epoch in range(cfg.epochs):
        epochs_run = epoch + 1
        order = _epoch_rng(cfg.seed, epoch, 7).permutation(n_examples)
        losses = []
        extras: dict[str, list[float]] = {}
        for start in range(0, n_examples, cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            opt.zero_grad()
            total = None
            for idx in chunk:
                loss, info = clip_loss_fn(int(idx), epoch)
                for k, v in info.items():
                    extras.setdefault(k, []).append(v)
                if loss is not None:
                    total = loss if total is None else total + loss
            if total is not None:
                total = total * (1.0 / len(chunk))
                if not np.isfinite(total.data):
                    raise NumericError(
                        f"{stage}: non-finite loss {float(total.data)} at "
                        f"epoch {epoch}, batch starting {start}")
                backward(total)
                clip_global_norm(params, cfg.clip_norm)
                opt.step()
                losses.append(float(total.data))
        val_metric = val_fn()
        improved = val_metric > best_metric
        if val_metric >= best_metric:
            best_metric = val_metric
            best_epoch = epoch
            best_snapshot = model.snapshot()
        if improved:
            bad_rounds = 0
        record = {"stage": stage, "step": epoch, "seed": cfg.seed,
                  "loss": float(np.mean(losses)) if losses else None,
                  "val_metric": val_metric, "best_metric": best_metric}
        record.update({f"{k}_mean": float(np.mean(v)) for k, v in extras.items()})
        history.append(record)
        _append_jsonl(cfg.log_path, record)
        if not improved:
            bad_rounds += 1
            if bad_rounds >= cfg.patience:
                stopped_early = True
                break
    model.load_params(best_snapshot)
    return TrainResult(stage=stage, best_metric=best_metric,
                       best_epoch=best_epoch, epochs_run=epochs_run,
                       stopped_early=stopped_early, history=history)


def _caption_params(model: CaptionModel, cfg: TrainConfig) -> dict[str, Tensor]:
    if cfg.freeze_encoder:
        return dict(model.decoder_params())
    return {**model.encoder_params(), **model.decoder_params()}


# -- stage pos: tag generator -----------------------------------------


def tag_accuracy(model: CaptionModel, examples) -> float:
    """Mean positional agreement between generated tags and the closest
    reference plan.

    A clip captioned under several plans has several gold tag sequences;
    one decode can match at most one of them, so each clip scores
    against its best-matching reference.
    """
    if not examples:
        raise DomainError("tag_accuracy: no examples")
    total = 0.0
    with no_grad():
        for ex in examples:
            fused = model.fuse_clip(ex.clip)
            predicted = model.decode_tags(fused.x).sequence
            total += max(model.posgen.accuracy(predicted, gold)
                         for gold in ex.tag_references())
    return total / len(examples)


def train_pos(model: CaptionModel, dataset: Dataset,
              cfg: TrainConfig) -> TrainResult:
    train = dataset.split("train")
    val = dataset.split("val")

    def clip_loss(idx: int, epoch: int):
        ex = train[idx]
        fused = model.fuse_clip(ex.clip)
        cap = ex.captions[(epoch + idx) % len(ex.captions)]
        gold = PosSequence(list(cap["tags"]))
        loss = model.posgen.xe_loss(fused.x, gold) * (1.0 / len(gold))
        return loss, {}

    params = {**model.encoder_params(), **model.posgen_params()}
    return _train_loop(model, params, len(train), cfg, "pos", clip_loss,
                       lambda: tag_accuracy(model, val))


# -- stage caption_xe: word decoder -----------------------------------


def precompute_psi(model: CaptionModel, examples) -> dict[str, Tensor]:
    """Freeze each clip's syntax summary as a plain constant tensor."""
    cache = {}
    with no_grad():
        for ex in examples:
            fused = model.fuse_clip(ex.clip)
            psi = model.decoder_psi(model.decode_tags(fused.x).feature)
            cache[ex.clip.clip_id] = Tensor(psi.data.copy())
    return cache


def reference_psi(model: CaptionModel, fused, cap: dict) -> Tensor:
    """Syntax summary of one reference's own tag plan, teacher forced.

    Computed live so it tracks the encoder as it trains, detached so the
    summary stays an input rather than a gradient path.  Pairing each
    reference with its own plan is what lets one clip train under
    several plans: the summary is then the only signal separating the
    targets, so the decoder is forced to read it.
    """
    if not model.config.use_pos_guidance:
        return model.decoder_psi(None)
    with no_grad():
        feat = model.posgen.summarize(fused.x, PosSequence(list(cap["tags"])))
        return Tensor(model.decoder_psi(feat).data.copy())


def evaluate_model(model: CaptionModel, examples,
                   vocab: Vocabulary) -> dict[str, float]:
    """Greedy-decode every clip and score against its references."""
    corpus = RefCorpus.build({ex.clip.clip_id: ex.references()
                              for ex in examples})
    candidates = caption_split(model, examples, vocab)
    return evaluate_split(candidates, corpus)


def val_caption_metric(model: CaptionModel, examples,
                       vocab: Vocabulary) -> float:
    return evaluate_model(model, examples, vocab)[VAL_METRIC]


def tf_token_accuracy(model: CaptionModel, examples, vocab: Vocabulary) -> float:
    """Teacher-forced next-token accuracy over every reference, each
    paired with the summary of its own tag plan."""
    hits = 0
    total = 0
    with no_grad():
        for ex in examples:
            fused = model.fuse_clip(ex.clip)
            for cap in ex.captions:
                psi = reference_psi(model, fused, cap)
                ids = vocab.encode(list(cap["tokens"]))
                state = model.decoder.zero_state()
                for prev, target in zip(ids[:-1], ids[1:]):
                    logits, state, _ = model.decoder.step(prev, psi, fused.x, state)
                    hits += int(np.argmax(logits.data) == target)
                    total += 1
    return hits / total if total else 0.0


def train_xe(model: CaptionModel, dataset: Dataset,
             cfg: TrainConfig) -> TrainResult:
    train = dataset.split("train")
    val = dataset.split("val")
    vocab = dataset.vocab
    psi_cache = (precompute_psi(model, train)
                 if cfg.guidance_source == "clip" else None)

    def clip_loss(idx: int, epoch: int):
        ex = train[idx]
        fused = model.fuse_clip(ex.clip)
        cap = ex.captions[(epoch + idx) % len(ex.captions)]
        ids = vocab.encode(list(cap["tokens"]))
        if psi_cache is not None:
            psi = psi_cache[ex.clip.clip_id]
        else:
            psi = reference_psi(model, fused, cap)
        loss = model.decoder.xe_loss(fused.x, psi, ids) * (1.0 / (len(ids) - 1))
        return loss, {}

    return _train_loop(model, _caption_params(model, cfg), len(train), cfg,
                       "caption_xe", clip_loss,
                       lambda: val_caption_metric(model, val, vocab))


# -- stage caption_rl: self-critical fine-tuning ----------------------


def scst_step(model: CaptionModel, ex, reward_corpus: RefCorpus,
              vocab: Vocabulary, rng: np.random.Generator,
              temperature: float = 1.0) -> tuple[Tensor | None, RewardRecord]:
    """One self-critical draw for one clip.

    Returns the surrogate loss (advantage times the per-token
    teacher-forced NLL of the sampled caption) and the reward record.
    The greedy baseline and the syntax summary are computed without
    gradient; a zero advantage yields no loss term at all, so the
    parameters provably receive exactly zero gradient from the clip.
    """
    fused = model.fuse_clip(ex.clip)
    with no_grad():
        pos = model.decode_tags(fused.x)
        psi = Tensor(model.decoder_psi(pos.feature).data.copy())
    max_words = model.config.max_words
    bos, eos = vocab.bos_id, vocab.eos_id
    s_ids, _, _ = decode_sample(model.decoder, fused.x, psi, bos, eos,
                                max_words, rng, temperature)
    g_ids, _, _ = decode_greedy(model.decoder, fused.x, psi, bos, eos,
                                max_words)
    record = RewardRecord(
        sampled_ids=s_ids,
        sampled_reward=cider_d(vocab.decode(s_ids), ex.clip.clip_id,
                               reward_corpus),
        greedy_ids=g_ids,
        greedy_reward=cider_d(vocab.decode(g_ids), ex.clip.clip_id,
                              reward_corpus),
    )
    if record.advantage == 0.0:
        return None, record
    nll = model.decoder.xe_loss(fused.x, psi, s_ids)
    return nll * (record.advantage / (len(s_ids) - 1)), record


def train_scst(model: CaptionModel, dataset: Dataset,
               cfg: TrainConfig) -> TrainResult:
    train = dataset.split("train")
    val = dataset.split("val")
    vocab = dataset.vocab
    reward_corpus = RefCorpus.build({ex.clip.clip_id: ex.references()
                                     for ex in train})

    def clip_loss(idx: int, epoch: int):
        rng = _epoch_rng(cfg.seed, epoch, 20_000 + idx)
        loss, record = scst_step(model, train[idx], reward_corpus, vocab,
                                 rng, cfg.scst_temperature)
        info = {"advantage": record.advantage,
                "sample_reward": record.sampled_reward,
                "greedy_reward": record.greedy_reward}
        return loss, info

    return _train_loop(model, _caption_params(model, cfg), len(train), cfg,
                       "caption_rl", clip_loss,
                       lambda: val_caption_metric(model, val, vocab))


# -- fusion ablation ---------------------------------------------------


def run_ablation(dataset: Dataset, base_config, modes,
                 xe_cfg: TrainConfig, pos_cfg: TrainConfig | None = None,
                 guided_mode: str | None = "cross_gating",
                 eval_split: str = "test",
                 log_dir: str | Path | None = None) -> dict[str, dict]:
    """Train one word-decoder per fusion mode and score them side by side.

    Each mode gets a fresh model with syntax guidance off, trained with
    the same budget and seed, so the fusion wiring is the only thing
    that differs.  When guided_mode is set, one more variant named
    "<mode>+guidance" runs the full two-stage recipe with guidance on.
    Returns {variant: {"scores", "best_val", "epochs_run"}} in run order.
    """
    def stage_cfg(cfg: TrainConfig, variant: str, stage: str) -> TrainConfig:
        if log_dir is None:
            return cfg
        path = Path(log_dir) / f"{variant}.{stage}.jsonl"
        return replace(cfg, log_path=path)

    if log_dir is not None:
        Path(log_dir).mkdir(parents=True, exist_ok=True)
    held_out = dataset.split(eval_split)
    vocab = dataset.vocab
    results: dict[str, dict] = {}

    def finish(variant: str, model: CaptionModel, res: TrainResult) -> None:
        results[variant] = {
            "scores": evaluate_model(model, held_out, vocab),
            "best_val": res.best_metric,
            "epochs_run": res.epochs_run,
        }

    base = base_config.to_dict()
    for mode in modes:
        cfg = ModelConfig(**{**base, "fusion_mode": mode,
                             "use_pos_guidance": False})
        model = CaptionModel(cfg, seed=xe_cfg.seed)
        res = train_xe(model, dataset, stage_cfg(xe_cfg, mode, "caption_xe"))
        finish(mode, model, res)

    if guided_mode is not None:
        variant = f"{guided_mode}+guidance"
        cfg = ModelConfig(**{**base, "fusion_mode": guided_mode,
                             "use_pos_guidance": True})
        model = CaptionModel(cfg, seed=xe_cfg.seed)
        train_pos(model, dataset, stage_cfg(pos_cfg or xe_cfg, variant, "pos"))
        res = train_xe(model, dataset,
                       stage_cfg(xe_cfg, variant, "caption_xe"))
        finish(variant, model, res)
    return results
