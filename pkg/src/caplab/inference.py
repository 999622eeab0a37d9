"""Caption decoding strategies and the interactive control session.

Greedy, temperature sampling and beam search all share the decoder
step contract, emit at most ``max_words`` tokens (the end token
included), and stop early on the end token.  Beam search keeps a live frontier whose
expansions compete by cumulative log-probability; hypotheses that
select the end token retire with their score frozen, and the final
ranking is by log-probability per emitted token, so beam width 1
reproduces greedy decoding exactly.

A control session wraps one clip and composes tag edits (replace or
insert) into a forcing map for the tag generator, regenerating the
caption after every edit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .corpus import Vocabulary
from .decoder import CaptionDecoder, DecoderState
from .errors import DomainError
from .fusion import FeatureClip
from .model import CaptionModel
from .posgen import PosSequence, tag_id
from .tensor import Tensor, no_grad

CONTROL_OPS = ("set", "insert")


def _log_probs(logits: np.ndarray) -> np.ndarray:
    m = logits.max()
    return logits - (m + np.log(np.exp(logits - m).sum()))


@dataclass
class Caption:
    """One decoded caption with everything the report layer shows."""

    tokens: list[str]
    token_ids: list[int]          # BOS-led; ends with EOS iff terminated
    score: float                  # total log-probability of emitted tokens
    terminated: bool
    attention: np.ndarray         # (emitted steps, fused rows)
    tags: PosSequence
    tag_attention: np.ndarray
    unused_overrides: list[int]
    edited: bool

    @property
    def per_token_score(self) -> float:
        n = len(self.token_ids) - 1
        return self.score / n if n else float("-inf")


def decode_greedy(decoder: CaptionDecoder, x_seq: Tensor, psi: Tensor,
                  bos_id: int, eos_id: int,
                  max_words: int) -> tuple[list[int], float, bool]:
    """Argmax decoding; ties go to the lowest token id."""
    if max_words < 1:
        raise DomainError("max_words must be positive")
    ids = [bos_id]
    total = 0.0
    terminated = False
    with no_grad():
        state = decoder.zero_state()
        for _ in range(max_words):
            logits, state, _ = decoder.step(ids[-1], psi, x_seq, state)
            lp = _log_probs(logits.data)
            tok = int(np.argmax(lp))
            total += float(lp[tok])
            ids.append(tok)
            if tok == eos_id:
                terminated = True
                break
    return ids, total, terminated


def decode_sample(decoder: CaptionDecoder, x_seq: Tensor, psi: Tensor,
                  bos_id: int, eos_id: int, max_words: int,
                  rng: np.random.Generator,
                  temperature: float = 1.0) -> tuple[list[int], float, bool]:
    """Multinomial decoding; temperature scales logits before softmax."""
    if max_words < 1:
        raise DomainError("max_words must be positive")
    if temperature <= 0:
        raise DomainError("temperature must be positive")
    ids = [bos_id]
    total = 0.0
    terminated = False
    with no_grad():
        state = decoder.zero_state()
        for _ in range(max_words):
            logits, state, _ = decoder.step(ids[-1], psi, x_seq, state)
            lp = _log_probs(logits.data / temperature)
            probs = np.exp(lp)
            probs /= probs.sum()
            tok = int(rng.choice(len(probs), p=probs))
            total += float(_log_probs(logits.data)[tok])
            ids.append(tok)
            if tok == eos_id:
                terminated = True
                break
    return ids, total, terminated


@dataclass
class _Hyp:
    ids: list[int]
    logp: float
    state: object
    terminated: bool = False


def beam_search(step_fn: Callable[[int, object], tuple[np.ndarray, object]],
                start_state: object, bos_id: int, eos_id: int,
                width: int, max_words: int) -> list[tuple[list[int], float]]:
    """Generic beam search over a step function.

    step_fn(prev_id, state) -> (log-probabilities, new state).  Returns
    finished hypotheses sorted by log-probability per emitted token;
    each entry is (ids including BOS and any end token, total logp).
    """
    if width < 1:
        raise DomainError("beam width must be positive")
    if max_words < 1:
        raise DomainError("max_words must be positive")
    live = [_Hyp(ids=[bos_id], logp=0.0, state=start_state)]
    done: list[_Hyp] = []
    for _ in range(max_words):
        if not live:
            break
        pool = []
        for hyp in live:
            lp, new_state = step_fn(hyp.ids[-1], hyp.state)
            for tok in range(len(lp)):
                pool.append((hyp.logp + float(lp[tok]), hyp, tok, new_state))
        pool.sort(key=lambda c: -c[0])  # stable: earlier hyp, lower token id win ties
        live = []
        for total, hyp, tok, new_state in pool[:width]:
            nxt = _Hyp(ids=hyp.ids + [tok], logp=total, state=new_state,
                       terminated=(tok == eos_id))
            (done if nxt.terminated else live).append(nxt)
    done.extend(live)
    done.sort(key=lambda h: -(h.logp / (len(h.ids) - 1)))
    return [(h.ids, h.logp) for h in done]


def decode_beam(decoder: CaptionDecoder, x_seq: Tensor, psi: Tensor,
                bos_id: int, eos_id: int, max_words: int,
                width: int) -> tuple[list[int], float, bool]:
    with no_grad():
        def step_fn(prev_id: int, state: DecoderState):
            logits, new_state, _ = decoder.step(prev_id, psi, x_seq, state)
            return _log_probs(logits.data), new_state

        ranked = beam_search(step_fn, decoder.zero_state(), bos_id, eos_id,
                             width, max_words)
    ids, logp = ranked[0]
    return ids, logp, ids[-1] == eos_id


def _replay_attention(decoder: CaptionDecoder, x_seq: Tensor, psi: Tensor,
                      ids: list[int]) -> np.ndarray:
    rows = []
    with no_grad():
        state = decoder.zero_state()
        for prev in ids[:-1]:
            _, state, weights = decoder.step(prev, psi, x_seq, state)
            rows.append(weights.data.copy())
    return np.stack(rows, axis=0) if rows else np.zeros((0, x_seq.data.shape[0]))


def caption_clip(model: CaptionModel, clip: FeatureClip, vocab: Vocabulary,
                 overrides: dict[int, str] | None = None, beam_width: int = 1,
                 temperature: float | None = None,
                 rng: np.random.Generator | None = None) -> Caption:
    """Full pipeline for one clip: fuse, tag, then decode words."""
    with no_grad():
        fused = model.fuse_clip(clip)
        pos = model.decode_tags(fused.x, dict(overrides) if overrides else None)
        psi = model.decoder_psi(pos.feature)
        max_words = model.config.max_words
        bos, eos = vocab.bos_id, vocab.eos_id
        if temperature is not None:
            if rng is None:
                raise DomainError("sampling needs an rng")
            ids, logp, term = decode_sample(model.decoder, fused.x, psi, bos,
                                            eos, max_words, rng, temperature)
        elif beam_width == 1:
            ids, logp, term = decode_greedy(model.decoder, fused.x, psi, bos,
                                            eos, max_words)
        else:
            ids, logp, term = decode_beam(model.decoder, fused.x, psi, bos,
                                          eos, max_words, beam_width)
        attention = _replay_attention(model.decoder, fused.x, psi, ids)
    return Caption(tokens=vocab.decode(ids), token_ids=ids, score=logp,
                   terminated=term, attention=attention, tags=pos.sequence,
                   tag_attention=pos.attention,
                   unused_overrides=pos.unused_overrides,
                   edited=pos.feature.edited)


def caption_split(model: CaptionModel, examples, vocab: Vocabulary,
                  beam_width: int = 1) -> dict[str, list[str]]:
    """Decode every clip of a split; keyed by clip id for evaluation."""
    return {ex.clip.clip_id: caption_clip(model, ex.clip, vocab,
                                          beam_width=beam_width).tokens
            for ex in examples}


# -- interactive control ----------------------------------------------


@dataclass
class Edit:
    op: str
    position: int
    tag: str

    def to_dict(self) -> dict:
        return {"op": self.op, "position": self.position, "tag": self.tag}


@dataclass
class ControlSession:
    """Edit state for one clip: compose tag edits, recaption after each.

    ``set`` forces a tag at a position of the generated sequence;
    ``insert`` forces a tag at a position and shifts every previously
    forced position at or beyond it one slot right.  Positions validate
    against the current sequence's length.  ``reset`` drops all edits
    and the history.
    """

    model: CaptionModel
    clip: FeatureClip
    vocab: Vocabulary
    beam_width: int = 1
    history: list[Edit] = field(init=False, default_factory=list)
    current: Caption = field(init=False)

    def __post_init__(self):
        self.current = self._regenerate()

    def _forced(self) -> dict[int, str]:
        forced: dict[int, str] = {}
        for e in self.history:
            if e.op == "insert":
                forced = {(p + 1 if p >= e.position else p): t
                          for p, t in forced.items()}
            forced[e.position] = e.tag
        return forced

    def _regenerate(self) -> Caption:
        forced = self._forced()
        return caption_clip(self.model, self.clip, self.vocab,
                            overrides=forced or None,
                            beam_width=self.beam_width)

    def apply(self, op: str, position: int, tag: str) -> Caption:
        if op not in CONTROL_OPS:
            raise DomainError(f"unknown op {op!r}; valid ops: {CONTROL_OPS}")
        tag_id(tag)  # validates, error lists the tag inventory
        length = len(self.current.tags.tags)
        if position < 0 or position > length:
            raise DomainError(
                f"position {position} beyond current sequence length {length}")
        self.history.append(Edit(op=op, position=position, tag=tag))
        self.current = self._regenerate()
        return self.current

    def reset(self) -> Caption:
        self.history.clear()
        self.current = self._regenerate()
        return self.current
