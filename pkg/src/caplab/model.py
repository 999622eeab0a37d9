"""Full model assembly: configuration, parameter registry, shared paths."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from .decoder import CaptionDecoder
from .errors import ConfigError
from .fusion import FUSION_MODES, FeatureClip, FusedSequence, FusionEncoder
from .corpus import load_checkpoint, save_checkpoint
from .posgen import GlobalPosFeature, PosDecodeResult, PosGenerator
from .tensor import Tensor, narrow


@dataclass
class ModelConfig:
    """Architecture knobs.  Defaults follow the reference configuration:
    512-wide recurrent states, 468-wide embeddings, 30 padded feature
    steps, captions truncated at 28 words."""

    vocab_size: int
    content_dim: int = 1536
    motion_dim: int = 1024
    hidden: int = 512
    embed_dim: int = 468
    attn_dim: int = 512
    fused_dim: int = 512
    pad_len: int = 30
    max_words: int = 28
    fusion_mode: str = "cross_gating"
    use_pos_guidance: bool = True
    mask_padding: bool = False

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.fusion_mode == "elementwise_add" and self.hidden != self.fused_dim:
            raise ConfigError("elementwise_add requires hidden == fused_dim")
        for name in ("vocab_size", "content_dim", "motion_dim", "hidden",
                     "embed_dim", "attn_dim", "fused_dim", "pad_len", "max_words"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    @property
    def pos_max_len(self) -> int:
        # room for max_words content tags plus the terminal tag
        return self.max_words + 1


class CaptionModel:
    """Encoder, tag generator and word decoder behind one parameter registry.

    Parameter creation order is fixed so a given seed always produces the
    same initialization.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.encoder = FusionEncoder(config.content_dim, config.motion_dim,
                                     config.hidden, config.fused_dim, rng)
        self.posgen = PosGenerator(config.embed_dim, config.hidden,
                                   config.fused_dim, config.attn_dim, rng)
        self.decoder = CaptionDecoder(config.vocab_size, config.embed_dim,
                                      config.hidden, config.fused_dim,
                                      config.attn_dim, rng)

    # -- parameter registry -------------------------------------------

    def encoder_params(self) -> dict[str, Tensor]:
        return {f"encoder.{n}": t for n, t in self.encoder.parameters()}

    def posgen_params(self) -> dict[str, Tensor]:
        return {f"posgen.{n}": t for n, t in self.posgen.parameters()}

    def decoder_params(self) -> dict[str, Tensor]:
        return {f"decoder.{n}": t for n, t in self.decoder.parameters()}

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.encoder_params())
        out.update(self.posgen_params())
        out.update(self.decoder_params())
        return out

    def load_params(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        if missing or extra:
            raise ConfigError(f"parameter name mismatch; missing={missing} extra={extra}")
        for name, p in params.items():
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != p.data.shape:
                raise ConfigError(f"{name}: shape {a.shape} != expected {p.data.shape}")
            p.data = a.copy()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.parameters().items()}

    # -- shared forward paths -----------------------------------------

    def clip_tensors(self, clip: FeatureClip) -> tuple[Tensor, Tensor]:
        cfg = self.config
        clip.validate(cfg.pad_len, cfg.content_dim, cfg.motion_dim)
        return Tensor(clip.content), Tensor(clip.motion)

    def fuse_clip(self, clip: FeatureClip, mode: str | None = None) -> FusedSequence:
        """Fused sequence for a clip.

        By default every padded step stays in, so attention normalizes
        over all pad_len rows.  With mask_padding on, the fused sequence
        is cut to the clip's true length, which removes padding from every
        later attention readout.
        """
        content, motion = self.clip_tensors(clip)
        fused = self.encoder.fuse(content, motion, mode or self.config.fusion_mode)
        if self.config.mask_padding and clip.true_length < self.config.pad_len:
            fused = FusedSequence(x=narrow(fused.x, 0, clip.true_length),
                                  gated_content=fused.gated_content,
                                  gated_motion=fused.gated_motion)
        return fused

    def decode_tags(self, x_seq: Tensor,
                    overrides: dict[int, str] | None = None) -> PosDecodeResult:
        return self.posgen.decode(x_seq, self.config.pos_max_len, overrides)

    def decoder_psi(self, feature: GlobalPosFeature | None) -> Tensor:
        """The syntax feature the word decoder actually sees.

        With guidance disabled the decoder gets a zero vector, which the
        residual gate maps to exactly zero influence.
        """
        if not self.config.use_pos_guidance or feature is None:
            return Tensor(np.zeros(self.config.hidden))
        return feature.psi


# -- checkpoint wiring ------------------------------------------------


def save_model(path, model: CaptionModel, stage: str, seed: int,
               vocab_tokens: list[str]) -> None:
    """Write parameters plus the metadata needed to rebuild the model."""
    meta = {
        "stage": stage,
        "seed": seed,
        "config": model.config.to_dict(),
        "config_hash": model.config.config_hash(),
        "vocab": list(vocab_tokens),
    }
    save_checkpoint(path, model.snapshot(), meta)


def load_model(path) -> tuple[CaptionModel, dict]:
    """Rebuild a model from a checkpoint; validates names and shapes."""
    arrays, meta = load_checkpoint(path)
    for key in ("stage", "config", "config_hash", "vocab"):
        if key not in meta:
            raise ConfigError(f"checkpoint meta missing {key!r}")
    config = ModelConfig.from_dict(meta["config"])
    if config.config_hash() != meta["config_hash"]:
        raise ConfigError("checkpoint config does not match its recorded hash")
    if config.vocab_size != len(meta["vocab"]):
        raise ConfigError(
            f"config vocab_size {config.vocab_size} != stored vocabulary "
            f"of {len(meta['vocab'])} tokens")
    model = CaptionModel(config, seed=int(meta.get("seed", 0)))
    model.load_params(arrays)
    return model, meta


def check_data_compat(model: CaptionModel, meta: dict, dataset) -> None:
    """Reject a checkpoint whose geometry or vocabulary left this dataset."""
    cfg = model.config
    for field, have in (("content_dim", dataset.grammar.content_dim),
                        ("motion_dim", dataset.grammar.motion_dim),
                        ("pad_len", dataset.grammar.pad_len)):
        if getattr(cfg, field) != have:
            raise ConfigError(
                f"checkpoint/data mismatch: {field} is {getattr(cfg, field)} "
                f"in the checkpoint but {have} in the dataset")
    if meta["vocab"] != list(dataset.vocab.tokens):
        raise ConfigError(
            "checkpoint/data mismatch: checkpoint vocabulary differs from "
            "the dataset vocabulary")
