"""Two-stream temporal encoding and cross-modal gated fusion.

Each modality runs through its own LSTM over the padded frame axis.  In
the gated mode, each stream's hidden sequence is re-weighted by a residual
ReLU gate driven by the opposite stream:

    gate(driver, target) = relu(driver @ w + b) * target + target

so zeroed gate parameters reduce the gated path exactly to plain
concatenation.  The fused sequence x has one row per input step and a
fixed width regardless of mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import Dense, LstmCell, glorot_uniform
from .tensor import Tensor, concat, relu, matmul, stack, row

FUSION_MODES = ("cross_gating", "concat", "elementwise_add")


@dataclass
class FeatureClip:
    """Padded per-clip feature pair; rows at and past true_length are zero."""

    clip_id: str
    content: np.ndarray
    motion: np.ndarray
    true_length: int

    def validate(self, pad_len: int, content_dim: int, motion_dim: int) -> None:
        if self.content.shape != (pad_len, content_dim):
            raise ShapeError(
                f"{self.clip_id}: content shape {self.content.shape}, "
                f"expected {(pad_len, content_dim)}")
        if self.motion.shape != (pad_len, motion_dim):
            raise ShapeError(
                f"{self.clip_id}: motion shape {self.motion.shape}, "
                f"expected {(pad_len, motion_dim)}")
        if not (0 < self.true_length <= pad_len):
            raise ShapeError(f"{self.clip_id}: true_length {self.true_length} "
                             f"outside (0, {pad_len}]")
        if self.true_length < pad_len:
            if np.any(self.content[self.true_length:]) or np.any(self.motion[self.true_length:]):
                raise ShapeError(f"{self.clip_id}: nonzero padding rows")


@dataclass
class GatingParams:
    """w stored (driver_dim, target_dim) so gating is driver @ w + b."""

    w: Tensor
    b: Tensor


def make_gating(driver_dim: int, target_dim: int, rng: np.random.Generator) -> GatingParams:
    return GatingParams(
        w=Tensor(glorot_uniform(rng, (driver_dim, target_dim)), requires_grad=True),
        b=Tensor(np.zeros(target_dim), requires_grad=True),
    )


def cross_gate(driver: Tensor, target: Tensor, g: GatingParams) -> Tensor:
    """Residual multiplicative gate; works on vectors or row-stacked matrices."""
    scale = relu(matmul(driver, g.w) + g.b)
    return scale * target + target


@dataclass
class FusedSequence:
    x: Tensor
    gated_content: Tensor | None = None
    gated_motion: Tensor | None = None


class FusionEncoder:
    def __init__(self, content_dim: int, motion_dim: int, hidden: int,
                 fused_dim: int, rng: np.random.Generator):
        self.content_dim = content_dim
        self.motion_dim = motion_dim
        self.hidden = hidden
        self.fused_dim = fused_dim
        self.content_lstm = LstmCell(content_dim, hidden, rng)
        self.motion_lstm = LstmCell(motion_dim, hidden, rng)
        self.content_gate = make_gating(hidden, hidden, rng)   # driven by motion stream
        self.motion_gate = make_gating(hidden, hidden, rng)    # driven by content stream
        self.fuse_proj = Dense(2 * hidden, fused_dim, rng)

    def encode_temporal(self, content: Tensor, motion: Tensor) -> tuple[Tensor, Tensor]:
        """Run both stream LSTMs from zero state over every padded row."""
        m = content.shape[0]
        if motion.shape[0] != m:
            raise ShapeError("content and motion step counts differ")
        hc, cc = self.content_lstm.zero_state()
        hm, cm = self.motion_lstm.zero_state()
        content_states = []
        motion_states = []
        for i in range(m):
            hc, cc = self.content_lstm.step(row(content, i), hc, cc)
            hm, cm = self.motion_lstm.step(row(motion, i), hm, cm)
            content_states.append(hc)
            motion_states.append(hm)
        return stack(content_states), stack(motion_states)

    def fuse(self, content: Tensor, motion: Tensor, mode: str) -> FusedSequence:
        if mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")
        h_content, h_motion = self.encode_temporal(content, motion)
        if mode == "elementwise_add":
            if self.hidden != self.fused_dim:
                raise ConfigError(
                    f"elementwise_add needs hidden == fused_dim, got "
                    f"{self.hidden} != {self.fused_dim}")
            return FusedSequence(x=h_content + h_motion)
        if mode == "cross_gating":
            gated_c = cross_gate(h_motion, h_content, self.content_gate)
            gated_m = cross_gate(h_content, h_motion, self.motion_gate)
            x = self.fuse_proj(concat([gated_c, gated_m], axis=1))
            return FusedSequence(x=x, gated_content=gated_c, gated_motion=gated_m)
        x = self.fuse_proj(concat([h_content, h_motion], axis=1))
        return FusedSequence(x=x)

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for prefix, layer in (("content_lstm", self.content_lstm),
                              ("motion_lstm", self.motion_lstm),
                              ("fuse", self.fuse_proj)):
            out.extend((f"{prefix}.{n}", t) for n, t in layer.parameters())
        out.append(("content_gate.w", self.content_gate.w))
        out.append(("content_gate.b", self.content_gate.b))
        out.append(("motion_gate.w", self.motion_gate.w))
        out.append(("motion_gate.b", self.motion_gate.b))
        return out
