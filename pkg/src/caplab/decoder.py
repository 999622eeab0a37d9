"""Hierarchical word decoder steered by the global syntax feature.

Layer one consumes the previous word embedding next to a gated copy of
the global syntax feature; layer two consumes layer one's fresh state
next to an attention readout whose query is the concatenation of both
layers' states from the previous step.  Word logits come off layer two.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .layers import Dense, Embedding, LstmCell
from .fusion import cross_gate, make_gating
from .posgen import attend, make_attention
from .tensor import Tensor, concat, log_softmax, pick


@dataclass
class DecoderState:
    h1: Tensor
    c1: Tensor
    h2: Tensor
    c2: Tensor


class CaptionDecoder:
    def __init__(self, vocab_size: int, embed_dim: int, hidden: int,
                 fused_dim: int, attn_dim: int, rng: np.random.Generator):
        self.vocab_size = vocab_size
        self.hidden = hidden
        self.embedding = Embedding(vocab_size, embed_dim, rng)
        self.pos_gate = make_gating(embed_dim, hidden, rng)
        self.lstm1 = LstmCell(embed_dim + hidden, hidden, rng)
        self.attn = make_attention(attn_dim, 2 * hidden, fused_dim, rng)
        self.lstm2 = LstmCell(hidden + fused_dim, hidden, rng)
        self.out = Dense(hidden, vocab_size, rng)

    def zero_state(self) -> DecoderState:
        h1, c1 = self.lstm1.zero_state()
        h2, c2 = self.lstm2.zero_state()
        return DecoderState(h1, c1, h2, c2)

    def step(self, prev_id: int, psi: Tensor, x_seq: Tensor,
             state: DecoderState) -> tuple[Tensor, DecoderState, Tensor]:
        """One decode step; attention query uses the incoming (t-1) states."""
        if not (0 <= prev_id < self.vocab_size):
            raise DomainError(f"unknown token id {prev_id} for vocab of {self.vocab_size}")
        emb = self.embedding(prev_id)
        gated_psi = cross_gate(emb, psi, self.pos_gate)
        h1, c1 = self.lstm1.step(concat([emb, gated_psi]), state.h1, state.c1)
        query = concat([state.h1, state.h2])
        context, weights = attend(x_seq, query, self.attn)
        h2, c2 = self.lstm2.step(concat([h1, context]), state.h2, state.c2)
        logits = self.out(h2)
        return logits, DecoderState(h1, c1, h2, c2), weights

    def xe_loss(self, x_seq: Tensor, psi: Tensor, token_ids: list[int]) -> Tensor:
        """Teacher-forced NLL over a BOS-led, EOS-terminated id sequence."""
        if len(token_ids) < 2:
            raise DomainError("need at least BOS and one target token")
        state = self.zero_state()
        total = None
        for prev, target in zip(token_ids[:-1], token_ids[1:]):
            logits, state, _ = self.step(prev, psi, x_seq, state)
            nll = -pick(log_softmax(logits), target)
            total = nll if total is None else total + nll
        return total

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = [("word_embedding", self.embedding.table)]
        out.append(("pos_gate.w", self.pos_gate.w))
        out.append(("pos_gate.b", self.pos_gate.b))
        out.extend((f"lstm1.{n}", t) for n, t in self.lstm1.parameters())
        out.append(("attn.v", self.attn.v))
        out.append(("attn.wq", self.attn.wq))
        out.append(("attn.wk", self.attn.wk))
        out.append(("attn.b", self.attn.b))
        out.extend((f"lstm2.{n}", t) for n, t in self.lstm2.parameters())
        out.extend((f"out.{n}", t) for n, t in self.out.parameters())
        return out
