"""Syntax tag sequence generator.

An attention-equipped LSTM emits one coarse part-of-speech tag per step
over a closed 14-tag set, consuming the embedding of the previous tag and
an attention readout over the fused clip sequence.  Decoding is always
greedy; individual positions can be pinned by an override map, which is
how interactive tag editing enters the pipeline.  The hidden state at the
step that emits the terminal tag summarizes the whole sequence and is the
global syntax feature handed to the word decoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .layers import Dense, Embedding, LstmCell, glorot_uniform
from .tensor import Tensor, concat, log_softmax, matmul, pick, softmax, tanh

POS_TAGS = ("VERB", "NOUN", "ADJ", "ADV", "CONJ", "PRON", "PREP", "ART",
            "AUX", "PRT", "NUM", "SYM", "UNK", "EOS")
TAG_IDS = {t: i for i, t in enumerate(POS_TAGS)}
N_TAGS = len(POS_TAGS)
EOS_TAG = "EOS"
EOS_TAG_ID = TAG_IDS[EOS_TAG]
# learned start-of-sequence embedding row; never a valid prediction
BOS_ROW = N_TAGS


def tag_id(tag: str) -> int:
    try:
        return TAG_IDS[tag]
    except KeyError:
        raise DomainError(f"unknown tag {tag!r}; valid tags: {', '.join(POS_TAGS)}") from None


@dataclass
class PosSequence:
    """Tag strings, terminal tag included exactly once at the end."""

    tags: list[str]

    def __post_init__(self):
        if not self.tags:
            raise DomainError("empty tag sequence")
        if self.tags[-1] != EOS_TAG or EOS_TAG in self.tags[:-1]:
            raise DomainError(f"tag sequence must end with a single {EOS_TAG}: {self.tags}")
        for t in self.tags:
            tag_id(t)

    def ids(self) -> list[int]:
        return [TAG_IDS[t] for t in self.tags]

    def __len__(self) -> int:
        return len(self.tags)


@dataclass
class GlobalPosFeature:
    psi: Tensor
    source_tags: PosSequence
    edited: bool


@dataclass
class AttentionParams:
    """Additive attention: score_i = v . tanh(q @ wq + x_i @ wk + b)."""

    v: Tensor
    wq: Tensor
    wk: Tensor
    b: Tensor


def make_attention(attn_dim: int, query_dim: int, key_dim: int,
                   rng: np.random.Generator) -> AttentionParams:
    return AttentionParams(
        v=Tensor(glorot_uniform(rng, (attn_dim, 1))[:, 0], requires_grad=True),
        wq=Tensor(glorot_uniform(rng, (query_dim, attn_dim)), requires_grad=True),
        wk=Tensor(glorot_uniform(rng, (key_dim, attn_dim)), requires_grad=True),
        b=Tensor(np.zeros(attn_dim), requires_grad=True),
    )


def attend(keys: Tensor, query: Tensor, p: AttentionParams) -> tuple[Tensor, Tensor]:
    """Weighted readout over key rows; returns (context, weights)."""
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise DomainError(f"attend needs a non-empty key matrix, got shape {keys.shape}")
    hidden = tanh(matmul(keys, p.wk) + (matmul(query, p.wq) + p.b))
    scores = matmul(hidden, p.v)
    weights = softmax(scores)
    context = matmul(weights, keys)
    return context, weights


@dataclass
class PosDecodeResult:
    sequence: PosSequence
    feature: GlobalPosFeature
    attention: np.ndarray            # (steps, m), row-normalized
    unused_overrides: list[int]


class PosGenerator:
    def __init__(self, embed_dim: int, hidden: int, fused_dim: int,
                 attn_dim: int, rng: np.random.Generator):
        self.hidden = hidden
        self.embedding = Embedding(N_TAGS + 1, embed_dim, rng)  # +1 start row
        self.attn = make_attention(attn_dim, hidden, fused_dim, rng)
        self.cell = LstmCell(embed_dim + fused_dim, hidden, rng)
        self.out = Dense(hidden, N_TAGS, rng)

    def step(self, prev_row: int, h: Tensor, c: Tensor,
             x_seq: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        emb = self.embedding(prev_row)
        context, weights = attend(x_seq, h, self.attn)
        h2, c2 = self.cell.step(concat([emb, context]), h, c)
        logits = self.out(h2)
        return logits, h2, c2, weights

    def decode(self, x_seq: Tensor, max_len: int,
               overrides: dict[int, str] | None = None) -> PosDecodeResult:
        """Greedy decode with optional pinned positions.

        max_len caps the sequence including the terminal tag; the final
        slot is closed with EOS if the model has not ended by then.
        Overrides at positions never reached are reported, not applied.
        """
        if max_len < 1:
            raise DomainError(f"max_len must be positive, got {max_len}")
        forced = {}
        for pos, tag in (overrides or {}).items():
            if pos < 0:
                raise DomainError(f"override position {pos} is negative")
            forced[int(pos)] = tag_id(tag)
        h, c = self.cell.zero_state()
        prev = BOS_ROW
        tags: list[str] = []
        rows: list[np.ndarray] = []
        psi = None
        for t in range(max_len):
            logits, h, c, weights = self.step(prev, h, c, x_seq)
            rows.append(weights.data.copy())
            if t in forced:
                chosen = forced.pop(t)
            elif t == max_len - 1:
                chosen = EOS_TAG_ID
            else:
                chosen = int(np.argmax(logits.data))
            tags.append(POS_TAGS[chosen])
            if chosen == EOS_TAG_ID:
                psi = h
                break
            prev = chosen
        if psi is None:
            # cap slot was pinned to a non-terminal tag; close explicitly
            logits, h, c, weights = self.step(prev, h, c, x_seq)
            rows.append(weights.data.copy())
            tags.append(EOS_TAG)
            psi = h
        seq = PosSequence(tags)
        edited = bool(overrides)
        return PosDecodeResult(
            sequence=seq,
            feature=GlobalPosFeature(psi=psi, source_tags=seq, edited=edited),
            attention=np.stack(rows, axis=0),
            unused_overrides=sorted(forced.keys()),
        )

    def summarize(self, x_seq: Tensor, tags: PosSequence) -> GlobalPosFeature:
        """State summary of a supplied tag sequence (teacher forced).

        Runs the same recurrence as decode with the tags given instead
        of predicted; the hidden state at the terminal step is the
        summary.  A greedy decode that emits exactly these tags yields
        the identical feature, so summaries of gold plans and summaries
        of matching decodes agree bit for bit.
        """
        h, c = self.cell.zero_state()
        prev = BOS_ROW
        for tid in tags.ids():
            _, h, c, _ = self.step(prev, h, c, x_seq)
            prev = tid
        return GlobalPosFeature(psi=h, source_tags=tags, edited=False)

    def xe_loss(self, x_seq: Tensor, gold: PosSequence) -> Tensor:
        """Teacher-forced negative log-likelihood summed over every step."""
        h, c = self.cell.zero_state()
        prev = BOS_ROW
        total = None
        for tid in gold.ids():
            logits, h, c, _ = self.step(prev, h, c, x_seq)
            nll = -pick(log_softmax(logits), tid)
            total = nll if total is None else total + nll
            prev = tid
        return total

    def accuracy(self, predicted: PosSequence, gold: PosSequence) -> float:
        """Positional agreement over the longer of the two sequences."""
        n = max(len(predicted), len(gold))
        hits = sum(1 for a, b in zip(predicted.tags, gold.tags) if a == b)
        return hits / n

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = [("tag_embedding", self.embedding.table)]
        out.extend((f"lstm.{n}", t) for n, t in self.cell.parameters())
        out.append(("attn.v", self.attn.v))
        out.append(("attn.wq", self.attn.wq))
        out.append(("attn.wk", self.attn.wk))
        out.append(("attn.b", self.attn.b))
        out.extend((f"out.{n}", t) for n, t in self.out.parameters())
        return out
