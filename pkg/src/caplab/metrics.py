"""Pure-function caption quality metrics.

All metrics consume pre-tokenized sequences (lists of token strings,
no BOS/EOS markers) and return plain floats.  Scales: BLEU and ROUGE-L
live in [0, 1]; the consensus metric lives in [0, 10].

- bleu: clipped n-gram precision with brevity penalty.  The sentence
  form adds 1e-9 to zero precisions so a geometric mean is always
  defined (reward usage); the corpus form pools counts and smooths
  nothing.
- rouge_l: longest-common-subsequence F-measure with beta = 1.2, max
  taken over references.
- cider_d: TF-IDF n-gram cosine consensus with clipped candidate
  counts, a Gaussian length penalty (sigma = 6), n = 1..4 averaged and
  scaled by 10.  Document frequencies come from a RefCorpus built over
  all clips' reference sets, counting each clip at most once per n-gram.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from .errors import DomainError

N_MAX = 4
CIDER_SIGMA = 6.0
SENT_EPS = 1e-9
ROUGE_BETA = 1.2


def ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# -- BLEU -------------------------------------------------------------


def _clipped_matches(candidate: list[str], references: list[list[str]], n: int) -> tuple[int, int]:
    cand = ngram_counts(candidate, n)
    total = sum(cand.values())
    if not cand:
        return 0, 0
    best = Counter()
    for ref in references:
        rc = ngram_counts(ref, n)
        for g, c in rc.items():
            if c > best[g]:
                best[g] = c
    matched = sum(min(c, best[g]) for g, c in cand.items())
    return matched, total


def _closest_ref_len(cand_len: int, references: list[list[str]]) -> int:
    # ties break toward the shorter reference
    return min((abs(len(r) - cand_len), len(r)) for r in references)[1]


def _brevity_penalty(cand_len: int, ref_len: int) -> float:
    if cand_len == 0:
        return 0.0
    if cand_len > ref_len:
        return 1.0
    return math.exp(1.0 - ref_len / cand_len)


def bleu(candidate: list[str], references: list[list[str]],
         n_max: int = N_MAX) -> list[float]:
    """Sentence-level scores [BLEU@1 .. BLEU@n_max]."""
    if not candidate:
        raise DomainError("bleu: empty candidate")
    if not references or any(not r for r in references):
        raise DomainError("bleu: references must be non-empty")
    bp = _brevity_penalty(len(candidate), _closest_ref_len(len(candidate), references))
    precisions = []
    for n in range(1, n_max + 1):
        matched, total = _clipped_matches(candidate, references, n)
        if total == 0:
            precisions.append(0.0)
        else:
            p = matched / total
            precisions.append(p if p > 0 else SENT_EPS)
    scores = []
    for n in range(1, n_max + 1):
        window = precisions[:n]
        if min(window) == 0.0:
            scores.append(0.0)
            continue
        geo = math.exp(sum(math.log(p) for p in window) / n)
        scores.append(bp * geo)
    return scores


def corpus_bleu(pairs: list[tuple[list[str], list[list[str]]]],
                n_max: int = N_MAX) -> list[float]:
    """Corpus-level scores with pooled counts and no smoothing."""
    if not pairs:
        raise DomainError("corpus_bleu: no pairs")
    matched = [0] * n_max
    totals = [0] * n_max
    cand_len = 0
    ref_len = 0
    for candidate, references in pairs:
        if not references or any(not r for r in references):
            raise DomainError("corpus_bleu: references must be non-empty")
        # an empty candidate contributes no counts but still its reference
        # length, so the brevity penalty sees the shortfall
        cand_len += len(candidate)
        ref_len += _closest_ref_len(len(candidate), references)
        for n in range(1, n_max + 1):
            m, t = _clipped_matches(candidate, references, n)
            matched[n - 1] += m
            totals[n - 1] += t
    bp = _brevity_penalty(cand_len, ref_len)
    precisions = [m / t if t else 0.0 for m, t in zip(matched, totals)]
    scores = []
    for n in range(1, n_max + 1):
        window = precisions[:n]
        if min(window) == 0.0:
            scores.append(0.0)
            continue
        geo = math.exp(sum(math.log(p) for p in window) / n)
        scores.append(bp * geo)
    return scores


# -- ROUGE-L ----------------------------------------------------------


def lcs_length(a: list[str], b: list[str]) -> int:
    """Classic O(len(a) * len(b)) dynamic program."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: list[str], references: list[list[str]],
            beta: float = ROUGE_BETA) -> float:
    """Max over references of the LCS F-measure."""
    if not candidate:
        raise DomainError("rouge_l: empty candidate")
    if not references or any(not r for r in references):
        raise DomainError("rouge_l: references must be non-empty")
    best = 0.0
    for ref in references:
        lcs = lcs_length(candidate, ref)
        if lcs == 0:
            continue
        prec = lcs / len(candidate)
        rec = lcs / len(ref)
        f = (1 + beta * beta) * prec * rec / (rec + beta * beta * prec)
        if f > best:
            best = f
    return best


# -- consensus metric -------------------------------------------------


@dataclass
class RefCorpus:
    """Reference sets keyed by clip id plus per-n document frequencies."""

    refs: dict[str, list[list[str]]]
    doc_freq: list[Counter] = field(default_factory=list)
    log_n_clips: float = 0.0

    @classmethod
    def build(cls, refs: dict[str, list[list[str]]]) -> "RefCorpus":
        if len(refs) < 2:
            raise DomainError("RefCorpus needs at least two clips for document frequencies")
        for cid, rs in refs.items():
            if not rs or any(not r for r in rs):
                raise DomainError(f"RefCorpus: clip {cid} has an empty reference")
        doc_freq = [Counter() for _ in range(N_MAX)]
        for rs in refs.values():
            for n in range(1, N_MAX + 1):
                seen = set()
                for ref in rs:
                    seen.update(ngram_counts(ref, n).keys())
                for g in seen:
                    doc_freq[n - 1][g] += 1
        return cls(refs=dict(refs), doc_freq=doc_freq,
                   log_n_clips=math.log(len(refs)))

    def tfidf(self, tokens: list[str], n: int) -> tuple[dict, float]:
        """Raw-count TF times idf, plus the vector's L2 norm."""
        vec = {}
        for g, c in ngram_counts(tokens, n).items():
            idf = self.log_n_clips - math.log(max(1.0, self.doc_freq[n - 1][g]))
            vec[g] = c * idf
        norm = math.sqrt(sum(v * v for v in vec.values()))
        return vec, norm


def cider_d(candidate: list[str], clip_id: str, corpus: RefCorpus,
            sigma: float = CIDER_SIGMA) -> float:
    """Consensus score of a candidate against one clip's references.

    Per n: clipped-count TF-IDF cosine against each reference with a
    Gaussian penalty on the length difference; references averaged,
    n = 1..4 averaged, then scaled by 10.  An empty candidate scores 0.
    """
    if clip_id not in corpus.refs:
        raise DomainError(f"clip {clip_id!r} not in reference corpus")
    references = corpus.refs[clip_id]
    if not candidate:
        return 0.0
    per_n = [0.0] * N_MAX
    cand_vecs = [corpus.tfidf(candidate, n) for n in range(1, N_MAX + 1)]
    for ref in references:
        delta = float(len(candidate) - len(ref))
        penalty = math.exp(-(delta * delta) / (2.0 * sigma * sigma))
        for n in range(1, N_MAX + 1):
            cvec, cnorm = cand_vecs[n - 1]
            rvec, rnorm = corpus.tfidf(ref, n)
            dot = 0.0
            for g, cv in cvec.items():
                rv = rvec.get(g)
                if rv is not None:
                    dot += min(cv, rv) * rv
            sim = dot / (cnorm * rnorm) if cnorm > 0 and rnorm > 0 else 0.0
            per_n[n - 1] += sim * penalty
    n_refs = len(references)
    return 10.0 * sum(v / n_refs for v in per_n) / N_MAX


# -- split-level evaluation -------------------------------------------


def evaluate_split(candidates: dict[str, list[str]],
                   corpus: RefCorpus) -> dict[str, float]:
    """Aggregate scores over a split; keys are stable metric names.

    BLEU is corpus-pooled; ROUGE-L and the consensus metric are means of
    per-clip scores.  Candidate and corpus clip ids must match exactly.
    """
    if set(candidates) != set(corpus.refs):
        missing = sorted(set(corpus.refs) - set(candidates))
        extra = sorted(set(candidates) - set(corpus.refs))
        raise DomainError(f"candidate/reference clip mismatch; missing={missing} extra={extra}")
    order = sorted(candidates)
    pairs = [(candidates[cid], corpus.refs[cid]) for cid in order]
    bleu_scores = corpus_bleu(pairs)
    rouge_mean = sum(
        rouge_l(candidates[cid], corpus.refs[cid]) if candidates[cid] else 0.0
        for cid in order) / len(order)
    cider_mean = sum(cider_d(candidates[cid], cid, corpus) for cid in order) / len(order)
    out = {f"BLEU@{n}": bleu_scores[n - 1] for n in range(1, N_MAX + 1)}
    out["ROUGE-L"] = rouge_mean
    out["CIDEr-D"] = cider_mean
    return out
