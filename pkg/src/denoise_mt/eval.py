"""Sentence-, corpus- and document-level BLEU."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Sequence

MAX_ORDER = 4


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class TokenizerHook:
    """Pre-tokenizer applied to hypotheses and references before n-gram matching."""

    name: str
    function: Callable[[str], list[str]]

    def __call__(self, text: str) -> list[str]:
        return [t for t in self.function(text) if t]


WHITESPACE = TokenizerHook("whitespace", lambda s: s.strip().split())


@dataclass(frozen=True)
class BleuReport:
    score: float
    brevity_penalty: float
    precisions: tuple[float, ...]
    hyp_len: int
    ref_len: int
    granularity: str
    matches: tuple[int, ...] = ()
    totals: tuple[int, ...] = ()

    def as_record(self) -> str:
        p = " ".join(f"p{i + 1}={v:.6f}" for i, v in enumerate(self.precisions))
        return (f"score={self.score:.6f} bp={self.brevity_penalty:.6f} {p} "
                f"hyp_len={self.hyp_len} ref_len={self.ref_len} granularity={self.granularity}")

    @staticmethod
    def tsv_header() -> str:
        return "\t".join(["score", "bp", "p1", "p2", "p3", "p4", "hyp_len", "ref_len", "granularity"])

    def as_tsv(self) -> str:
        vals = [f"{self.score:.6f}", f"{self.brevity_penalty:.6f}",
                *(f"{p:.6f}" for p in self.precisions),
                str(self.hyp_len), str(self.ref_len), self.granularity]
        return "\t".join(vals)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _stats(hyp: list[str], ref: list[str]) -> tuple[list[int], list[int]]:
    matches, totals = [], []
    for n in range(1, MAX_ORDER + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        matches.append(sum(min(c, r[g]) for g, c in h.items()))
        totals.append(max(len(hyp) - n + 1, 0))
    return matches, totals


def bleu_from_stats(matches: Sequence[int], totals: Sequence[int], hyp_len: int, ref_len: int,
                    granularity: str = "corpus", smooth: bool = False) -> BleuReport:
    """Combine clipped n-gram statistics into a score.

    Orders for which the hypothesis side has no n-grams at all are left out of
    the geometric mean (effective order), so a corpus of short sentences that
    matches its references exactly still scores 100.
    """
    precisions = []
    log_sum = 0.0
    order = 0
    zero = False
    for n in range(MAX_ORDER):
        m, t = matches[n], totals[n]
        if smooth and n > 0:
            m, t = m + 1, t + 1
        if t == 0:
            precisions.append(0.0)
            continue
        p = m / t
        precisions.append(p)
        order += 1
        if p == 0.0:
            zero = True
        else:
            log_sum += math.log(p)
    if hyp_len == 0:
        bp = 0.0
    elif hyp_len < ref_len:
        bp = math.exp(1.0 - ref_len / hyp_len)
    else:
        bp = 1.0
    if zero or order == 0 or bp == 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(log_sum / order)
    return BleuReport(min(score, 100.0), bp, tuple(precisions), hyp_len, ref_len, granularity,
                      tuple(matches), tuple(totals))


def corpus_bleu(hyps: Sequence[str], refs: Sequence[str], hook: TokenizerHook = WHITESPACE,
                smooth: bool = False, granularity: str = "corpus") -> BleuReport:
    if len(hyps) != len(refs):
        raise EvalError(f"{len(hyps)} hypotheses for {len(refs)} references")
    if not refs:
        raise EvalError("no references")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hyps, refs):
        h, r = hook(hyp), hook(ref)
        m, t = _stats(h, r)
        for n in range(MAX_ORDER):
            matches[n] += m[n]
            totals[n] += t[n]
        hyp_len += len(h)
        ref_len += len(r)
    return bleu_from_stats(matches, totals, hyp_len, ref_len, granularity, smooth)


def sentence_bleu(hyp: str, ref: str, hook: TokenizerHook = WHITESPACE, smooth: bool = False) -> BleuReport:
    return corpus_bleu([hyp], [ref], hook, smooth, granularity="sentence")


def doc_bleu(hyp_docs: Sequence[Sequence[str]], ref_docs: Sequence[Sequence[str]],
             hook: TokenizerHook = WHITESPACE, smooth: bool = False) -> BleuReport:
    """d-BLEU: each document is joined with single spaces and matched as one segment."""
    if len(hyp_docs) != len(ref_docs):
        raise EvalError(f"{len(hyp_docs)} hypothesis documents for {len(ref_docs)} reference documents")
    return corpus_bleu([" ".join(d) for d in hyp_docs], [" ".join(d) for d in ref_docs],
                       hook, smooth, granularity="document")


@dataclass(frozen=True)
class AlignmentCheck:
    aligned: bool
    hyp_count: int
    ref_count: int

    def __bool__(self) -> bool:
        return self.aligned


def sentence_alignment_check(hyp_sentences: Sequence[str], ref_sentences: Sequence[str]) -> AlignmentCheck:
    n_h, n_r = len(hyp_sentences), len(ref_sentences)
    return AlignmentCheck(n_h > 0 and n_h == n_r, n_h, n_r)


@dataclass(frozen=True)
class DocumentReport:
    d_bleu: BleuReport
    s_bleu: BleuReport | None
    misaligned_docs: int


def document_report(hyp_docs: Sequence[Sequence[str]], ref_docs: Sequence[Sequence[str]],
                    hook: TokenizerHook = WHITESPACE) -> DocumentReport:
    """d-BLEU always; s-BLEU only when every document's sentences align one-to-one."""
    d = doc_bleu(hyp_docs, ref_docs, hook)
    checks = [sentence_alignment_check(h, r) for h, r in zip(hyp_docs, ref_docs)]
    bad = sum(not c for c in checks)
    s = None
    if bad == 0:
        s = corpus_bleu([x for doc in hyp_docs for x in doc], [x for doc in ref_docs for x in doc], hook)
    return DocumentReport(d, s, bad)


def exact_match(hyps: Sequence[str], refs: Sequence[str]) -> float:
    if len(hyps) != len(refs):
        raise EvalError(f"{len(hyps)} hypotheses for {len(refs)} references")
    if not refs:
        return 0.0
    return sum(h.split() == r.split() for h, r in zip(hyps, refs)) / len(refs)
