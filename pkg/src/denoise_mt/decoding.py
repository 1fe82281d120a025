"""Greedy and beam-search decoding, constrained output vocabularies, document decoding."""

from __future__ import annotations

from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch

from .corpus import MonolingualCorpus
from .model import Seq2SeqModel
from .tokenizer import Vocabulary


@dataclass(frozen=True)
class BeamConfig:
    stop_token: int
    beam_size: int = 5
    max_len: int = 64
    length_penalty: float = 1.0
    allowed: np.ndarray | None = None
    start_token: int | None = None

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.allowed is not None:
            allowed = np.array(self.allowed, dtype=bool)
            allowed[self.stop_token] = True
            object.__setattr__(self, "allowed", allowed)

    @property
    def start(self) -> int:
        return self.stop_token if self.start_token is None else self.start_token


@dataclass(frozen=True)
class Hypothesis:
    ids: tuple[int, ...]
    score: float
    finished: bool
    truncated: bool = False

    def normalized(self, length_penalty: float) -> float:
        return self.score / max(len(self.ids), 1) ** length_penalty


@dataclass(frozen=True)
class BeamResult:
    best: Hypothesis
    beam: tuple[Hypothesis, ...]

    @property
    def truncated(self) -> bool:
        return self.best.truncated


@contextmanager
def inference(model: Seq2SeqModel):
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            yield
    finally:
        model.train(was_training)


def _source_tensor(source: Sequence[int]) -> tuple[torch.Tensor, torch.Tensor]:
    if len(source) == 0:
        raise ValueError("empty source")
    src = torch.as_tensor([list(source)], dtype=torch.long)
    return src, torch.zeros_like(src, dtype=torch.bool)


def _step_logprobs(model, memory, src_pad, prefixes: torch.Tensor, allowed_t) -> np.ndarray:
    logits = model.decode(memory, src_pad, prefixes)[:, -1].double()
    if allowed_t is not None:
        logits = logits.masked_fill(~allowed_t, float("-inf"))
    return torch.log_softmax(logits, dim=-1).numpy()


def _allowed_tensor(cfg: BeamConfig):
    return None if cfg.allowed is None else torch.as_tensor(cfg.allowed)


def beam_search(model: Seq2SeqModel, source: Sequence[int], cfg: BeamConfig) -> BeamResult:
    """Beam search over allowed tokens.

    Each step keeps the ``beam_size - len(finished)`` best expansions by raw
    log-probability; equal scores prefer the lexicographically smaller id
    sequence.  Finished hypotheses are ranked by ``score / len**length_penalty``.
    With ``beam_size == 1`` this is exactly greedy decoding.
    """
    allowed_t = _allowed_tensor(cfg)
    with inference(model):
        src, src_pad = _source_tensor(source)
        memory = model.encode(src, src_pad)
        active: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
        finished: list[Hypothesis] = []
        for step in range(cfg.max_len):
            k = cfg.beam_size - len(finished)
            if k <= 0 or not active:
                break
            prefixes = torch.as_tensor([[cfg.start, *ids] for ids, _ in active], dtype=torch.long)
            n = len(active)
            lp = _step_logprobs(model, memory.expand(n, -1, -1), src_pad.expand(n, -1), prefixes, allowed_t)
            total = np.array([s for _, s in active])[:, None] + lp
            lex_rank = np.empty(n, dtype=np.int64)
            lex_rank[sorted(range(n), key=lambda a: active[a][0])] = np.arange(n)
            a_idx, v_idx = np.nonzero(np.isfinite(total))
            scores = total[a_idx, v_idx]
            order = np.lexsort((v_idx, lex_rank[a_idx], -scores))[:k]
            next_active = []
            for j in order:
                a, v = int(a_idx[j]), int(v_idx[j])
                ids = active[a][0] + (v,)
                score = float(scores[j])
                if v == cfg.stop_token:
                    finished.append(Hypothesis(ids, score, True))
                elif len(ids) == cfg.max_len:
                    finished.append(Hypothesis(ids, score, True, truncated=True))
                else:
                    next_active.append((ids, score))
            active = next_active
    pool = finished or [Hypothesis(ids, s, False, truncated=True) for ids, s in active]
    ranked = sorted(pool, key=lambda h: (h.truncated, -h.normalized(cfg.length_penalty), h.ids))
    return BeamResult(ranked[0], tuple(ranked))


def greedy(model: Seq2SeqModel, source: Sequence[int], cfg: BeamConfig) -> Hypothesis:
    allowed_t = _allowed_tensor(cfg)
    with inference(model):
        src, src_pad = _source_tensor(source)
        memory = model.encode(src, src_pad)
        ids: list[int] = []
        score = 0.0
        while True:
            prefix = torch.as_tensor([[cfg.start, *ids]], dtype=torch.long)
            lp = _step_logprobs(model, memory, src_pad, prefix, allowed_t)[0]
            v = int(np.argmax(lp))
            ids.append(v)
            score += float(lp[v])
            if v == cfg.stop_token:
                return Hypothesis(tuple(ids), score, True)
            if len(ids) == cfg.max_len:
                return Hypothesis(tuple(ids), score, True, truncated=True)


def greedy_batch(model: Seq2SeqModel, sources: Sequence[Sequence[int]], start_tokens: Sequence[int],
                 stop_token: int, max_len: int, allowed: np.ndarray | None = None,
                 pad: int = 0) -> list[list[int]]:
    """Batched greedy decoding; returns emitted ids without the stop token."""
    n = len(sources)
    if n == 0:
        return []
    allowed_t = None
    if allowed is not None:
        allowed = np.array(allowed, dtype=bool)
        allowed[stop_token] = True
        allowed_t = torch.as_tensor(allowed)
    with inference(model):
        width = max(len(s) for s in sources)
        src = torch.full((n, width), pad, dtype=torch.long)
        src_pad = torch.ones((n, width), dtype=torch.bool)
        for i, s in enumerate(sources):
            src[i, :len(s)] = torch.as_tensor(list(s))
            src_pad[i, :len(s)] = False
        memory = model.encode(src, src_pad)
        prefix = torch.as_tensor(list(start_tokens), dtype=torch.long)[:, None]
        done = torch.zeros(n, dtype=torch.bool)
        outputs: list[list[int]] = [[] for _ in range(n)]
        for _ in range(max_len):
            logits = model.decode(memory, src_pad, prefix)[:, -1]
            if allowed_t is not None:
                logits = logits.masked_fill(~allowed_t, float("-inf"))
            nxt = logits.argmax(-1)
            for i in np.flatnonzero(~done.numpy()):
                tok = int(nxt[i])
                if tok == stop_token:
                    done[i] = True
                else:
                    outputs[i].append(tok)
            if bool(done.all()):
                break
            prefix = torch.cat([prefix, nxt[:, None]], dim=1)
    return outputs


def teacher_forced_score(model: Seq2SeqModel, source: Sequence[int], ids: Sequence[int], cfg: BeamConfig) -> float:
    """Sum of per-step log-probabilities of ``ids`` under the same output constraint."""
    allowed_t = _allowed_tensor(cfg)
    with inference(model):
        src, src_pad = _source_tensor(source)
        memory = model.encode(src, src_pad)
        dec_in = torch.as_tensor([[cfg.start, *ids[:-1]]], dtype=torch.long)
        logits = model.decode(memory, src_pad, dec_in)[0].double()
        if allowed_t is not None:
            logits = logits.masked_fill(~allowed_t, float("-inf"))
        lp = torch.log_softmax(logits, dim=-1)
        return float(lp[torch.arange(len(ids)), torch.as_tensor(list(ids))].sum())


def build_allowed_mask(corpus: MonolingualCorpus, vocab: Vocabulary, threshold: float = 0.01,
                       mode: str = "relative") -> np.ndarray:
    """Tokens a decoder may emit when generating ``corpus``'s language.

    ``relative``: a token's share of all encoded corpus tokens must reach
    ``threshold``; ``absolute``: its raw occurrence count must.  Tokens that
    never occur are always excluded; special tokens are always allowed.
    """
    counts: Counter[int] = Counter()
    for sent in corpus.sentences():
        counts.update(vocab.encode(sent))
    if not counts:
        raise ValueError("corpus encodes to no tokens")
    total = sum(counts.values())
    allowed = np.zeros(vocab.size, dtype=bool)
    for tok, c in counts.items():
        if mode == "relative":
            ok = c / total >= threshold
        elif mode == "absolute":
            ok = c >= threshold
        else:
            raise ValueError(f"unknown frequency mode {mode!r}")
        allowed[tok] = ok and c > 0
    allowed[vocab.special_mask] = True
    return allowed


# sentence and document translation -------------------------------------------

def format_source(vocab: Vocabulary, text: str | Sequence[str], lang: str, max_len: int | None = None) -> list[int]:
    """Sentence(s) + ``</S>`` after each, closed by the source language id."""
    sentences = [text] if isinstance(text, str) else list(text)
    ids: list[int] = []
    for s in sentences:
        ids += vocab.encode(s) + [vocab.eos]
    if max_len is not None and len(ids) + 1 > max_len:
        ids = ids[:max_len - 2] + [vocab.eos]
    return ids + [vocab.lid(lang)]


def strip_output(ids: Sequence[int], vocab: Vocabulary, stop_token: int) -> list[int]:
    out = list(ids)
    if out and out[-1] == stop_token:
        out.pop()
    while out and out[-1] == vocab.eos:
        out.pop()
    return out


def split_sentences(ids: Sequence[int], eos: int) -> tuple[list[list[int]], list[int]]:
    sentences, current = [], []
    for t in ids:
        if t == eos:
            sentences.append(current)
            current = []
        else:
            current.append(t)
    return sentences, current


@dataclass(frozen=True)
class DocumentTranslation:
    sentences: tuple[tuple[int, ...], ...]
    trailing: tuple[int, ...]
    truncated: bool
    eos_count: int


def decode_document(model: Seq2SeqModel, source: Sequence[int], cfg: BeamConfig, eos: int) -> DocumentTranslation:
    """Generate until ``cfg.stop_token`` (the target language id) and split at ``</S>``.

    Tokens after the last ``</S>`` are returned in ``trailing`` rather than
    counted as a sentence.
    """
    result = beam_search(model, source, cfg)
    ids = list(result.best.ids)
    if ids and ids[-1] == cfg.stop_token:
        ids.pop()
    sentences, trailing = split_sentences(ids, eos)
    return DocumentTranslation(tuple(tuple(s) for s in sentences), tuple(trailing),
                               result.best.truncated, ids.count(eos))


def translate(model: Seq2SeqModel, vocab: Vocabulary, sentences: Iterable[str], src_lang: str, tgt_lang: str,
              beam_size: int = 5, max_len: int = 64, allowed: np.ndarray | None = None,
              length_penalty: float = 1.0) -> list[str]:
    tgt_lid = vocab.lid(tgt_lang)
    sources = [format_source(vocab, s, src_lang, model.config.max_positions) for s in sentences]
    max_len = min(max_len, model.config.max_positions)
    if beam_size == 1:
        outs = greedy_batch(model, sources, [tgt_lid] * len(sources), tgt_lid, max_len, allowed, vocab.pad)
    else:
        cfg = BeamConfig(tgt_lid, beam_size, max_len, length_penalty, allowed)
        outs = [list(beam_search(model, s, cfg).best.ids) for s in sources]
    return [vocab.decode(strip_output(o, vocab, tgt_lid)) for o in outs]


def translate_documents(model: Seq2SeqModel, vocab: Vocabulary, documents: Iterable[Sequence[str]],
                        src_lang: str, tgt_lang: str, beam_size: int = 5,
                        max_len: int = 128) -> list[DocumentTranslation]:
    tgt_lid = vocab.lid(tgt_lang)
    cfg = BeamConfig(tgt_lid, beam_size, min(max_len, model.config.max_positions))
    return [decode_document(model, format_source(vocab, doc, src_lang, model.config.max_positions), cfg, vocab.eos)
            for doc in documents]
