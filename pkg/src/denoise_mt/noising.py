"""Instance packing and the noise function (sentence permutation + span infilling).

An instance is a run of consecutive sentences from one document, each
terminated by ``</S>``, closed by the language-id token.  A noised example is
the triple (noised source, decoder input, target) where the decoder input is
the target shifted right by one position behind the language id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

from .corpus import MonolingualCorpus
from .tokenizer import Vocabulary


@dataclass(frozen=True)
class NoiseConfig:
    mask_ratio: float = 0.35
    span_lambda: float = 3.5
    permute_sentences: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if self.span_lambda <= 0:
            raise ValueError(f"span_lambda must be positive, got {self.span_lambda}")


@dataclass(frozen=True)
class Instance:
    lang: str
    lid: int
    sentences: tuple[tuple[int, ...], ...]

    @property
    def total_len(self) -> int:
        return sum(len(s) for s in self.sentences) + 1

    def body(self) -> list[int]:
        return [t for s in self.sentences for t in s]

    def tokens(self) -> list[int]:
        return self.body() + [self.lid]


@dataclass(frozen=True)
class NoisedExample:
    lang: str
    source: tuple[int, ...]
    decoder_input: tuple[int, ...]
    target: tuple[int, ...]


@dataclass
class PackStats:
    instances: int = 0
    sentences: int = 0
    truncated: int = 0


@dataclass
class MaskStats:
    """Running totals filled in by :func:`mask_spans` when passed in."""

    span_lengths: list[int] = field(default_factory=list)
    words: int = 0
    masked_words: int = 0
    insertions: int = 0

    @property
    def masked_fraction(self) -> float:
        return self.masked_words / self.words if self.words else 0.0


def encode_sentence(vocab: Vocabulary, text: str, max_len: int, stats: PackStats | None = None) -> tuple[int, ...]:
    ids = vocab.encode(text)
    if len(ids) + 2 > max_len:
        ids = ids[:max_len - 2]
        if stats is not None:
            stats.truncated += 1
    return tuple(ids) + (vocab.eos,)


def pack_document(sentences: Sequence[tuple[int, ...]], lang: str, lid: int, max_len: int) -> Iterator[Instance]:
    """Greedy packing of already-encoded (``</S>``-terminated) sentences."""
    current: list[tuple[int, ...]] = []
    length = 0
    for sent in sentences:
        if current and length + len(sent) + 1 > max_len:
            yield Instance(lang, lid, tuple(current))
            current, length = [], 0
        current.append(sent)
        length += len(sent)
    if current:
        yield Instance(lang, lid, tuple(current))


def pack(corpus: MonolingualCorpus, vocab: Vocabulary, max_len: int = 512, lid: int | None = None,
         stats: PackStats | None = None) -> Iterator[Instance]:
    """Pack consecutive sentences of each document into instances of at most ``max_len`` tokens.

    Sentences longer than ``max_len - 2`` are cut so that the sentence, its
    ``</S>`` and the language id still fit; ``stats.truncated`` counts them.
    """
    if max_len < 3:
        raise ValueError("max_len must leave room for a token, </S> and the language id")
    if lid is None:
        lid = vocab.lid(corpus.lang)
    for doc in corpus.documents:
        encoded = [encode_sentence(vocab, s, max_len, stats) for s in doc]
        for inst in pack_document(encoded, corpus.lang, lid, max_len):
            if stats is not None:
                stats.instances += 1
                stats.sentences += len(inst.sentences)
            yield inst


def permute_sentences(inst: Instance, rng: np.random.Generator) -> Instance:
    if len(inst.sentences) < 2:
        return inst
    order = rng.permutation(len(inst.sentences))
    return Instance(inst.lang, inst.lid, tuple(inst.sentences[i] for i in order))


def _segment_words(tokens: Sequence[int], vocab: Vocabulary) -> tuple[list[int], list[int]]:
    """Per-token word index (-1 for protected specials) and per-word sentence index."""
    word_of = [-1] * len(tokens)
    word_sent: list[int] = []
    sent = 0
    prev_raw = False
    for i, tok in enumerate(tokens):
        if vocab.special_mask[tok]:
            prev_raw = False
            sent += 1
            continue
        if vocab.word_start[tok] or not prev_raw:
            word_sent.append(sent)
        word_of[i] = len(word_sent) - 1
        prev_raw = True
    return word_of, word_sent


def mask_spans(tokens: Sequence[int], vocab: Vocabulary, cfg: NoiseConfig, rng: np.random.Generator,
               stats: MaskStats | None = None) -> list[int]:
    """Replace Poisson-length word spans by a single ``<mask>`` each.

    The masking quota is ``ceil(mask_ratio * words)``.  A span never crosses a
    special token (``</S>``, language ids); its sampled length is clipped to
    the remaining quota and to the unmasked run available from its start.  A
    zero-length draw inserts a ``<mask>`` before the chosen word and consumes
    nothing.
    """
    word_of, word_sent = _segment_words(tokens, vocab)
    n_words = len(word_sent)
    if stats is not None:
        stats.words += n_words
    if cfg.mask_ratio == 0.0 or n_words == 0:
        return list(tokens)

    budget = math.ceil(round(cfg.mask_ratio * n_words, 9))
    span_of = np.full(n_words, -1, dtype=np.int64)
    inserts = np.zeros(n_words, dtype=np.int64)
    consumed = 0
    n_spans = 0
    while consumed < budget:
        length = int(rng.poisson(cfg.span_lambda))
        if stats is not None:
            stats.span_lengths.append(length)
        free = np.flatnonzero(span_of < 0)
        start = int(free[rng.integers(len(free))])
        if length == 0:
            inserts[start] += 1
            if stats is not None:
                stats.insertions += 1
            continue
        length = min(length, budget - consumed)
        end = start
        while (end < n_words and end - start < length and span_of[end] < 0
               and word_sent[end] == word_sent[start]):
            span_of[end] = n_spans
            end += 1
        consumed += end - start
        n_spans += 1
    if stats is not None:
        stats.masked_words += consumed

    out: list[int] = []
    last_word = -1
    for tok, w in zip(tokens, word_of):
        if w < 0:
            out.append(tok)
            continue
        if w != last_word:
            out.extend([vocab.mask] * int(inserts[w]))
            if span_of[w] >= 0 and (w == 0 or span_of[w - 1] != span_of[w]):
                out.append(vocab.mask)
            last_word = w
        if span_of[w] < 0:
            out.append(tok)
    return out


def make_example(inst: Instance, vocab: Vocabulary, cfg: NoiseConfig, rng: np.random.Generator,
                 stats: MaskStats | None = None) -> NoisedExample:
    """Permute, then mask, to build the source; target is the untouched instance."""
    target = inst.tokens()
    noised = permute_sentences(inst, rng) if cfg.permute_sentences else inst
    source = mask_spans(noised.body(), vocab, cfg, rng, stats) + [inst.lid]
    decoder_input = [inst.lid] + target[:-1]
    return NoisedExample(inst.lang, tuple(source), tuple(decoder_input), tuple(target))


def example_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per (global seed, instance index) for reproducible parallel noising."""
    return np.random.default_rng([seed, index])


def noised_stream(instances: Sequence[Instance], vocab: Vocabulary, cfg: NoiseConfig) -> Iterator[NoisedExample]:
    for i, inst in enumerate(instances):
        yield make_example(inst, vocab, cfg, example_rng(cfg.seed, i))


def dump_examples(examples: Iterable[NoisedExample], vocab: Vocabulary, out: IO[str]) -> None:
    for ex in examples:
        out.write("\t".join(vocab.decode(x) for x in (ex.source, ex.decoder_input, ex.target)) + "\n")
