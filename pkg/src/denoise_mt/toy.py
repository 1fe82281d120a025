"""Synthetic languages with known translations.

Every toy language realizes the same stream of concepts: a sparse Markov
chain generates concept sequences and each language has a lexicon mapping
concepts to word strings.  Translation between two toy languages is then a
deterministic word-for-word substitution, so references exist by construction.
Some concepts ("anchors") are spelled identically in every language.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .corpus import MonolingualCorpus, ParallelCorpus

_ONSETS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass(frozen=True)
class ToyWorld:
    n_concepts: int
    n_anchors: int
    successors: tuple[tuple[int, ...], ...]
    probs: tuple[tuple[float, ...], ...]
    min_len: int
    max_len: int
    seed: int

    def sample_concepts(self, rng: np.random.Generator) -> list[int]:
        length = int(rng.integers(self.min_len, self.max_len + 1))
        c = int(rng.integers(self.n_concepts))
        out = [c]
        while len(out) < length:
            nxt = self.successors[c]
            c = int(nxt[rng.choice(len(nxt), p=self.probs[c])])
            out.append(c)
        return out


def make_world(n_concepts: int = 24, n_anchors: int = 12, branching: int = 3, min_len: int = 4,
               max_len: int = 8, seed: int = 0) -> ToyWorld:
    rng = np.random.default_rng([seed, 7])
    succ, probs = [], []
    for c in range(n_concepts):
        options = rng.choice(n_concepts, size=branching, replace=False)
        w = rng.dirichlet(np.ones(branching))
        succ.append(tuple(int(o) for o in options))
        probs.append(tuple(float(x) for x in w))
    return ToyWorld(n_concepts, n_anchors, tuple(succ), tuple(probs), min_len, max_len, seed)


def _syllables() -> list[str]:
    return [o + v for o in _ONSETS for v in _VOWELS]


@dataclass(frozen=True)
class ToyLanguage:
    code: str
    lexicon: tuple[str, ...]

    def realize(self, concepts: list[int]) -> str:
        return " ".join(self.lexicon[c] for c in concepts)


def make_languages(world: ToyWorld, codes: list[str], shared_with: dict[str, tuple[str, float]] | None = None,
                   syllables_per_word: int = 2, seed: int = 0) -> dict[str, ToyLanguage]:
    """Lexicons with pairwise-distinct words except for anchors.

    ``shared_with[b] = (a, f)`` makes language ``b`` reuse language ``a``'s
    word for a fraction ``f`` of the non-anchor concepts.
    """
    rng = np.random.default_rng([seed, 11])
    pool = ["".join(p) for p in itertools.product(_syllables(), repeat=syllables_per_word)]
    order = rng.permutation(len(pool))
    words = iter(pool[i] for i in order)
    anchors = [str(d) for d in range(world.n_anchors)]
    shared_with = shared_with or {}
    langs: dict[str, ToyLanguage] = {}
    for code in codes:
        lex = anchors + [next(words) for _ in range(world.n_concepts - world.n_anchors)]
        if code in shared_with:
            base, frac = shared_with[code]
            content = np.arange(world.n_anchors, world.n_concepts)
            k = int(round(frac * len(content)))
            for c in rng.choice(content, size=k, replace=False):
                lex[int(c)] = langs[base].lexicon[int(c)]
        langs[code] = ToyLanguage(code, tuple(lex))
    return langs


def concept_stream(world: ToyWorld, n: int, seed: int) -> list[list[int]]:
    rng = np.random.default_rng([world.seed, seed, 3])
    return [world.sample_concepts(rng) for _ in range(n)]


def monolingual(lang: ToyLanguage, world: ToyWorld, n_sentences: int, seed: int,
                doc_len: int = 1) -> MonolingualCorpus:
    concepts = concept_stream(world, n_sentences, seed)
    sents = [lang.realize(c) for c in concepts]
    docs = [sents[i:i + doc_len] for i in range(0, len(sents), doc_len)]
    return MonolingualCorpus.from_documents(lang.code, docs)


def parallel(src: ToyLanguage, tgt: ToyLanguage, world: ToyWorld, n_pairs: int, seed: int) -> ParallelCorpus:
    concepts = concept_stream(world, n_pairs, seed)
    return ParallelCorpus(src.code, tgt.code, tuple((src.realize(c), tgt.realize(c)) for c in concepts))


def unique_concepts(world: ToyWorld, n: int, seed: int, exclude: set[tuple[int, ...]] = frozenset(),
                    max_tries: int = 100) -> list[list[int]]:
    """``n`` distinct concept sequences, none of them in ``exclude``."""
    rng = np.random.default_rng([world.seed, seed, 5])
    seen = set(exclude)
    out: list[list[int]] = []
    budget = max_tries * max(n, 1)
    while len(out) < n:
        if budget == 0:
            raise ValueError(f"could not draw {n} distinct sentences; the toy world is too small")
        budget -= 1
        c = world.sample_concepts(rng)
        key = tuple(c)
        if key not in seen:
            seen.add(key)
            out.append(c)
    return out


def parallel_splits(src: ToyLanguage, tgt: ToyLanguage, world: ToyWorld, sizes: dict[str, int],
                    seed: int) -> dict[str, ParallelCorpus]:
    """Parallel splits whose source sentences are pairwise disjoint across splits."""
    concepts = unique_concepts(world, sum(sizes.values()), seed)
    out, start = {}, 0
    for name, n in sizes.items():
        part = concepts[start:start + n]
        start += n
        out[name] = ParallelCorpus(src.code, tgt.code, tuple((src.realize(c), tgt.realize(c)) for c in part))
    return out
