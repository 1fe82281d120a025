"""Monolingual / parallel corpora and language rebalancing.

Corpus files hold one sentence per line; a blank line closes a document.
A collection manifest lists ``<lang>\\t<path>`` pairs, one per line.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

_LANG_RE = re.compile(r"^[a-z0-9_]+$")


class CorpusError(ValueError):
    """Raised for malformed or empty corpus inputs."""


def check_lang(code: str) -> str:
    if not isinstance(code, str) or not _LANG_RE.match(code):
        raise CorpusError(f"invalid language code {code!r}: expected nonempty lowercase ASCII")
    return code


@dataclass(frozen=True)
class MonolingualCorpus:
    lang: str
    documents: tuple[tuple[str, ...], ...]
    token_count: int = 0

    def __post_init__(self):
        check_lang(self.lang)
        for doc in self.documents:
            if not doc:
                raise CorpusError(f"{self.lang}: empty document")
            for sent in doc:
                if not sent.strip():
                    raise CorpusError(f"{self.lang}: blank sentence inside a document")
        if self.token_count < 0:
            raise CorpusError("token_count must be nonnegative")

    @classmethod
    def from_documents(cls, lang: str, documents: Iterable[Sequence[str]]) -> "MonolingualCorpus":
        return cls(lang, tuple(tuple(d) for d in documents))

    def sentences(self) -> list[str]:
        return [s for doc in self.documents for s in doc]

    @property
    def num_sentences(self) -> int:
        return sum(len(d) for d in self.documents)

    def with_token_count(self, encode: Callable[[str], Sequence[int]]) -> "MonolingualCorpus":
        """Return a copy whose ``token_count`` is the encoded length of all sentences."""
        total = sum(len(encode(s)) for s in self.sentences())
        return replace(self, token_count=total)


@dataclass(frozen=True)
class CorpusCollection:
    corpora: Mapping[str, MonolingualCorpus]

    def __post_init__(self):
        if not self.corpora:
            raise CorpusError("a collection needs at least one language")
        for code, corpus in self.corpora.items():
            if corpus.lang != code:
                raise CorpusError(f"corpus keyed {code!r} holds language {corpus.lang!r}")

    @classmethod
    def of(cls, corpora: Iterable[MonolingualCorpus]) -> "CorpusCollection":
        out: dict[str, MonolingualCorpus] = {}
        for c in corpora:
            if c.lang in out:
                raise CorpusError(f"duplicate language {c.lang!r}")
            out[c.lang] = c
        return cls(dict(sorted(out.items())))

    @property
    def K(self) -> int:
        return len(self.corpora)

    @property
    def languages(self) -> list[str]:
        return sorted(self.corpora)

    def with_token_counts(self, encode: Callable[[str], Sequence[int]]) -> "CorpusCollection":
        return CorpusCollection({k: c.with_token_count(encode) for k, c in self.corpora.items()})

    def proportions(self) -> dict[str, float]:
        total = sum(c.token_count for c in self.corpora.values())
        if total <= 0:
            raise CorpusError("collection has no counted tokens; call with_token_counts first")
        return {k: c.token_count / total for k, c in self.corpora.items()}


@dataclass(frozen=True)
class SamplingWeights:
    alpha: float
    lambdas: dict[str, float]
    effective_probs: dict[str, float]

    @property
    def languages(self) -> list[str]:
        return list(self.effective_probs)


@dataclass(frozen=True)
class ParallelCorpus:
    source_lang: str
    target_lang: str
    pairs: tuple[tuple[str, str], ...]
    provenance: str = "authentic"

    def __post_init__(self):
        check_lang(self.source_lang)
        check_lang(self.target_lang)
        if not self.pairs:
            raise CorpusError(f"{self.source_lang}-{self.target_lang}: parallel corpus has no pairs")
        for src, tgt in self.pairs:
            if not src.strip() or not tgt.strip():
                raise CorpusError(f"{self.source_lang}-{self.target_lang}: empty side in pair {(src, tgt)!r}")

    def __len__(self) -> int:
        return len(self.pairs)

    def sources(self) -> list[str]:
        return [s for s, _ in self.pairs]

    def targets(self) -> list[str]:
        return [t for _, t in self.pairs]

    def subset(self, n: int) -> "ParallelCorpus":
        return replace(self, pairs=self.pairs[:n])

    def reversed(self) -> "ParallelCorpus":
        return ParallelCorpus(self.target_lang, self.source_lang,
                              tuple((t, s) for s, t in self.pairs), self.provenance)


def parse_documents(text: str) -> list[list[str]]:
    docs: list[list[str]] = []
    current: list[str] = []
    for line in text.splitlines():
        if line.strip():
            current.append(line.rstrip("\r"))
        elif current:
            docs.append(current)
            current = []
    if current:
        docs.append(current)
    return docs


def load_monolingual(path: str | Path, lang: str) -> MonolingualCorpus:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc}") from exc
    docs = parse_documents(text)
    if not docs:
        raise CorpusError(f"{path}: corpus for {lang!r} contains no sentences")
    return MonolingualCorpus.from_documents(lang, docs)


def write_monolingual(corpus: MonolingualCorpus, path: str | Path) -> None:
    text = "\n\n".join("\n".join(doc) for doc in corpus.documents)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_manifest(path: str | Path) -> CorpusCollection:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CorpusError(f"cannot read manifest {path}: {exc}") from exc
    corpora = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise CorpusError(f"{path}:{lineno}: expected '<lang>\\t<path>'")
        lang, rel = parts[0].strip(), parts[1].strip()
        corpus_path = Path(rel) if Path(rel).is_absolute() else path.parent / rel
        corpora.append(load_monolingual(corpus_path, check_lang(lang)))
    return CorpusCollection.of(corpora)


def load_parallel(path: str | Path, source_lang: str, target_lang: str) -> ParallelCorpus:
    """Read a ``source\\ttarget`` TSV file."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CorpusError(f"cannot read parallel corpus {path}: {exc}") from exc
    pairs = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise CorpusError(f"{path}:{lineno}: expected exactly one tab")
        pairs.append((parts[0], parts[1]))
    return ParallelCorpus(source_lang, target_lang, tuple(pairs))


def write_parallel(corpus: ParallelCorpus, path: str | Path) -> None:
    Path(path).write_text("".join(f"{s}\t{t}\n" for s, t in corpus.pairs), encoding="utf-8")


def rebalance(collection: CorpusCollection, alpha: float) -> SamplingWeights:
    """Up/down-sampling ratios that smooth language proportions with exponent ``alpha``.

    lambda_i = (1 / p_i) * p_i**alpha / sum_j p_j**alpha, so the effective sampling
    probability lambda_i * p_i equals p_i**alpha / sum_j p_j**alpha.
    """
    if not 0.0 < alpha <= 1.0:
        raise CorpusError(f"alpha must lie in (0, 1], got {alpha}")
    for code, corpus in collection.corpora.items():
        if corpus.token_count <= 0:
            raise CorpusError(f"language {code!r} has zero tokens")
    p = collection.proportions()
    langs = list(p)
    if alpha == 1.0:
        return SamplingWeights(alpha, {k: 1.0 for k in langs}, dict(p))
    smoothed = {k: p[k] ** alpha for k in langs}
    z = sum(smoothed.values())
    q = {k: smoothed[k] / z for k in langs}
    lambdas = {k: q[k] / p[k] for k in langs}
    return SamplingWeights(alpha, lambdas, q)


def sample_language(weights: SamplingWeights, rng: np.random.Generator) -> str:
    langs = weights.languages
    if len(langs) == 1:
        return langs[0]
    cdf = np.cumsum([weights.effective_probs[k] for k in langs])
    i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return langs[min(i, len(langs) - 1)]


def sample_languages(weights: SamplingWeights, rng: np.random.Generator, n: int) -> list[str]:
    langs = weights.languages
    cdf = np.cumsum([weights.effective_probs[k] for k in langs])
    idx = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
    return [langs[min(int(i), len(langs) - 1)] for i in idx]
