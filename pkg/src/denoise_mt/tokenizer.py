"""Shared byte-level BPE vocabulary with special and language-id tokens.

Text is turned into UTF-8 bytes; every ASCII space becomes the visible word
marker ``MARK`` and one marker is prepended to the string, so each pre-token
starts with ``MARK`` and word boundaries survive encoding.  Bytes are carried
as ``chr(byte)`` so a subword is an ordinary ``str``.
"""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import CorpusCollection, check_lang

MARK = "▁"
FORMAT_TAG = "#denoise_mt-vocab v1"

PAD, UNK, MASK, EOS, BOS = 0, 1, 2, 3, 4
_SPECIAL_NAMES = ("<pad>", "<unk>", "<mask>", "</S>", "<s>")
SPARE_PREFIX = "__spare"


class VocabError(ValueError):
    pass


def lid_sentinel(lang: str) -> str:
    return f"[{lang}_XX]"


@dataclass(frozen=True)
class SpecialTokens:
    pad: int
    unk: int
    mask: int
    eos: int
    bos: int
    lid: dict[str, int]

    def all_ids(self) -> list[int]:
        return [self.pad, self.unk, self.mask, self.eos, self.bos, *self.lid.values()]


def _to_symbols(text: str) -> str:
    raw = text.encode("utf-8")
    return MARK + "".join(MARK if b == 0x20 else chr(b) for b in raw)


def pre_tokenize(text: str) -> list[str]:
    """Split text into marker-initial chunks; BPE merges never cross chunks."""
    if not text:
        return []
    chunks: list[str] = []
    for ch in _to_symbols(text):
        if ch == MARK:
            chunks.append(ch)
        else:
            chunks[-1] += ch
    return chunks


def _symbols_to_bytes(piece: str) -> bytes:
    return bytes(0x20 if c == MARK else ord(c) for c in piece)


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    merges: tuple[tuple[str, str], ...]
    specials: SpecialTokens
    alphabet: tuple[str, ...]
    seed: int = 0
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        index = {}
        for i, tok in enumerate(self.tokens):
            if tok in index:
                raise VocabError(f"duplicate token {tok!r}")
            index[tok] = i
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "_ranks", {m: r for r, m in enumerate(self.merges)})
        n_special = len(self.specials.all_ids())
        raw_start = np.zeros(len(self.tokens), dtype=bool)
        special = np.zeros(len(self.tokens), dtype=bool)
        special[:n_special] = True
        for i in range(n_special, len(self.tokens)):
            raw_start[i] = self.tokens[i].startswith(MARK)
        object.__setattr__(self, "word_start", raw_start)
        object.__setattr__(self, "special_mask", special)
        object.__setattr__(self, "_lid_lang", {v: k for k, v in self.specials.lid.items()})

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad(self) -> int:
        return self.specials.pad

    @property
    def eos(self) -> int:
        return self.specials.eos

    @property
    def mask(self) -> int:
        return self.specials.mask

    @property
    def languages(self) -> list[str]:
        return [k for k in self.specials.lid if not k.startswith(SPARE_PREFIX)]

    def lid(self, lang: str) -> int:
        try:
            return self.specials.lid[lang]
        except KeyError:
            raise VocabError(f"no language id token for {lang!r}") from None

    def has_lid(self, lang: str) -> bool:
        return lang in self.specials.lid

    def lid_ids(self) -> list[int]:
        return list(self.specials.lid.values())

    def is_special(self, token_id: int) -> bool:
        return bool(self.special_mask[token_id])

    def token_id(self, token: str) -> int:
        return self._index[token]

    def with_language(self, lang: str) -> "Vocabulary":
        """Bind ``lang`` to the first free spare language-id slot."""
        check_lang(lang)
        if lang in self.specials.lid:
            return self
        for name, idx in self.specials.lid.items():
            if name.startswith(SPARE_PREFIX):
                lid = {(lang if k == name else k): v for k, v in self.specials.lid.items()}
                specials = replace(self.specials, lid=lid)
                return replace(self, specials=specials, _cache={})
        raise VocabError(f"no spare language-id slot left for {lang!r}")

    # encoding -----------------------------------------------------------

    def _bpe(self, chunk: str) -> tuple[int, ...]:
        hit = self._cache.get(chunk)
        if hit is not None:
            return hit
        known = set(self.alphabet)
        # unknown symbols are barriers and map to <unk>
        segments: list[list[str]] = [[]]
        for ch in chunk:
            if ch in known:
                segments[-1].append(ch)
            else:
                segments.append([ch])
                segments.append([])
        ids: list[int] = []
        for seg in segments:
            if len(seg) == 1 and seg[0] not in known:
                ids.append(self.specials.unk)
                continue
            ids.extend(self._index[p] for p in self._merge_segment(seg))
        out = tuple(ids)
        self._cache[chunk] = out
        return out

    def _merge_segment(self, symbols: list[str]) -> list[str]:
        ranks = self._ranks
        while len(symbols) > 1:
            best_rank, best = None, None
            for pair in zip(symbols, symbols[1:]):
                r = ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best_rank, best = r, pair
            if best is None:
                break
            merged: list[str] = []
            i = 0
            while i < len(symbols):
                if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == best:
                    merged.append(symbols[i] + symbols[i + 1])
                    i += 2
                else:
                    merged.append(symbols[i])
                    i += 1
            symbols = merged
        return symbols

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for chunk in pre_tokenize(text):
            ids.extend(self._bpe(chunk))
        return ids

    def encode_words(self, text: str) -> list[list[int]]:
        return [list(self._bpe(chunk)) for chunk in pre_tokenize(text)]

    # decoding -----------------------------------------------------------

    def render_special(self, token_id: int) -> str:
        if token_id < len(_SPECIAL_NAMES):
            return _SPECIAL_NAMES[token_id]
        return lid_sentinel(self._lid_lang[token_id])

    def decode(self, ids: Sequence[int]) -> str:
        out = bytearray()
        first = True
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.tokens):
                raise VocabError(f"token id {i} out of range for vocabulary of size {len(self.tokens)}")
            if self.special_mask[i]:
                out += self.render_special(i).encode("utf-8")
            else:
                piece = _symbols_to_bytes(self.tokens[i])
                if first and piece.startswith(b" "):
                    piece = piece[1:]
                out += piece
            first = False
        return out.decode("utf-8", errors="replace")

    def pieces(self, ids: Sequence[int]) -> list[str]:
        return [self.render_special(i) if self.special_mask[i] else self.tokens[i] for i in ids]

    # persistence --------------------------------------------------------

    def dumps(self) -> str:
        sp = self.specials
        lines = [
            FORMAT_TAG,
            f"size={self.size} pad={sp.pad} unk={sp.unk} mask={sp.mask} eos={sp.eos} bos={sp.bos} seed={self.seed}",
        ]
        lines += [f"lid {lang} {idx}" for lang, idx in sp.lid.items()]
        lines.append("alphabet " + json.dumps("".join(self.alphabet), ensure_ascii=True))
        lines += [f"merge {json.dumps(a, ensure_ascii=True)} {json.dumps(b, ensure_ascii=True)}"
                  for a, b in self.merges]
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="ascii")

    @classmethod
    def loads(cls, text: str) -> "Vocabulary":
        lines = text.splitlines()
        if not lines or lines[0] != FORMAT_TAG:
            raise VocabError("not a vocabulary file (bad header)")
        head = dict(kv.split("=", 1) for kv in lines[1].split())
        lid: dict[str, int] = {}
        alphabet = ""
        merges: list[tuple[str, str]] = []
        for line in lines[2:]:
            kind, _, rest = line.partition(" ")
            if kind == "lid":
                lang, idx = rest.split()
                lid[lang] = int(idx)
            elif kind == "alphabet":
                alphabet = json.loads(rest)
            elif kind == "merge":
                a, b = rest.split(" ")
                merges.append((json.loads(a), json.loads(b)))
            else:
                raise VocabError(f"unknown vocabulary line {line!r}")
        specials = SpecialTokens(int(head["pad"]), int(head["unk"]), int(head["mask"]),
                                 int(head["eos"]), int(head["bos"]), lid)
        vocab = _assemble(specials, tuple(alphabet), merges, int(head["seed"]))
        if vocab.size != int(head["size"]):
            raise VocabError(f"vocabulary size mismatch: header {head['size']}, rebuilt {vocab.size}")
        return vocab

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.loads(Path(path).read_text(encoding="ascii"))


def _specials_for(languages: Iterable[str], spare_lids: int) -> tuple[SpecialTokens, list[str]]:
    names = list(_SPECIAL_NAMES)
    lid: dict[str, int] = {}
    for lang in sorted(languages):
        lid[lang] = len(names)
        names.append(lid_sentinel(lang))
    for k in range(spare_lids):
        key = f"{SPARE_PREFIX}{k}"
        lid[key] = len(names)
        names.append(lid_sentinel(key))
    return SpecialTokens(PAD, UNK, MASK, EOS, BOS, lid), names


def _assemble(specials: SpecialTokens, alphabet: tuple[str, ...],
              merges: Sequence[tuple[str, str]], seed: int) -> Vocabulary:
    tokens = [_SPECIAL_NAMES[i] for i in range(len(_SPECIAL_NAMES))]
    tokens += [lid_sentinel(k) for k in specials.lid]
    # special sentinels live in the token table; raw subwords can never equal them
    # because raw subwords always start with MARK or a byte character
    seen = set(tokens)
    tokens += list(alphabet)
    seen.update(alphabet)
    for a, b in merges:
        if a + b not in seen:
            tokens.append(a + b)
            seen.add(a + b)
    return Vocabulary(tuple(tokens), tuple(merges), specials, alphabet, seed)


def train_vocab(collection: CorpusCollection | Iterable[str], target_size: int, seed: int = 0,
                spare_lids: int = 0, languages: Iterable[str] | None = None) -> Vocabulary:
    """Learn byte-pair merges over every sentence of every language.

    The most frequent adjacent pair is merged first; equal counts go to the
    lexicographically smallest pair.  Training is deterministic, ``seed`` is
    only recorded in the vocabulary header.
    """
    if isinstance(collection, CorpusCollection):
        sentences = [s for c in collection.corpora.values() for s in c.sentences()]
        langs = collection.languages if languages is None else list(languages)
    else:
        sentences = list(collection)
        langs = list(languages or [])
    specials, names = _specials_for(langs, spare_lids)

    word_freq: Counter[str] = Counter()
    for sent in sentences:
        word_freq.update(pre_tokenize(sent))
    alphabet = tuple(sorted({ch for w in word_freq for ch in w}))
    n_fixed = len(names) + len(alphabet)
    if target_size <= n_fixed:
        raise VocabError(
            f"target_size {target_size} too small: {len(alphabet)} alphabet symbols + {len(names)} specials")

    words = [list(w) for w in word_freq]
    freqs = [word_freq[w] for w in word_freq]
    pair_counts: Counter[tuple[str, str]] = Counter()
    where: dict[tuple[str, str], set[int]] = defaultdict(set)
    for wi, syms in enumerate(words):
        for pair in zip(syms, syms[1:]):
            pair_counts[pair] += freqs[wi]
            where[pair].add(wi)

    known = set(names) | set(alphabet)
    merges: list[tuple[str, str]] = []
    size = n_fixed
    while size < target_size and pair_counts:
        best = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merged_tok = best[0] + best[1]
        if merged_tok in names:
            del pair_counts[best]
            continue
        merges.append(best)
        if merged_tok not in known:
            known.add(merged_tok)
            size += 1
        for wi in sorted(where.pop(best, ())):
            syms = words[wi]
            f = freqs[wi]
            for pair in zip(syms, syms[1:]):
                pair_counts[pair] -= f
                if pair_counts[pair] <= 0:
                    del pair_counts[pair]
            new: list[str] = []
            i = 0
            while i < len(syms):
                if i + 1 < len(syms) and (syms[i], syms[i + 1]) == best:
                    new.append(merged_tok)
                    i += 2
                else:
                    new.append(syms[i])
                    i += 1
            words[wi] = new
            for pair in zip(new, new[1:]):
                pair_counts[pair] += f
                where[pair].add(wi)
        pair_counts.pop(best, None)
    return _assemble(specials, alphabet, merges, seed)
