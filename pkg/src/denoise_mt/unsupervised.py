"""Unsupervised translation: on-the-fly back-translation and language transfer."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import decoding
from .corpus import MonolingualCorpus, ParallelCorpus
from .eval import WHITESPACE, BleuReport, TokenizerHook, corpus_bleu, exact_match
from .model import Seq2SeqModel, clone, make_batch
from .noising import NoisedExample
from .tokenizer import Vocabulary
from .training import OptimizerConfig, _update, lr_at, make_optimizer

log = logging.getLogger(__name__)


class ProvenanceError(ValueError):
    pass


@dataclass(frozen=True)
class BtConfig:
    constrained_steps: int = 1000
    rounds: int = 1
    updates_per_round: int = 1000
    batch_size: int = 32
    max_lr: float = 1e-4
    warmup: int = 50
    label_smoothing: float = 0.1
    dropout: float = 0.1
    gen_max_len: int = 48
    allowed_threshold: float = 0.01
    allowed_mode: str = "relative"
    copy_identity: float = 0.9
    eval_beam: int = 5
    clip_norm: float = 0.0

    def __post_init__(self):
        if self.constrained_steps < 0:
            raise ValueError("constrained_steps must be >= 0")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.updates_per_round < 0:
            raise ValueError("updates_per_round must be >= 0")

    @property
    def total_updates(self) -> int:
        return self.rounds * self.updates_per_round


@dataclass(frozen=True)
class SyntheticPair:
    """Back-translated training pair; never eligible for evaluation."""

    source: tuple[int, ...]
    target: tuple[int, ...]
    source_lang: str
    target_lang: str
    step: int
    provenance: str = "synthetic"


@dataclass(frozen=True)
class ManifestRow:
    round: int
    direction: str
    updates: int
    dev_score: float

    def tsv(self) -> str:
        return f"{self.round}\t{self.direction}\t{self.updates}\t{self.dev_score:.4f}"


MANIFEST_HEADER = "round\tdirection\tupdates\tdev_score"


def write_manifest(rows: Sequence[ManifestRow], path: str | Path) -> None:
    Path(path).write_text(MANIFEST_HEADER + "\n" + "".join(r.tsv() + "\n" for r in rows), encoding="utf-8")


@dataclass
class BtResult:
    model: Seq2SeqModel
    manifest: list[ManifestRow] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    directions: list[str] = field(default_factory=list)
    copy_warnings: int = 0
    constrained_tokens: int = 0
    constraint_violations: int = 0
    last_batch: list[SyntheticPair] = field(default_factory=list)


def require_authentic(corpus: ParallelCorpus) -> ParallelCorpus:
    if corpus.provenance != "authentic":
        raise ProvenanceError(f"{corpus.source_lang}-{corpus.target_lang} data has provenance "
                              f"{corpus.provenance!r}; only authentic pairs may be evaluated")
    return corpus


def evaluate(model: Seq2SeqModel, vocab: Vocabulary, test: ParallelCorpus, beam_size: int = 5,
             hook: TokenizerHook = WHITESPACE, max_len: int = 64) -> tuple[BleuReport, float, list[str]]:
    """BLEU and exact match of ``model`` on an authentic test set."""
    require_authentic(test)
    hyps = decoding.translate(model, vocab, test.sources(), test.source_lang, test.target_lang,
                              beam_size=beam_size, max_len=max_len)
    return corpus_bleu(hyps, test.targets(), hook), exact_match(hyps, test.targets()), hyps


def _identity(a: Sequence[int], b: Sequence[int]) -> float:
    n = max(len(a), len(b))
    if n == 0:
        return 1.0
    return sum(x == y for x, y in zip(a, b)) / n


def _triple(vocab: Vocabulary, src: Sequence[int], src_lang: str, tgt: Sequence[int], tgt_lang: str,
            max_len: int) -> NoisedExample:
    s = list(src)[:max_len - 2] + [vocab.eos, vocab.lid(src_lang)]
    t = list(tgt)[:max_len - 2] + [vocab.eos, vocab.lid(tgt_lang)]
    return NoisedExample(tgt_lang, tuple(s), (vocab.lid(tgt_lang), *t[:-1]), tuple(t))


def online_bt(model: Seq2SeqModel, mono_src: MonolingualCorpus, mono_tgt: MonolingualCorpus, vocab: Vocabulary,
              cfg: BtConfig, seed: int, dev: Sequence[ParallelCorpus] = ()) -> BtResult:
    """On-the-fly back-translation between the languages of two monolingual corpora.

    Even steps train src->tgt on (synthetic src, real tgt) pairs, odd steps the
    reverse.  Synthetic sides are generated greedily with the current weights;
    during the first ``cfg.constrained_steps`` steps generation may only emit
    tokens frequent enough in the monolingual corpus of the generated language.
    """
    langs = (mono_src.lang, mono_tgt.lang)
    for lang in langs:
        vocab.lid(lang)
    for d in dev:
        require_authentic(d)
    max_len = model.config.max_positions
    gen_len = min(cfg.gen_max_len, max_len - 2)
    allowed = {
        c.lang: decoding.build_allowed_mask(c, vocab, cfg.allowed_threshold, cfg.allowed_mode)
        for c in (mono_src, mono_tgt)
    }
    encoded = {c.lang: [vocab.encode(s)[:max_len - 2] for s in c.sentences()] for c in (mono_src, mono_tgt)}
    result = BtResult(model)
    if cfg.total_updates == 0:
        return result

    torch.manual_seed(seed)
    rng = np.random.default_rng([seed, 2])
    opt_cfg = OptimizerConfig(cfg.max_lr, max(1, min(cfg.warmup, cfg.total_updates - 1)),
                              max(cfg.total_updates, 2), clip_norm=cfg.clip_norm)
    opt = make_optimizer(model, opt_cfg)
    step = 0
    for rnd in range(1, cfg.rounds + 1):
        for _ in range(cfg.updates_per_round):
            # even step: src->tgt, so real text is tgt and the synthetic side is src
            real_lang, syn_lang = (langs[1], langs[0]) if step % 2 == 0 else (langs[0], langs[1])
            pool = encoded[real_lang]
            idx = rng.integers(len(pool), size=cfg.batch_size)
            real = [pool[i] for i in idx]
            constrained = step < cfg.constrained_steps
            mask = allowed[syn_lang] if constrained else None
            gen_src = [r + [vocab.eos, vocab.lid(real_lang)] for r in real]
            syn_lid = vocab.lid(syn_lang)
            outputs = decoding.greedy_batch(model, gen_src, [syn_lid] * len(gen_src), syn_lid, gen_len,
                                            mask, vocab.pad)
            synthetic = [decoding.strip_output(o, vocab, syn_lid) for o in outputs]
            if constrained:
                emitted = [t for o in outputs for t in o]
                result.constrained_tokens += len(emitted)
                result.constraint_violations += int(sum(not mask[t] for t in emitted))
            if np.mean([_identity(s, r) for s, r in zip(synthetic, real)]) >= cfg.copy_identity:
                result.copy_warnings += 1
            pairs = [SyntheticPair(tuple(s), tuple(r), syn_lang, real_lang, step)
                     for s, r in zip(synthetic, real) if s]
            result.directions.append(f"{syn_lang}-{real_lang}")
            step += 1
            if not pairs:
                continue
            batch = make_batch([_triple(vocab, p.source, p.source_lang, p.target, p.target_lang, max_len)
                                for p in pairs], vocab.pad)
            model.set_dropout(cfg.dropout)
            value = _update(model, opt, batch, lr_at(opt_cfg, step), cfg.label_smoothing, cfg.clip_norm, step)
            model.set_dropout(0.0)
            result.losses.append(value)
            result.last_batch = pairs
        for d in dev:
            report, _, _ = evaluate(model, vocab, d, cfg.eval_beam)
            result.manifest.append(ManifestRow(rnd, f"{d.source_lang}-{d.target_lang}", step, report.score))
    model.set_dropout(0.0)
    return result


# language transfer ---------------------------------------------------------------

def language_transfer(model: Seq2SeqModel, test: ParallelCorpus, vocab: Vocabulary, beam_size: int = 5,
                      hook: TokenizerHook = WHITESPACE) -> BleuReport:
    """Score a model fine-tuned on another source language on ``test`` with no further training."""
    if not vocab.has_lid(test.source_lang):
        raise ValueError(f"no language id token for {test.source_lang!r}; cannot transfer")
    vocab.lid(test.target_lang)
    report, _, _ = evaluate(model, vocab, test, beam_size, hook)
    return report


@dataclass(frozen=True)
class TransferReport:
    transfer: BleuReport
    combined: BleuReport
    bt_only: BleuReport | None = None

    def rows(self) -> list[tuple[str, float]]:
        out = [("transfer", self.transfer.score)]
        if self.bt_only is not None:
            out.append(("bt", self.bt_only.score))
        out.append(("combined", self.combined.score))
        return out

    def as_tsv(self) -> str:
        return "system\tbleu\n" + "".join(f"{k}\t{v:.4f}\n" for k, v in self.rows())


def transfer_plus_bt(transferred: Seq2SeqModel, mono_src: MonolingualCorpus, mono_tgt: MonolingualCorpus,
                     test: ParallelCorpus, vocab: Vocabulary, cfg: BtConfig, seed: int,
                     pretrained: Seq2SeqModel | None = None,
                     hook: TokenizerHook = WHITESPACE) -> tuple[Seq2SeqModel, TransferReport]:
    """Start back-translation from a transferred model; optionally also from ``pretrained`` alone."""
    transfer = language_transfer(transferred, test, vocab, cfg.eval_beam, hook)
    combined_model = clone(transferred)
    online_bt(combined_model, mono_src, mono_tgt, vocab, cfg, seed)
    combined = language_transfer(combined_model, test, vocab, cfg.eval_beam, hook)
    bt_only = None
    if pretrained is not None:
        bt_model = clone(pretrained)
        online_bt(bt_model, mono_src, mono_tgt, vocab, cfg, seed)
        bt_only = language_transfer(bt_model, test, vocab, cfg.eval_beam, hook)
    return combined_model, TransferReport(transfer, combined, bt_only)
