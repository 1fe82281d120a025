"""Denoising pre-training and translation fine-tuning loops."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .corpus import CorpusCollection, ParallelCorpus, SamplingWeights, sample_language
from .model import Batch, Seq2SeqModel, clone, make_batch, save_checkpoint, smoothed_nll
from .noising import Instance, NoiseConfig, NoisedExample, PackStats, make_example, pack
from .tokenizer import Vocabulary

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    max_lr: float
    warmup_steps: int
    total_steps: int
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-6
    weight_decay: float = 0.0
    clip_norm: float = 0.0

    def __post_init__(self):
        if not 0 < self.warmup_steps < self.total_steps:
            raise ValueError(f"need 0 < warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}")
        if self.max_lr <= 0:
            raise ValueError("max_lr must be positive")


def lr_at(cfg: OptimizerConfig, step: float) -> float:
    """Linear warm-up from 0 to ``max_lr``, then linear decay to 0 at ``total_steps``."""
    if step <= cfg.warmup_steps:
        return cfg.max_lr * (step / cfg.warmup_steps)
    remaining = (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.max_lr * max(remaining, 0.0)


@dataclass(frozen=True)
class PretrainSchedule:
    dropout_stages: tuple[tuple[float, float], ...] = ((0.0, 0.1), (0.5, 0.05), (0.8, 0.0))
    token_budget: int = 4096
    max_sentences: int | None = None
    max_len: int = 512
    label_smoothing: float = 0.1
    checkpoint_interval: int | None = None

    def __post_init__(self):
        fracs = [f for f, _ in self.dropout_stages]
        if not fracs or fracs[0] != 0.0:
            raise ValueError("the first dropout stage must start at fraction 0")
        if any(b <= a for a, b in zip(fracs, fracs[1:])) or fracs[-1] >= 1.0:
            raise ValueError("dropout stage thresholds must increase strictly within [0, 1)")

    def dropout_at(self, step: int, total_steps: int) -> float:
        frac = step / total_steps
        p = self.dropout_stages[0][1]
        for threshold, value in self.dropout_stages:
            if frac >= threshold:
                p = value
        return p


@dataclass(frozen=True)
class FinetuneSchedule:
    dropout: float = 0.3
    label_smoothing: float = 0.2
    warmup: int = 2500
    max_lr: float = 3e-5
    max_updates: int = 40_000
    token_budget: int = 4096
    max_sentences: int | None = None
    valid_interval: int = 1000
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-6
    clip_norm: float = 0.0
    checkpoint_interval: int | None = None

    @classmethod
    def low_resource(cls, **kw) -> "FinetuneSchedule":
        return cls(**kw)

    @classmethod
    def high_resource(cls, **kw) -> "FinetuneSchedule":
        return cls(**{"max_updates": 100_000, **kw})

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(self.max_lr, self.warmup, self.max_updates, self.beta1, self.beta2,
                               self.epsilon, clip_norm=self.clip_norm)


@dataclass(frozen=True)
class CurveRow:
    step: int
    loss: float
    lr: float
    dropout: float

    def tsv(self) -> str:
        return f"{self.step}\t{self.loss:.6f}\t{self.lr:.8g}\t{self.dropout:g}"


CURVE_HEADER = "step\tloss\tlr\tdropout"


def write_curve(rows: Sequence, path: str | Path, header: str = CURVE_HEADER) -> None:
    Path(path).write_text(header + "\n" + "".join(r.tsv() + "\n" for r in rows), encoding="utf-8")


def make_optimizer(model: Seq2SeqModel, cfg: OptimizerConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=0.0, betas=(cfg.beta1, cfg.beta2), eps=cfg.epsilon,
                            weight_decay=cfg.weight_decay)


def _update(model: Seq2SeqModel, opt: torch.optim.Optimizer, batch: Batch, lr: float,
            label_smoothing: float, clip_norm: float, step: int) -> float:
    model.train()
    for group in opt.param_groups:
        group["lr"] = lr
    opt.zero_grad(set_to_none=True)
    logits = model(batch.src, batch.src_pad, batch.dec_in)
    value = smoothed_nll(logits, batch.target, batch.loss_mask, label_smoothing)
    if not torch.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {float(value.detach())} at step {step} (lr={lr:.3g})")
    value.backward()
    if clip_norm > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), clip_norm)
    opt.step()
    return float(value.detach())


def _fill_batch(draw, token_budget: int, max_sentences: int | None) -> list:
    """Pull items from ``draw()`` while the padded batch stays within the token budget."""
    items: list = []
    width = 0
    while True:
        item = draw()
        w = max(len(item.source), len(item.target))
        if items and not _fits(len(items) + 1, max(width, w), token_budget, max_sentences):
            return items
        items.append(item)
        width = max(width, w)


# pre-training -----------------------------------------------------------------

@dataclass
class PretrainResult:
    model: Seq2SeqModel
    curve: list[CurveRow]
    pack_stats: PackStats
    checkpoints: list[Path] = field(default_factory=list)


def pack_collection(collection: CorpusCollection, vocab: Vocabulary, max_len: int,
                    stats: PackStats | None = None) -> dict[str, list[Instance]]:
    return {lang: list(pack(corpus, vocab, max_len, stats=stats)) for lang, corpus in collection.corpora.items()}


def pretrain(model: Seq2SeqModel, collection: CorpusCollection, vocab: Vocabulary, weights: SamplingWeights,
             noise_cfg: NoiseConfig, schedule: PretrainSchedule, opt_cfg: OptimizerConfig, seed: int,
             out_dir: str | Path | None = None) -> PretrainResult:
    """Train ``model`` to reconstruct instances from their noised versions.

    Every batch slot draws its language from the rebalanced distribution,
    an instance of that language uniformly at random, and its noise from a
    stream keyed by (seed, step, slot).
    """
    for lang in collection.languages:
        vocab.lid(lang)
    max_len = min(schedule.max_len, model.config.max_positions)
    stats = PackStats()
    pools = pack_collection(collection, vocab, max_len, stats)
    torch.manual_seed(seed)
    lang_rng = np.random.default_rng([seed, 0])
    opt = make_optimizer(model, opt_cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = PretrainResult(model, [], stats)
    for step in range(1, opt_cfg.total_steps + 1):
        slot = iter(range(1 << 30))

        def draw() -> NoisedExample:
            lang = sample_language(weights, lang_rng)
            pool = pools[lang]
            inst = pool[int(lang_rng.integers(len(pool)))]
            return make_example(inst, vocab, noise_cfg, np.random.default_rng([seed, step, next(slot)]))

        examples = _fill_batch(draw, schedule.token_budget, schedule.max_sentences)
        dropout = schedule.dropout_at(step - 1, opt_cfg.total_steps)
        model.set_dropout(dropout)
        lr = lr_at(opt_cfg, step)
        value = _update(model, opt, make_batch(examples, vocab.pad), lr, schedule.label_smoothing,
                        opt_cfg.clip_norm, step)
        result.curve.append(CurveRow(step, value, lr, dropout))
        if out is not None and schedule.checkpoint_interval and step % schedule.checkpoint_interval == 0:
            path = out / f"step_{step}.ckpt"
            save_checkpoint(model, path, {"step": step, "kind": "pretrain"})
            result.checkpoints.append(path)
    model.set_dropout(0.0)
    return result


# fine-tuning ------------------------------------------------------------------

def pair_example(vocab: Vocabulary, src: str, tgt: str, src_lang: str, tgt_lang: str,
                 max_len: int) -> NoisedExample:
    """(source + </S> + source id) -> (target id + target + </S>) teacher-forcing triple."""
    s = vocab.encode(src)[:max_len - 2] + [vocab.eos, vocab.lid(src_lang)]
    t = vocab.encode(tgt)[:max_len - 2] + [vocab.eos, vocab.lid(tgt_lang)]
    t_lid = vocab.lid(tgt_lang)
    return NoisedExample(tgt_lang, tuple(s), (t_lid, *t[:-1]), tuple(t))


def parallel_examples(vocab: Vocabulary, corpus: ParallelCorpus, max_len: int) -> list[NoisedExample]:
    return [pair_example(vocab, s, t, corpus.source_lang, corpus.target_lang, max_len) for s, t in corpus.pairs]


def _fits(n: int, width: int, token_budget: int, max_sentences: int | None) -> bool:
    return n * width <= token_budget and (max_sentences is None or n <= max_sentences)


def batches_by_length(examples: Sequence[NoisedExample], rng: np.random.Generator, token_budget: int,
                      max_sentences: int | None) -> list[list[NoisedExample]]:
    """One epoch of shuffled batches, length-sorted within large chunks to limit padding."""
    order = rng.permutation(len(examples))
    chunk = 64 * (max_sentences or 16)
    out: list[list[NoisedExample]] = []
    for c in range(0, len(order), chunk):
        part = sorted(order[c:c + chunk], key=lambda i: (len(examples[i].source), int(i)))
        batch: list[NoisedExample] = []
        width = 0
        for i in part:
            ex = examples[i]
            w = max(len(ex.source), len(ex.target))
            if batch and not _fits(len(batch) + 1, max(width, w), token_budget, max_sentences):
                out.append(batch)
                batch, width = [], 0
            batch.append(ex)
            width = max(width, w)
        if batch:
            out.append(batch)
    return [out[i] for i in rng.permutation(len(out))]


def validation_nll(model: Seq2SeqModel, examples: Sequence[NoisedExample], pad: int, batch_size: int = 64) -> float:
    """Per-token negative log-likelihood (no smoothing, no dropout)."""
    was = model.training
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(examples), batch_size):
            b = make_batch(examples[i:i + batch_size], pad)
            logits = model(b.src, b.src_pad, b.dec_in)
            total += float(smoothed_nll(logits, b.target, b.loss_mask, 0.0, reduce="sum"))
            count += b.num_tokens
    model.train(was)
    return total / count


@dataclass(frozen=True)
class ValidRow:
    step: int
    valid_nll: float

    def tsv(self) -> str:
        return f"{self.step}\t{self.valid_nll:.6f}"


VALID_HEADER = "step\tvalid_nll"


@dataclass
class FinetuneResult:
    model: Seq2SeqModel
    curve: list[CurveRow]
    validation: list[ValidRow]
    best_step: int
    final_model: Seq2SeqModel | None = None

    @property
    def best_nll(self) -> float:
        return min(r.valid_nll for r in self.validation)


def finetune(model: Seq2SeqModel, train: ParallelCorpus, valid: ParallelCorpus | None, vocab: Vocabulary,
             schedule: FinetuneSchedule, seed: int, out_dir: str | Path | None = None) -> FinetuneResult:
    """Teacher-forced training on a parallel corpus; returns the lowest-validation-NLL checkpoint."""
    if valid is None or len(valid.pairs) == 0:
        raise ValueError("fine-tuning needs a nonempty validation split")
    for lang in (train.source_lang, train.target_lang):
        vocab.lid(lang)
    max_len = model.config.max_positions
    train_ex = parallel_examples(vocab, train, max_len)
    valid_ex = parallel_examples(vocab, valid, max_len)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    best_state = {k: v.clone() for k, v in model.state_dict().items()}
    first = validation_nll(model, valid_ex, vocab.pad)
    validation = [ValidRow(0, first)]
    best_step, best_nll = 0, first
    curve: list[CurveRow] = []
    if schedule.max_updates == 0:
        return FinetuneResult(clone(model), curve, validation, 0, model)

    torch.manual_seed(seed)
    rng = np.random.default_rng([seed, 1])
    opt_cfg = schedule.optimizer()
    opt = make_optimizer(model, opt_cfg)
    model.set_dropout(schedule.dropout)
    step = 0
    while step < schedule.max_updates:
        for batch_ex in batches_by_length(train_ex, rng, schedule.token_budget, schedule.max_sentences):
            step += 1
            lr = lr_at(opt_cfg, step)
            value = _update(model, opt, make_batch(batch_ex, vocab.pad), lr, schedule.label_smoothing,
                            opt_cfg.clip_norm, step)
            curve.append(CurveRow(step, value, lr, schedule.dropout))
            if step % schedule.valid_interval == 0 or step == schedule.max_updates:
                nll = validation_nll(model, valid_ex, vocab.pad)
                validation.append(ValidRow(step, nll))
                log.info("step %d valid_nll %.4f", step, nll)
                if nll < best_nll:
                    best_step, best_nll = step, nll
                    best_state = {k: v.clone() for k, v in model.state_dict().items()}
                    if out is not None:
                        save_checkpoint(model, out / "best.ckpt", {"step": step, "kind": "finetune"})
            if out is not None and schedule.checkpoint_interval and step % schedule.checkpoint_interval == 0:
                save_checkpoint(model, out / f"step_{step}.ckpt", {"step": step, "kind": "finetune"})
            if step >= schedule.max_updates:
                break
    model.set_dropout(0.0)
    best = clone(model)
    best.load_state_dict(best_state)
    best.set_dropout(0.0)
    if out is not None and best_step == 0:
        save_checkpoint(best, out / "best.ckpt", {"step": 0, "kind": "finetune"})
    return FinetuneResult(best, curve, validation, best_step, model)


# experiment presets -------------------------------------------------------------

def preset_languages(name: str, languages: Sequence[str], pair: Sequence[str] = ()) -> list[str]:
    """Languages a pre-training preset sees.

    ``mbartK`` keeps K languages, the fine-tuning pair first; ``bart-mono:<lang>``
    one language; ``random`` none (no pre-training).
    """
    if name == "random":
        return []
    if name.startswith("bart-mono"):
        _, _, lang = name.partition(":")
        lang = lang or (pair[0] if pair else languages[0])
        if lang not in languages:
            raise ValueError(f"preset {name!r}: language {lang!r} not available")
        return [lang]
    if name.startswith("mbart"):
        k = int(name[5:]) if name[5:] else len(languages)
        ordered = [l for l in pair if l in languages] + [l for l in sorted(languages) if l not in pair]
        if not 1 <= k <= len(ordered):
            raise ValueError(f"preset {name!r} needs between 1 and {len(ordered)} languages")
        return ordered[:k]
    raise ValueError(f"unknown preset {name!r}")
