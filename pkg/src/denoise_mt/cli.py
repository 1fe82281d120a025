"""Command-line entry point: ``denoise-mt <command> [--config FILE] [--key value ...]``.

Every command reads a flat ``key = value`` config file (optional), applies
flag overrides on top, resolves paths against ``--root`` and writes the
resolved configuration to ``<out>/config.resolved`` before producing its
artifacts.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import torch

from . import __version__, toy
from .corpus import (CorpusCollection, CorpusError, ParallelCorpus, check_lang,
                     load_manifest, load_monolingual, load_parallel, parse_documents, rebalance,
                     write_monolingual, write_parallel)
from .decoding import translate, translate_documents
from .eval import WHITESPACE, BleuReport, EvalError, corpus_bleu, document_report
from .model import ModelConfig, ModelError, Seq2SeqModel, init, load_checkpoint, save_checkpoint
from .noising import NoiseConfig
from .tokenizer import Vocabulary, VocabError, train_vocab
from .training import (VALID_HEADER, FinetuneSchedule, OptimizerConfig, PretrainSchedule, TrainingDiverged,
                       finetune, preset_languages, pretrain, write_curve)
from .unsupervised import BtConfig, ProvenanceError, language_transfer, online_bt, transfer_plus_bt, write_manifest

log = logging.getLogger("denoise_mt")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_SHAPE = 5
EXIT_DATA = 6
EXIT_DIVERGED = 7

EXIT_CODES = f"""exit codes:
  {EXIT_OK}  success
  {EXIT_ERROR}  unexpected error
  {EXIT_USAGE}  bad command line
  {EXIT_CONFIG}  config file or value could not be parsed
  {EXIT_MISSING}  an input file or directory does not exist
  {EXIT_SHAPE}  checkpoint, vocabulary or tensor shapes do not match
  {EXIT_DATA}  malformed or inconsistent data (corpora, languages, provenance)
  {EXIT_DIVERGED}  training produced a non-finite loss
"""


class ConfigError(ValueError):
    pass


class MissingInput(FileNotFoundError):
    pass


# configuration -------------------------------------------------------------------

@dataclass(frozen=True)
class Key:
    default: object
    help: str
    path: bool = False
    kind: type | None = None

    @property
    def type(self) -> type:
        if self.kind is not None:
            return self.kind
        return str if self.default is None else type(self.default)


MODEL_KEYS = {
    "enc_layers": Key(2, "encoder layers"),
    "dec_layers": Key(2, "decoder layers"),
    "d_model": Key(64, "model width"),
    "heads": Key(4, "attention heads"),
    "ffn_dim": Key(128, "feed-forward width"),
    "max_positions": Key(64, "learned position table size (max sequence length)"),
}

FINETUNE_KEYS = {
    "max_updates": Key(300, "update budget"),
    "max_lr": Key(1e-3, "peak learning rate"),
    "warmup": Key(30, "warm-up updates"),
    "dropout": Key(0.1, "dropout during fine-tuning"),
    "label_smoothing": Key(0.1, "label smoothing epsilon"),
    "token_budget": Key(1024, "padded tokens per batch"),
    "valid_interval": Key(100, "updates between validation passes"),
}

BT_KEYS = {
    "rounds": Key(1, "back-translation rounds"),
    "updates_per_round": Key(1200, "updates per round"),
    "constrained_steps": Key(1000, "steps decoded under the frequency constraint"),
    "bt_lr": Key(1e-3, "peak learning rate"),
    "bt_warmup": Key(50, "warm-up updates"),
    "batch_size": Key(32, "monolingual sentences per update"),
    "bt_dropout": Key(0.0, "dropout during back-translation"),
    "bt_label_smoothing": Key(0.1, "label smoothing epsilon"),
    "gen_max_len": Key(48, "maximum generated synthetic length"),
    "allowed_threshold": Key(0.01, "frequency threshold of the constraint"),
    "allowed_mode": Key("relative", "relative or absolute frequency threshold"),
    "eval_beam": Key(1, "beam size for dev evaluation"),
}

COMMANDS: dict[str, tuple[str, dict[str, Key]]] = {
    "toy": ("generate toy languages, monolingual corpora and parallel splits", {
        "languages": Key("en,xx", "comma-separated language codes"),
        "pairs": Key("en-xx", "comma-separated src-tgt pairs to write parallel splits for"),
        "shared": Key("", "lang:base:fraction entries; lang reuses base's words for that fraction"),
        "concepts": Key(24, "concepts in the toy world"),
        "anchors": Key(12, "concepts spelled identically in every language"),
        "branching": Key(3, "successors per concept in the sentence chain"),
        "min_len": Key(4, "shortest sentence"),
        "max_len": Key(8, "longest sentence"),
        "mono_sentences": Key(2000, "monolingual sentences per language"),
        "doc_len": Key(1, "sentences per monolingual document"),
        "train_pairs": Key(4096, "training pairs per pair"),
        "valid_pairs": Key(100, "validation pairs per pair"),
        "test_pairs": Key(200, "test pairs per pair"),
        "world_seed": Key(0, "seed of the toy world and lexicons"),
    }),
    "train-vocab": ("learn a shared byte-level BPE vocabulary", {
        "manifest": Key(None, "TSV of lang<TAB>corpus path", path=True),
        "vocab_size": Key(400, "target vocabulary size"),
        "spare_lids": Key(0, "reserved language-id slots for unseen languages"),
    }),
    "pretrain": ("multilingual denoising pre-training", {
        "manifest": Key(None, "TSV of lang<TAB>corpus path", path=True),
        "vocab": Key(None, "vocabulary file", path=True),
        "preset": Key("mbart", "mbart, mbartK, bart-mono[:lang] or random"),
        "pair": Key("", "downstream pair src-tgt; presets keep these languages first"),
        "alpha": Key(0.7, "rebalancing exponent"),
        "steps": Key(1000, "optimizer updates"),
        "max_lr": Key(1e-3, "peak learning rate"),
        "warmup": Key(100, "warm-up updates"),
        "token_budget": Key(1024, "padded tokens per batch"),
        "mask_ratio": Key(0.35, "fraction of words masked"),
        "span_lambda": Key(3.5, "Poisson mean of masked span lengths"),
        "permute": Key(True, "shuffle sentence order within instances"),
        "label_smoothing": Key(0.1, "label smoothing epsilon"),
        "checkpoint_interval": Key(0, "write step_<N>.ckpt every N updates (0: never)"),
        **MODEL_KEYS,
    }),
    "finetune": ("fine-tune on a parallel corpus; without --init this is the random baseline", {
        "vocab": Key(None, "vocabulary file", path=True),
        "train": Key(None, "training TSV (source<TAB>target)", path=True),
        "valid": Key(None, "validation TSV", path=True),
        "pair": Key("en-xx", "src-tgt"),
        "init": Key("", "pre-trained checkpoint; empty for random initialization", path=True),
        "train_pairs": Key(0, "use only the first N training pairs (0: all)"),
        **FINETUNE_KEYS,
        **MODEL_KEYS,
    }),
    "translate": ("translate sentences (one per line) or documents (blank-line separated)", {
        "checkpoint": Key(None, "model checkpoint", path=True),
        "vocab": Key(None, "vocabulary file", path=True),
        "input": Key(None, "text file, or TSV whose first column is the source", path=True),
        "pair": Key("en-xx", "src-tgt"),
        "beam_size": Key(5, "beam width"),
        "max_len": Key(64, "maximum output length"),
        "length_penalty": Key(1.0, "exponent of the length normalization"),
        "documents": Key(False, "treat blank-line separated blocks as documents"),
    }),
    "eval": ("BLEU of hypotheses against references", {
        "hyp": Key(None, "hypothesis file", path=True),
        "ref": Key(None, "reference text file, or TSV whose second column is the reference", path=True),
        "documents": Key(False, "blank-line separated documents; reports d-BLEU and s-BLEU"),
        "smooth": Key(False, "add-one smoothing for orders above 1"),
    }),
    "bt": ("on-the-fly back-translation from monolingual data", {
        "checkpoint": Key(None, "initial checkpoint", path=True),
        "vocab": Key(None, "vocabulary file", path=True),
        "mono_src": Key(None, "monolingual corpus of the source language", path=True),
        "mono_tgt": Key(None, "monolingual corpus of the target language", path=True),
        "pair": Key("en-xx", "src-tgt"),
        "dev": Key("", "optional authentic src-tgt TSV scored after every round", path=True),
        **BT_KEYS,
    }),
    "transfer": ("apply a model fine-tuned on another pair, optionally followed by back-translation", {
        "checkpoint": Key(None, "model fine-tuned on a different source language", path=True),
        "vocab": Key(None, "vocabulary file", path=True),
        "test": Key(None, "authentic test TSV of the new pair", path=True),
        "pair": Key("bb-en", "src-tgt of the new pair"),
        "beam_size": Key(5, "beam width"),
        "mono_src": Key("", "monolingual source corpus (needed when updates_per_round > 0)", path=True),
        "mono_tgt": Key("", "monolingual target corpus", path=True),
        "pretrained": Key("", "pre-trained checkpoint for the back-translation-only row", path=True),
        **{**BT_KEYS, "updates_per_round": Key(0, "back-translation updates after transfer (0: none)")},
    }),
    "report": ("tables and plots of training curves or sweeps", {
        "runs": Key("", "comma-separated run directories whose curves to plot", kind=str),
        "sweep": Key("", "bitext or steps", kind=str),
        "vocab": Key("", "vocabulary file (sweeps)", path=True),
        "init": Key("", "pre-trained checkpoint (bitext sweep)", path=True),
        "checkpoints": Key("", "directory of step_<N>.ckpt files (steps sweep)", path=True),
        "train": Key("", "training TSV (sweeps)", path=True),
        "valid": Key("", "validation TSV (sweeps)", path=True),
        "test": Key("", "test TSV (sweeps)", path=True),
        "pair": Key("en-xx", "src-tgt"),
        "sizes": Key("64,256,1024,4096", "bitext sizes"),
        "beam_size": Key(1, "beam width for scoring"),
        **FINETUNE_KEYS,
        **MODEL_KEYS,
    }),
}


def parse_value(raw: str, key: Key, name: str):
    raw = raw.strip()
    t = key.type
    try:
        if t is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return t(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {t.__name__}") from None


def read_config_file(path: Path, keys: dict[str, Key]) -> dict[str, object]:
    if not path.is_file():
        raise MissingInput(f"config file {path} not found")
    values = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        name, sep, raw = line.partition("=")
        name = name.strip().replace("-", "_")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        if name not in keys:
            raise ConfigError(f"{path}:{lineno}: unknown key {name!r}")
        values[name] = parse_value(raw, keys[name], name)
    return values


@dataclass(frozen=True)
class RunConfig:
    command: str
    root: Path
    out: Path
    seed: int
    values: dict[str, object]

    def __getitem__(self, name: str):
        return self.values[name]

    def path(self, name: str, required: bool = True) -> Path | None:
        raw = self.values[name]
        if raw in (None, ""):
            if required:
                raise ConfigError(f"{self.command}: '{name}' is required")
            return None
        p = Path(str(raw))
        return p if p.is_absolute() else self.root / p

    def input(self, name: str, required: bool = True) -> Path | None:
        p = self.path(name, required)
        if p is not None and not p.exists():
            raise MissingInput(f"{self.command}: {name} = {p} does not exist")
        return p

    def snapshot(self) -> str:
        lines = [f"command = {self.command}", f"seed = {self.seed}"]
        lines += [f"{k} = {'' if v is None else v}" for k, v in sorted(self.values.items())]
        return "\n".join(lines) + "\n"

    def prepare_out(self) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.resolved").write_text(self.snapshot(), encoding="utf-8")
        return self.out


def resolve(command: str, args: argparse.Namespace) -> RunConfig:
    keys = COMMANDS[command][1]
    root = Path(args.root)
    values = {k: key.default for k, key in keys.items()}
    if args.config:
        cfg_path = Path(args.config)
        values.update(read_config_file(cfg_path if cfg_path.is_absolute() else root / cfg_path, keys))
    for k, key in keys.items():
        raw = getattr(args, k, None)
        if raw is not None:
            values[k] = parse_value(raw, key, k)
    out = Path(args.out)
    return RunConfig(command, root, out if out.is_absolute() else root / out, args.seed, values)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="denoise-mt", description="Denoising pre-training for translation at toy scale.",
                                     epilog=EXIT_CODES, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (help_text, keys) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=EXIT_CODES,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--root", default=".", help="workspace root; relative paths resolve against it")
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--out", default=f"runs/{name}", help="output directory")
        p.add_argument("--seed", type=int, default=0, help="global seed")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress")
        for k, key in keys.items():
            default = "" if key.default is None else key.default
            p.add_argument("--" + k.replace("_", "-"), dest=k, metavar=key.type.__name__.upper(),
                           help=f"{key.help} (default: {default!s})")
    return parser


# helpers -------------------------------------------------------------------------

def split_pair(pair: str) -> tuple[str, str]:
    src, sep, tgt = pair.partition("-")
    if not sep or not src or not tgt:
        raise ConfigError(f"pair must look like 'src-tgt', got {pair!r}")
    return check_lang(src), check_lang(tgt)


def model_config(cfg: RunConfig, vocab: Vocabulary) -> ModelConfig:
    return ModelConfig(enc_layers=cfg["enc_layers"], dec_layers=cfg["dec_layers"], d_model=cfg["d_model"],
                       heads=cfg["heads"], ffn_dim=cfg["ffn_dim"], dropout=0.0, vocab_size=vocab.size,
                       max_positions=cfg["max_positions"])


def load_model(path: Path, vocab: Vocabulary) -> Seq2SeqModel:
    model, _ = load_checkpoint(path)
    if model.config.vocab_size != vocab.size:
        raise ModelError(f"{path}: checkpoint has {model.config.vocab_size} embeddings but the vocabulary "
                         f"has {vocab.size} tokens")
    return model


def finetune_schedule(cfg: RunConfig) -> FinetuneSchedule:
    return FinetuneSchedule(dropout=cfg["dropout"], label_smoothing=cfg["label_smoothing"], warmup=cfg["warmup"],
                            max_lr=cfg["max_lr"], max_updates=cfg["max_updates"], token_budget=cfg["token_budget"],
                            valid_interval=cfg["valid_interval"])


def bt_config(cfg: RunConfig) -> BtConfig:
    return BtConfig(constrained_steps=cfg["constrained_steps"], rounds=cfg["rounds"],
                    updates_per_round=cfg["updates_per_round"], batch_size=cfg["batch_size"], max_lr=cfg["bt_lr"],
                    warmup=cfg["bt_warmup"], label_smoothing=cfg["bt_label_smoothing"], dropout=cfg["bt_dropout"],
                    gen_max_len=cfg["gen_max_len"], allowed_threshold=cfg["allowed_threshold"],
                    allowed_mode=cfg["allowed_mode"], eval_beam=cfg["eval_beam"])


def read_sources(path: Path) -> list[str]:
    lines = path.read_text(encoding="utf-8").splitlines()
    if path.suffix == ".tsv":
        return [l.split("\t")[0] for l in lines if l.strip()]
    return lines


def read_refs(path: Path) -> list[str]:
    lines = path.read_text(encoding="utf-8").splitlines()
    if path.suffix == ".tsv":
        return [l.split("\t")[1] for l in lines if l.strip()]
    return lines


def write_lines(path: Path, lines: list[str]) -> None:
    path.write_text("".join(l + "\n" for l in lines), encoding="utf-8")


def bleu_tsv(rows: list[tuple[str, BleuReport]]) -> str:
    return "name\t" + BleuReport.tsv_header() + "\n" + "".join(f"{n}\t{r.as_tsv()}\n" for n, r in rows)


# commands ------------------------------------------------------------------------

def cmd_toy(cfg: RunConfig) -> int:
    codes = [check_lang(c.strip()) for c in cfg["languages"].split(",") if c.strip()]
    pairs = [split_pair(p.strip()) for p in cfg["pairs"].split(",") if p.strip()]
    for a, b in pairs:
        if a not in codes or b not in codes:
            raise ConfigError(f"pair {a}-{b} uses a language not in 'languages'")
    shared = {}
    for entry in filter(None, (e.strip() for e in cfg["shared"].split(","))):
        try:
            lang, base, frac = entry.split(":")
            shared[lang] = (base, float(frac))
        except ValueError:
            raise ConfigError(f"shared entry {entry!r} is not lang:base:fraction") from None
        if codes.index(base) > codes.index(lang):
            raise ConfigError(f"shared: {base!r} must be listed before {lang!r} in 'languages'")
    world = toy.make_world(cfg["concepts"], cfg["anchors"], cfg["branching"], cfg["min_len"], cfg["max_len"],
                           seed=cfg["world_seed"])
    langs = toy.make_languages(world, codes, shared_with=shared, seed=cfg["world_seed"])
    out = cfg.prepare_out()
    (out / "mono").mkdir(exist_ok=True)
    (out / "para").mkdir(exist_ok=True)
    manifest = []
    for i, code in enumerate(codes):
        corpus = toy.monolingual(langs[code], world, cfg["mono_sentences"], seed=cfg.seed * 1000 + i + 1,
                                 doc_len=cfg["doc_len"])
        write_monolingual(corpus, out / "mono" / f"{code}.txt")
        manifest.append(f"{code}\tmono/{code}.txt\n")
    (out / "manifest.tsv").write_text("".join(manifest), encoding="utf-8")
    sizes = {"train": cfg["train_pairs"], "valid": cfg["valid_pairs"], "test": cfg["test_pairs"]}
    for a, b in pairs:
        # the same seed for every pair keeps test sets concept-aligned across pairs
        splits = toy.parallel_splits(langs[a], langs[b], world, sizes, seed=cfg.seed * 1000 + 100)
        for name, corpus in splits.items():
            write_parallel(corpus, out / "para" / f"{a}-{b}.{name}.tsv")
    lex = ["concept\t" + "\t".join(codes)]
    lex += [f"{c}\t" + "\t".join(langs[k].lexicon[c] for k in codes) for c in range(world.n_concepts)]
    write_lines(out / "lexicon.tsv", lex)
    print(f"wrote {len(codes)} languages and {len(pairs)} pairs to {out}")
    return EXIT_OK


def cmd_train_vocab(cfg: RunConfig) -> int:
    collection = load_manifest(cfg.input("manifest"))
    vocab = train_vocab(collection, cfg["vocab_size"], seed=cfg.seed, spare_lids=cfg["spare_lids"])
    out = cfg.prepare_out()
    vocab.save(out / "vocab.txt")
    print(f"vocabulary of {vocab.size} tokens ({len(vocab.merges)} merges) -> {out / 'vocab.txt'}")
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig) -> int:
    collection = load_manifest(cfg.input("manifest"))
    vocab = Vocabulary.load(cfg.input("vocab"))
    pair = split_pair(cfg["pair"]) if cfg["pair"] else ()
    langs = preset_languages(cfg["preset"], collection.languages, pair)
    mcfg = model_config(cfg, vocab)
    opt = OptimizerConfig(cfg["max_lr"], cfg["warmup"], cfg["steps"])
    noise = NoiseConfig(cfg["mask_ratio"], cfg["span_lambda"], cfg["permute"], cfg.seed)
    schedule = PretrainSchedule(token_budget=cfg["token_budget"], max_len=cfg["max_positions"],
                                label_smoothing=cfg["label_smoothing"],
                                checkpoint_interval=cfg["checkpoint_interval"] or None)
    model = init(mcfg, cfg.seed)
    out = cfg.prepare_out()
    if not langs:
        save_checkpoint(model, out / "final.ckpt", {"kind": "random", "step": 0})
        print(f"preset random: wrote initial weights to {out / 'final.ckpt'}")
        return EXIT_OK
    sub = CorpusCollection.of(collection.corpora[l] for l in langs).with_token_counts(vocab.encode)
    weights = rebalance(sub, cfg["alpha"])
    result = pretrain(model, sub, vocab, weights, noise, schedule, opt, cfg.seed, out_dir=out)
    save_checkpoint(model, out / "final.ckpt", {"kind": "pretrain", "step": cfg["steps"],
                                                 "languages": ",".join(langs)})
    write_curve(result.curve, out / "curve.tsv")
    st = result.pack_stats
    (out / "pack.tsv").write_text(f"instances\tsentences\ttruncated\n{st.instances}\t{st.sentences}\t{st.truncated}\n",
                                  encoding="utf-8")
    lam = " ".join(f"lambda[{l}]={x:.4f}" for l, x in weights.lambdas.items())
    print(f"pre-trained on {','.join(langs)} for {cfg['steps']} steps; final loss {result.curve[-1].loss:.4f}; {lam}")
    return EXIT_OK


def _finetune_run(cfg: RunConfig, vocab: Vocabulary, train: ParallelCorpus, valid: ParallelCorpus,
                  init_path: Path | None, out: Path | None, seed: int):
    model = load_model(init_path, vocab) if init_path is not None else init(model_config(cfg, vocab), seed)
    return finetune(model, train, valid, vocab, finetune_schedule(cfg), seed, out_dir=out)


def cmd_finetune(cfg: RunConfig) -> int:
    src, tgt = split_pair(cfg["pair"])
    vocab = Vocabulary.load(cfg.input("vocab"))
    train = load_parallel(cfg.input("train"), src, tgt)
    if cfg["train_pairs"]:
        train = train.subset(cfg["train_pairs"])
    valid = load_parallel(cfg.input("valid"), src, tgt)
    init_path = cfg.input("init", required=False)
    if init_path is not None:
        load_model(init_path, vocab)
    out = cfg.prepare_out()
    result = _finetune_run(cfg, vocab, train, valid, init_path, out, cfg.seed)
    write_curve(result.curve, out / "curve.tsv")
    write_curve(result.validation, out / "valid.tsv", VALID_HEADER)
    print(f"best validation NLL {result.best_nll:.4f} at step {result.best_step} -> {out / 'best.ckpt'}")
    return EXIT_OK


def cmd_translate(cfg: RunConfig) -> int:
    src, tgt = split_pair(cfg["pair"])
    vocab = Vocabulary.load(cfg.input("vocab"))
    model = load_model(cfg.input("checkpoint"), vocab)
    path = cfg.input("input")
    out = cfg.prepare_out()
    if cfg["documents"]:
        docs = parse_documents(path.read_text(encoding="utf-8"))
        results = translate_documents(model, vocab, docs, src, tgt, cfg["beam_size"], cfg["max_len"])
        blocks = ["\n".join(vocab.decode(s) for s in r.sentences) for r in results]
        (out / "hyps.txt").write_text("\n\n".join(blocks) + "\n", encoding="utf-8")
    else:
        hyps = translate(model, vocab, read_sources(path), src, tgt, cfg["beam_size"], cfg["max_len"],
                         length_penalty=cfg["length_penalty"])
        write_lines(out / "hyps.txt", hyps)
    print(f"translations -> {out / 'hyps.txt'}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    hyp_path, ref_path = cfg.input("hyp"), cfg.input("ref")
    out = cfg.prepare_out()
    if cfg["documents"]:
        hyp_docs = parse_documents(hyp_path.read_text(encoding="utf-8"))
        ref_docs = parse_documents(ref_path.read_text(encoding="utf-8"))
        report = document_report(hyp_docs, ref_docs, WHITESPACE)
        rows = [("d-bleu", report.d_bleu)] + ([("s-bleu", report.s_bleu)] if report.s_bleu is not None else [])
    else:
        rows = [("bleu", corpus_bleu(read_sources(hyp_path), read_refs(ref_path), WHITESPACE, cfg["smooth"]))]
    (out / "bleu.tsv").write_text(bleu_tsv(rows), encoding="utf-8")
    for name, r in rows:
        print(f"{name} = {r.as_record()}")
    return EXIT_OK


def cmd_bt(cfg: RunConfig) -> int:
    src, tgt = split_pair(cfg["pair"])
    vocab = Vocabulary.load(cfg.input("vocab"))
    model = load_model(cfg.input("checkpoint"), vocab)
    mono_src = load_monolingual(cfg.input("mono_src"), src)
    mono_tgt = load_monolingual(cfg.input("mono_tgt"), tgt)
    dev_path = cfg.input("dev", required=False)
    dev = [load_parallel(dev_path, src, tgt)] if dev_path is not None else []
    bcfg = bt_config(cfg)
    out = cfg.prepare_out()
    result = online_bt(model, mono_src, mono_tgt, vocab, bcfg, cfg.seed, dev=dev + [d.reversed() for d in dev])
    save_checkpoint(model, out / "final.ckpt", {"kind": "bt", "step": bcfg.total_updates})
    write_manifest(result.manifest, out / "manifest.tsv")
    (out / "bt.tsv").write_text(
        "updates\tcopy_warnings\tconstrained_tokens\tconstraint_violations\n"
        f"{len(result.losses)}\t{result.copy_warnings}\t{result.constrained_tokens}\t{result.constraint_violations}\n",
        encoding="utf-8")
    print(f"back-translation: {len(result.losses)} updates, {result.copy_warnings} copy warnings, "
          f"{result.constraint_violations} constraint violations")
    return EXIT_OK


def cmd_transfer(cfg: RunConfig) -> int:
    src, tgt = split_pair(cfg["pair"])
    vocab = Vocabulary.load(cfg.input("vocab"))
    model = load_model(cfg.input("checkpoint"), vocab)
    test = load_parallel(cfg.input("test"), src, tgt)
    bcfg = bt_config(cfg)
    if bcfg.total_updates == 0:
        out = cfg.prepare_out()
        report = language_transfer(model, test, vocab, cfg["beam_size"])
        (out / "transfer.tsv").write_text(f"system\tbleu\ntransfer\t{report.score:.4f}\n", encoding="utf-8")
        print(f"transfer BLEU {report.score:.2f}")
        return EXIT_OK
    mono_src = load_monolingual(cfg.input("mono_src"), src)
    mono_tgt = load_monolingual(cfg.input("mono_tgt"), tgt)
    pre_path = cfg.input("pretrained", required=False)
    pretrained = load_model(pre_path, vocab) if pre_path is not None else None
    out = cfg.prepare_out()
    combined, report = transfer_plus_bt(model, mono_src, mono_tgt, test, vocab, bcfg, cfg.seed, pretrained)
    save_checkpoint(combined, out / "combined.ckpt", {"kind": "transfer+bt", "step": bcfg.total_updates})
    (out / "transfer.tsv").write_text(report.as_tsv(), encoding="utf-8")
    print(" ".join(f"{k}={v:.2f}" for k, v in report.rows()))
    return EXIT_OK


def _plot(path: Path, series: dict[str, tuple[list[float], list[float]]], xlabel: str, ylabel: str,
          logx: bool = False) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, (xs, ys) in series.items():
        ax.plot(xs, ys, marker="o" if len(xs) < 20 else None, label=name)
    if logx:
        ax.set_xscale("log", base=2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def _read_tsv(path: Path) -> list[dict[str, str]]:
    lines = path.read_text(encoding="utf-8").splitlines()
    header = lines[0].split("\t")
    return [dict(zip(header, l.split("\t"))) for l in lines[1:] if l.strip()]


def _score(model: Seq2SeqModel, vocab: Vocabulary, test: ParallelCorpus, beam: int) -> float:
    hyps = translate(model, vocab, test.sources(), test.source_lang, test.target_lang, beam_size=beam)
    return corpus_bleu(hyps, test.targets()).score


def cmd_report(cfg: RunConfig) -> int:
    if not cfg["runs"] and not cfg["sweep"]:
        raise ConfigError("report needs --runs and/or --sweep")
    if cfg["sweep"] not in ("", "bitext", "steps"):
        raise ConfigError(f"unknown sweep {cfg['sweep']!r}; expected bitext or steps")
    run_dirs = [cfg.root / r.strip() if not Path(r.strip()).is_absolute() else Path(r.strip())
                for r in cfg["runs"].split(",") if r.strip()]
    for d in run_dirs:
        if not (d / "curve.tsv").is_file():
            raise MissingInput(f"report: {d} has no curve.tsv")
    sweep_inputs = {}
    if cfg["sweep"]:
        sweep_inputs = {k: cfg.input(k) for k in ("vocab", "train", "valid", "test")}
        if cfg["sweep"] == "bitext":
            sweep_inputs["init"] = cfg.input("init")
        else:
            sweep_inputs["checkpoints"] = cfg.input("checkpoints")
    out = cfg.prepare_out()

    if run_dirs:
        losses, valids, rows = {}, {}, ["run\tsteps\tfinal_loss\tbest_valid_nll"]
        for d in run_dirs:
            curve = _read_tsv(d / "curve.tsv")
            losses[d.name] = ([int(r["step"]) for r in curve], [float(r["loss"]) for r in curve])
            best = ""
            if (d / "valid.tsv").is_file():
                v = _read_tsv(d / "valid.tsv")
                valids[d.name] = ([int(r["step"]) for r in v], [float(r["valid_nll"]) for r in v])
                best = f"{min(valids[d.name][1]):.6f}"
            rows.append(f"{d.name}\t{len(curve)}\t{losses[d.name][1][-1]:.6f}\t{best}")
        write_lines(out / "curves.tsv", rows)
        _plot(out / "loss.png", losses, "update", "training loss")
        if valids:
            _plot(out / "valid.png", valids, "update", "validation NLL")
        print(f"curves of {len(run_dirs)} runs -> {out / 'curves.tsv'}")

    if cfg["sweep"]:
        src, tgt = split_pair(cfg["pair"])
        vocab = Vocabulary.load(sweep_inputs["vocab"])
        train = load_parallel(sweep_inputs["train"], src, tgt)
        valid = load_parallel(sweep_inputs["valid"], src, tgt)
        test = load_parallel(sweep_inputs["test"], src, tgt)
        if cfg["sweep"] == "bitext":
            sizes = [int(s) for s in cfg["sizes"].split(",") if s.strip()]
            if any(n > len(train) for n in sizes):
                raise CorpusError(f"sweep size {max(sizes)} exceeds the {len(train)} training pairs")
            rows = ["pairs\tpretrained\trandom\tgap"]
            pre, rnd = [], []
            for n in sizes:
                sub = train.subset(n)
                a = _score(_finetune_run(cfg, vocab, sub, valid, sweep_inputs["init"], None, cfg.seed).model,
                           vocab, test, cfg["beam_size"])
                b = _score(_finetune_run(cfg, vocab, sub, valid, None, None, cfg.seed).model,
                           vocab, test, cfg["beam_size"])
                pre.append(a)
                rnd.append(b)
                rows.append(f"{n}\t{a:.4f}\t{b:.4f}\t{a - b:.4f}")
                log.info("bitext %d: pretrained %.2f random %.2f", n, a, b)
            write_lines(out / "sweep_bitext.tsv", rows)
            _plot(out / "sweep_bitext.png", {"pretrained": (sizes, pre), "random": (sizes, rnd)},
                  "bitext pairs", "BLEU", logx=True)
            print("\n".join(rows))
        else:
            ckpts = sorted(sweep_inputs["checkpoints"].glob("step_*.ckpt"), key=lambda p: int(p.stem[5:]))
            if not ckpts:
                raise MissingInput(f"no step_<N>.ckpt files in {sweep_inputs['checkpoints']}")
            rows = ["pretrain_steps\tbleu"]
            xs, ys = [0], [_score(_finetune_run(cfg, vocab, train, valid, None, None, cfg.seed).model,
                                  vocab, test, cfg["beam_size"])]
            for p in ckpts:
                xs.append(int(p.stem[5:]))
                ys.append(_score(_finetune_run(cfg, vocab, train, valid, p, None, cfg.seed).model,
                                 vocab, test, cfg["beam_size"]))
            rows += [f"{x}\t{y:.4f}" for x, y in zip(xs, ys)]
            write_lines(out / "sweep_steps.tsv", rows)
            _plot(out / "sweep_steps.png", {"fine-tuned": (xs, ys)}, "pre-training steps", "BLEU")
            print("\n".join(rows))
    return EXIT_OK


HANDLERS: dict[str, Callable[[RunConfig], int]] = {
    "toy": cmd_toy,
    "train-vocab": cmd_train_vocab,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "translate": cmd_translate,
    "eval": cmd_eval,
    "bt": cmd_bt,
    "transfer": cmd_transfer,
    "report": cmd_report,
}


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, FileNotFoundError):
        return EXIT_MISSING
    if isinstance(exc, ModelError):
        return EXIT_SHAPE
    if isinstance(exc, TrainingDiverged):
        return EXIT_DIVERGED
    if isinstance(exc, (CorpusError, VocabError, EvalError, ProvenanceError, ValueError)):
        return EXIT_DATA
    return EXIT_ERROR


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = resolve(args.command, args)
        return HANDLERS[args.command](cfg)
    except Exception as exc:  # noqa: BLE001 - mapped to documented exit codes
        code = exit_code_for(exc)
        if code == EXIT_ERROR:
            log.exception("unexpected error")
        print(f"denoise-mt {args.command}: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
