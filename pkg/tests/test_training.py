import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from denoise_mt import toy
from denoise_mt.corpus import CorpusCollection, rebalance
from denoise_mt.decoding import translate
from denoise_mt.model import ModelConfig, clone, init, load_checkpoint, smoothing_floor
from denoise_mt.noising import NoiseConfig
from denoise_mt.training import (FinetuneSchedule, OptimizerConfig, PretrainSchedule, TrainingDiverged,
                                 batches_by_length, finetune, lr_at, make_optimizer, pair_example,
                                 parallel_examples, pretrain, preset_languages, validation_nll)
from conftest import SMALL_MODEL

COPY = NoiseConfig(mask_ratio=0.0, permute_sentences=False)


def states_equal(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


def english(toy_pair, n, seed):
    world, langs, _, vocab = toy_pair
    return CorpusCollection.of([toy.monolingual(langs["en"], world, n, seed=seed)]).with_token_counts(vocab.encode)


class TestSchedule:
    def test_examples(self):
        cfg = OptimizerConfig(1e-3, 100, 200)
        assert lr_at(cfg, 0) == 0.0
        assert lr_at(cfg, 100) == 1e-3
        assert lr_at(cfg, 150) == pytest.approx(5e-4, abs=1e-15)
        assert lr_at(cfg, 200) == 0.0

    @pytest.mark.parametrize("warmup,total", [(0, 10), (10, 10), (11, 10)])
    def test_invalid_warmup(self, warmup, total):
        with pytest.raises(ValueError):
            OptimizerConfig(1e-3, warmup, total)

    def test_invalid_lr(self):
        with pytest.raises(ValueError):
            OptimizerConfig(0.0, 1, 2)

    def test_paper_defaults(self):
        cfg = OptimizerConfig(1e-3, 1, 2)
        assert (cfg.beta1, cfg.beta2, cfg.epsilon, cfg.weight_decay) == (0.9, 0.98, 1e-6, 0.0)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(1e-6, 1.0), st.integers(1, 500), st.integers(1, 500))
    def test_piecewise_linear(self, max_lr, warmup, extra):
        cfg = OptimizerConfig(max_lr, warmup, warmup + extra)
        values = [lr_at(cfg, s) for s in range(cfg.total_steps + 1)]
        assert max(values) == values[warmup] == max_lr
        assert all(0.0 <= v <= max_lr for v in values)
        # constant slope on each piece, so second differences vanish away from the kink
        second = np.diff(values, 2)
        second[warmup - 1] = 0.0
        assert np.abs(second).max() <= 1e-12 * max(1.0, max_lr * 1e3)
        # continuity at the kink
        assert lr_at(cfg, warmup + 1e-9) == pytest.approx(max_lr, rel=1e-6)

    def test_dropout_stages(self):
        s = PretrainSchedule()
        assert [s.dropout_at(k, 100) for k in (0, 49, 50, 79, 80, 99)] == [0.1, 0.1, 0.05, 0.05, 0.0, 0.0]

    @pytest.mark.parametrize("stages", [((0.1, 0.1),), ((0.0, 0.1), (0.5, 0.0), (0.5, 0.0)),
                                        ((0.0, 0.1), (1.0, 0.0))])
    def test_bad_stages(self, stages):
        with pytest.raises(ValueError):
            PretrainSchedule(dropout_stages=stages)

    def test_finetune_defaults(self):
        s = FinetuneSchedule()
        assert (s.dropout, s.label_smoothing, s.warmup, s.max_lr, s.max_updates) == (0.3, 0.2, 2500, 3e-5, 40_000)
        assert FinetuneSchedule.high_resource().max_updates == 100_000


class TestAdam:
    def test_matches_scalar_reference(self):
        # loss = 0.5 * a * (x - c)^2 with a one-parameter module
        a, c, x0 = 3.0, -1.5, 2.0
        module = torch.nn.Module()
        module.x = torch.nn.Parameter(torch.tensor([x0], dtype=torch.float64))
        cfg = OptimizerConfig(0.05, 10, 100)
        opt = make_optimizer(module, cfg)
        x, m, v = x0, 0.0, 0.0
        for t in range(1, 101):
            lr = lr_at(cfg, t)
            for g in opt.param_groups:
                g["lr"] = lr
            opt.zero_grad()
            (0.5 * a * (module.x - c) ** 2).sum().backward()
            opt.step()
            grad = a * (x - c)
            m = cfg.beta1 * m + (1 - cfg.beta1) * grad
            v = cfg.beta2 * v + (1 - cfg.beta2) * grad * grad
            m_hat = m / (1 - cfg.beta1 ** t)
            v_hat = v / (1 - cfg.beta2 ** t)
            x -= lr * m_hat / (math.sqrt(v_hat) + cfg.epsilon)
            assert float(module.x.detach()) == pytest.approx(x, abs=1e-10)


class TestPretrain:
    def test_denoising_loss_drops(self, toy_pair):
        _, _, _, vocab = toy_pair
        corpus = english(toy_pair, 50, 9)
        cfg = ModelConfig(vocab_size=vocab.size, **SMALL_MODEL)
        r = pretrain(init(cfg, 0), corpus, vocab, rebalance(corpus, 0.7), NoiseConfig(),
                     PretrainSchedule(token_budget=512, max_len=64), OptimizerConfig(3e-3, 50, 500), seed=0)
        assert len(r.curve) == 500
        assert r.curve[-1].loss < 0.2 * r.curve[0].loss

    def test_copy_task(self, copy_model, toy_pair):
        result, corpus = copy_model
        vocab = toy_pair[3]
        assert result.curve[-1].loss < 0.1
        sents = corpus.sentences()
        hyps = translate(result.model, vocab, sents, "en", "en", beam_size=1)
        assert sum(h == s for h, s in zip(hyps, sents)) / len(sents) >= 0.95

    def test_reaches_smoothing_floor(self, toy_pair):
        vocab = toy_pair[3]
        corpus = english(toy_pair, 10, 9)
        cfg = ModelConfig(enc_layers=1, dec_layers=1, d_model=32, heads=4, ffn_dim=64, vocab_size=vocab.size,
                          max_positions=64)
        r = pretrain(init(cfg, 0), corpus, vocab, rebalance(corpus, 0.7), COPY,
                     PretrainSchedule(token_budget=512, max_len=64), OptimizerConfig(1e-3, 30, 400), seed=0)
        assert r.curve[-1].loss < smoothing_floor(vocab.size, 0.1) + 0.05

    def test_deterministic_and_checkpoints(self, toy_pair, tmp_path):
        _, _, collection, vocab = toy_pair
        cfg = ModelConfig(enc_layers=1, dec_layers=1, d_model=16, heads=2, ffn_dim=32, vocab_size=vocab.size,
                          max_positions=64)
        sched = PretrainSchedule(token_budget=256, max_len=64, checkpoint_interval=5)
        opt = OptimizerConfig(1e-3, 3, 10)
        w = rebalance(collection, 0.7)
        a = pretrain(init(cfg, 1), collection, vocab, w, NoiseConfig(), sched, opt, 7, tmp_path / "a")
        b = pretrain(init(cfg, 1), collection, vocab, w, NoiseConfig(), sched, opt, 7, tmp_path / "b")
        assert [r.loss for r in a.curve] == [r.loss for r in b.curve]
        assert [p.name for p in a.checkpoints] == ["step_5.ckpt", "step_10.ckpt"]
        assert (tmp_path / "a/step_10.ckpt").read_bytes() == (tmp_path / "b/step_10.ckpt").read_bytes()
        c = pretrain(init(cfg, 1), collection, vocab, w, NoiseConfig(), sched, opt, 8)
        assert [r.loss for r in a.curve] != [r.loss for r in c.curve]

    def test_curve_follows_schedules(self, toy_pair):
        _, _, collection, vocab = toy_pair
        cfg = ModelConfig(enc_layers=1, dec_layers=1, d_model=16, heads=2, ffn_dim=32, vocab_size=vocab.size,
                          max_positions=64)
        opt = OptimizerConfig(1e-3, 4, 10)
        r = pretrain(init(cfg, 1), collection, vocab, rebalance(collection, 0.7), NoiseConfig(),
                     PretrainSchedule(token_budget=256, max_len=64), opt, 0)
        assert [row.dropout for row in r.curve] == [0.1] * 5 + [0.05] * 3 + [0.0] * 2
        assert [row.lr for row in r.curve] == [lr_at(opt, s) for s in range(1, 11)]
        assert r.model.training is True or all(m.p == 0.0 for m in r.model.modules()
                                               if isinstance(m, torch.nn.Dropout))

    def test_divergence_aborts(self, toy_pair):
        _, _, collection, vocab = toy_pair
        cfg = ModelConfig(enc_layers=1, dec_layers=1, d_model=16, heads=2, ffn_dim=32, vocab_size=vocab.size,
                          max_positions=64)
        m = init(cfg, 0)
        with torch.no_grad():
            m.embed_tokens.weight.fill_(float("nan"))
        with pytest.raises(TrainingDiverged, match="step 1"):
            pretrain(m, collection, vocab, rebalance(collection, 0.7), NoiseConfig(),
                     PretrainSchedule(token_budget=256, max_len=64), OptimizerConfig(1e-3, 1, 2), 0)

    def test_missing_language_id(self, small_vocab):
        coll = CorpusCollection.of([toy.monolingual(toy.make_languages(toy.make_world(), ["fr"])["fr"],
                                                    toy.make_world(), 5, 0)])
        coll = coll.with_token_counts(small_vocab.encode)
        cfg = ModelConfig(enc_layers=1, dec_layers=1, d_model=16, heads=2, ffn_dim=32,
                          vocab_size=small_vocab.size, max_positions=64)
        with pytest.raises(Exception, match="fr"):
            pretrain(init(cfg, 0), coll, small_vocab, rebalance(coll, 0.7), NoiseConfig(), PretrainSchedule(),
                     OptimizerConfig(1e-3, 1, 2), 0)


@pytest.fixture(scope="module")
def splits(toy_pair):
    world, langs, _, _ = toy_pair
    return toy.parallel_splits(langs["xx"], langs["en"], world, {"train": 128, "valid": 50}, seed=3)


class TestFinetune:
    def schedule(self, **kw):
        base = dict(dropout=0.1, label_smoothing=0.1, warmup=10, max_lr=3e-3, max_updates=80, token_budget=512,
                    valid_interval=5)
        return FinetuneSchedule(**{**base, **kw})

    def test_pretrained_reaches_thresholds_sooner(self, pretrained_toy, toy_pair, splits):
        model, cfg = pretrained_toy
        vocab = toy_pair[3]
        pre = finetune(clone(model), splits["train"], splits["valid"], vocab, self.schedule(), 0)
        rnd = finetune(init(cfg, 0), splits["train"], splits["valid"], vocab, self.schedule(), 0)

        def first_step(result, threshold):
            return next((r.step for r in result.validation if r.valid_nll <= threshold), math.inf)

        thresholds = [r.valid_nll for r in rnd.validation[1:]]
        assert thresholds
        for th in thresholds:
            assert first_step(pre, th) < first_step(rnd, th)
        assert pre.best_nll < rnd.best_nll

    def test_zero_updates_returns_input(self, pretrained_toy, toy_pair, splits):
        model, _ = pretrained_toy
        r = finetune(clone(model), splits["train"], splits["valid"], toy_pair[3], self.schedule(max_updates=0), 0)
        assert states_equal(r.model, model)
        assert r.best_step == 0 and r.curve == []

    def test_argmin_law_and_files(self, toy_pair, splits, tmp_path):
        vocab = toy_pair[3]
        cfg = ModelConfig(enc_layers=1, dec_layers=1, d_model=16, heads=2, ffn_dim=32, vocab_size=vocab.size,
                          max_positions=64)
        r = finetune(init(cfg, 0), splits["train"], splits["valid"], vocab,
                     self.schedule(max_updates=30, valid_interval=10), 0, tmp_path)
        assert [v.step for v in r.validation] == [0, 10, 20, 30]
        examples = parallel_examples(vocab, splits["valid"], 64)
        best = validation_nll(r.model, examples, vocab.pad)
        final = validation_nll(r.final_model, examples, vocab.pad)
        assert best == pytest.approx(r.best_nll, abs=1e-9)
        assert best <= final
        saved, meta = load_checkpoint(tmp_path / "best.ckpt")
        assert states_equal(saved, r.model) and meta["step"] == str(r.best_step)

    def test_deterministic(self, toy_pair, splits):
        vocab = toy_pair[3]
        cfg = ModelConfig(enc_layers=1, dec_layers=1, d_model=16, heads=2, ffn_dim=32, vocab_size=vocab.size,
                          max_positions=64)
        runs = [finetune(init(cfg, 0), splits["train"], splits["valid"], vocab, self.schedule(max_updates=10, warmup=3), 4)
                for _ in range(2)]
        assert [c.loss for c in runs[0].curve] == [c.loss for c in runs[1].curve]
        assert states_equal(runs[0].model, runs[1].model)

    def test_empty_validation(self, toy_pair, splits, tiny_model):
        with pytest.raises(ValueError, match="validation"):
            finetune(tiny_model, splits["train"], None, toy_pair[3], self.schedule(), 0)

    def test_instance_format(self, small_vocab):
        ex = pair_example(small_vocab, "the cat", "a dog", "en", "de", 64)
        en, de = small_vocab.lid("en"), small_vocab.lid("de")
        assert ex.source == (*small_vocab.encode("the cat"), small_vocab.eos, en)
        assert ex.target == (*small_vocab.encode("a dog"), small_vocab.eos, de)
        assert ex.decoder_input == (de, *ex.target[:-1])

    def test_batches_cover_epoch(self, toy_pair, splits):
        examples = parallel_examples(toy_pair[3], splits["train"], 64)
        batches = batches_by_length(examples, np.random.default_rng(0), 300, 8)
        flat = [id(e) for b in batches for e in b]
        assert sorted(flat) == sorted(id(e) for e in examples)
        for b in batches:
            width = max(max(len(e.source), len(e.target)) for e in b)
            assert len(b) <= 8 and (len(b) == 1 or len(b) * width <= 300)


class TestPresets:
    LANGS = ["de", "en", "fr", "ja"]

    def test_mbart_all(self):
        assert preset_languages("mbart", self.LANGS) == ["de", "en", "fr", "ja"]

    def test_mbart_k_keeps_pair(self):
        assert preset_languages("mbart2", self.LANGS, ("ja", "en")) == ["ja", "en"]
        assert preset_languages("mbart3", self.LANGS, ("ja", "en")) == ["ja", "en", "de"]

    def test_bart_mono(self):
        assert preset_languages("bart-mono", self.LANGS, ("fr", "en")) == ["fr"]
        assert preset_languages("bart-mono:ja", self.LANGS) == ["ja"]

    def test_random(self):
        assert preset_languages("random", self.LANGS) == []

    @pytest.mark.parametrize("name", ["mbart5", "mbart0", "bart-mono:xx", "t5"])
    def test_invalid(self, name):
        with pytest.raises(ValueError):
            preset_languages(name, self.LANGS)
