import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from denoise_mt.model import (PAPER_SCALE, CheckpointError, ModelConfig, ModelError, clone, forward, init,
                              init_bound, load_checkpoint, loss, make_batch, save_checkpoint, smoothed_nll,
                              smoothing_floor)
from oracles import finite_difference_check

TINY = ModelConfig(enc_layers=2, dec_layers=2, d_model=8, heads=2, ffn_dim=16, dropout=0.0,
                   vocab_size=11, max_positions=12)


def random_batch(rng, vocab_size, b=3, t_src=(3, 7), t_tgt=(2, 6), pad=0):
    triples = []
    for _ in range(b):
        s = rng.integers(1, vocab_size, size=int(rng.integers(*t_src))).tolist()
        g = rng.integers(1, vocab_size, size=int(rng.integers(*t_tgt))).tolist()
        triples.append((s, [1] + g[:-1], g))
    return make_batch(triples, pad)


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ModelError):
            ModelConfig(d_model=10, heads=4)

    @pytest.mark.parametrize("field", ["enc_layers", "dec_layers", "d_model", "heads", "ffn_dim", "vocab_size",
                                       "max_positions"])
    def test_counts_positive(self, field):
        with pytest.raises(ModelError):
            ModelConfig(**{field: 0})

    def test_large_preset(self):
        c = PAPER_SCALE
        assert (c.enc_layers, c.dec_layers, c.d_model, c.heads) == (12, 12, 1024, 16)
        assert c.final_layernorm


class TestInit:
    def test_deterministic(self):
        a, b = init(TINY, 3), init(TINY, 3)
        for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.equal(p, q), n

    def test_seed_matters(self):
        assert not torch.equal(init(TINY, 0).embed_tokens.weight, init(TINY, 1).embed_tokens.weight)

    def test_embedding_shape(self):
        m = init(ModelConfig(vocab_size=100, d_model=8, heads=2), 0)
        assert tuple(m.embed_tokens.weight.shape) == (100, 8)

    def test_within_bounds(self):
        m = init(TINY, 0)
        for name, p in m.named_parameters():
            lo, hi = init_bound(name, p.shape, TINY)
            assert lo <= float(p.detach().min()) and float(p.detach().max()) <= hi, name
            assert torch.isfinite(p).all()
            if name.endswith(".bias"):
                assert not p.any()

    def test_final_layernorm_flag(self):
        assert hasattr(init(TINY, 0), "encoder_norm")
        off = ModelConfig(**{**TINY.__dict__, "final_layernorm": False})
        assert not hasattr(init(off, 0), "encoder_norm")


class TestForward:
    def test_shape(self, rng):
        m = init(TINY, 0)
        batch = random_batch(rng, TINY.vocab_size)
        assert tuple(forward(m, batch).shape) == (3, batch.target.shape[1], TINY.vocab_size)

    def test_overlong_raises(self):
        m = init(TINY, 0)
        batch = make_batch([(list(range(1, 11)) * 2, [1, 2], [2, 3])], 0)
        with pytest.raises(ModelError):
            forward(m, batch)

    def test_out_of_vocab_raises(self):
        m = init(TINY, 0)
        with pytest.raises(ModelError):
            forward(m, make_batch([([1, 99], [1], [2])], 0))

    def test_length_mismatch_raises(self):
        with pytest.raises(ModelError):
            make_batch([([1, 2], [1, 2], [2])], 0)

    def test_batch_masks(self):
        b = make_batch([([5, 6, 7], [1, 2], [2, 3]), ([5], [1, 2, 3], [2, 3, 4])], 0)
        assert b.src_pad.tolist() == [[False] * 3, [False, True, True]]
        assert b.loss_mask.tolist() == [[True, True, False], [True] * 3]
        assert b.num_tokens == 5

    @pytest.mark.parametrize("seed", range(3))
    def test_causality(self, seed):
        rng = np.random.default_rng(seed)
        m = init(TINY, seed).double()
        m.eval()
        src = torch.tensor([rng.integers(1, 11, size=6).tolist()])
        pad = torch.zeros_like(src, dtype=torch.bool)
        dec = torch.tensor([rng.integers(1, 11, size=8).tolist()])
        base = m(src, pad, dec)
        for t in range(8):
            other = dec.clone()
            other[0, t] = (other[0, t] % 10) + 1
            out = m(src, pad, other)
            assert torch.allclose(out[0, :t], base[0, :t], atol=1e-5, rtol=0)
            assert not torch.allclose(out[0, t:], base[0, t:], atol=1e-5, rtol=0)

    @pytest.mark.parametrize("seed", range(3))
    def test_source_padding_invariance(self, seed):
        rng = np.random.default_rng(seed)
        m = init(TINY, seed)
        m.eval()
        s = rng.integers(1, 11, size=5).tolist()
        dec = torch.tensor([rng.integers(1, 11, size=4).tolist()])
        a = m(torch.tensor([s]), torch.zeros(1, 5, dtype=torch.bool), dec)
        b = m(torch.tensor([s + [0, 0, 0]]), torch.tensor([[False] * 5 + [True] * 3]), dec)
        assert torch.allclose(a, b, atol=1e-5, rtol=0)

    def test_batched_equals_single(self, rng):
        m = init(TINY, 0)
        m.eval()
        batch = random_batch(rng, TINY.vocab_size)
        full = forward(m, batch)
        for i in range(3):
            n_s = int((~batch.src_pad[i]).sum())
            n_t = int(batch.loss_mask[i].sum())
            one = m(batch.src[i:i + 1, :n_s], batch.src_pad[i:i + 1, :n_s], batch.dec_in[i:i + 1, :n_t])
            assert torch.allclose(one[0], full[i, :n_t], atol=1e-5)

    def test_softmax_rows_sum_to_one(self, rng):
        m = init(TINY, 0)
        probs = forward(m, random_batch(rng, TINY.vocab_size)).softmax(-1)
        assert torch.allclose(probs.sum(-1), torch.ones(probs.shape[:2]), atol=1e-6)

    def test_dropout_only_in_training(self, rng):
        cfg = ModelConfig(**{**TINY.__dict__, "dropout": 0.5})
        m = init(cfg, 0)
        batch = random_batch(rng, cfg.vocab_size)
        m.eval()
        assert torch.equal(forward(m, batch), forward(m, batch))
        m.train()
        torch.manual_seed(0)
        assert not torch.equal(forward(m, batch), forward(m, batch))


class TestLoss:
    def test_uniform_logits_give_log_v(self):
        v = 37
        logits = torch.zeros(2, 5, v)
        target = torch.randint(0, v, (2, 5))
        value = smoothed_nll(logits, target, torch.ones(2, 5, dtype=torch.bool))
        assert float(value) == pytest.approx(math.log(v), abs=1e-6)

    def test_large_margin_tends_to_zero(self):
        target = torch.tensor([[1, 2, 3]])
        values = []
        for margin in (1.0, 5.0, 20.0, 50.0):
            logits = torch.zeros(1, 3, 6).scatter(-1, target.unsqueeze(-1), margin)
            values.append(float(smoothed_nll(logits, target, torch.ones(1, 3, dtype=torch.bool))))
        assert values == sorted(values, reverse=True)
        assert values[-1] < 1e-12

    def test_mask_excludes_positions(self):
        logits = torch.randn(1, 4, 5)
        target = torch.tensor([[0, 1, 2, 3]])
        mask = torch.tensor([[True, True, False, False]])
        assert float(smoothed_nll(logits, target, mask)) == pytest.approx(
            float(smoothed_nll(logits[:, :2], target[:, :2], mask[:, :2])), abs=1e-6)

    def test_smoothing_formula(self):
        logits = torch.randn(2, 3, 7, dtype=torch.float64)
        target = torch.randint(0, 7, (2, 3))
        mask = torch.ones(2, 3, dtype=torch.bool)
        eps = 0.2
        lp = torch.log_softmax(logits, -1)
        q = torch.full_like(lp, eps / 7).scatter_add(-1, target.unsqueeze(-1), torch.full((2, 3, 1), 1 - eps,
                                                                                        dtype=torch.float64))
        expected = float(-(q * lp).sum(-1).mean())
        assert float(smoothed_nll(logits, target, mask, eps)) == pytest.approx(expected, abs=1e-12)

    def test_smoothing_floor_attained(self):
        v, eps = 9, 0.1
        on = 1 - eps + eps / v
        logits = torch.full((1, 1, v), math.log(eps / v), dtype=torch.float64)
        logits[0, 0, 4] = math.log(on)
        value = float(smoothed_nll(logits, torch.tensor([[4]]), torch.ones(1, 1, dtype=torch.bool), eps))
        assert value == pytest.approx(smoothing_floor(v, eps), abs=1e-12)

    @pytest.mark.parametrize("eps", [-0.1, 1.0])
    def test_smoothing_range(self, eps):
        with pytest.raises(ModelError):
            smoothed_nll(torch.zeros(1, 1, 3), torch.tensor([[0]]), torch.ones(1, 1, dtype=torch.bool), eps)

    def test_gradients_for_every_parameter(self, rng):
        m = init(TINY, 0)
        value, grads = loss(m, random_batch(rng, TINY.vocab_size), 0.1)
        assert math.isfinite(value)
        assert set(grads) == {n for n, _ in m.named_parameters()}
        assert all(np.isfinite(g).all() for g in grads.values())
        assert all(p.grad is None for p in m.parameters())

    def test_finite_differences_sampled(self, rng):
        m = init(TINY, 5, dtype=torch.float64)
        batch = random_batch(rng, TINY.vocab_size)
        worst, where = finite_difference_check(
            m, lambda mm: smoothed_nll(forward(mm, batch), batch.target, batch.loss_mask, 0.1),
            entries=12, rng=rng)
        assert worst < 1e-3, where

    def test_tied_embeddings(self, rng):
        m = init(TINY, 0)
        assert m.output_projection.data_ptr() == m.embed_tokens.weight.data_ptr()
        names = [n for n, _ in m.named_parameters()]
        assert sum("embed_tokens" in n for n in names) == 1
        with torch.no_grad():
            m.output_projection[3] += 1.0
        assert torch.equal(m.embed_tokens.weight[3], m.output_projection[3])


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, rng):
        m = init(TINY, 0)
        save_checkpoint(m, tmp_path / "m.ckpt", {"step": 7})
        back, meta = load_checkpoint(tmp_path / "m.ckpt")
        assert back.config == TINY and meta == {"step": "7"}
        batch = random_batch(rng, TINY.vocab_size)
        m.eval(), back.eval()
        assert torch.equal(forward(m, batch), forward(back, batch))

    def test_bytes_deterministic(self, tmp_path):
        save_checkpoint(init(TINY, 1), tmp_path / "a")
        save_checkpoint(init(TINY, 1), tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_float64_roundtrip(self, tmp_path):
        m = init(TINY, 0, dtype=torch.float64)
        save_checkpoint(m, tmp_path / "m")
        back, _ = load_checkpoint(tmp_path / "m")
        assert back.embed_tokens.weight.dtype == torch.float64
        assert torch.equal(back.embed_tokens.weight, m.embed_tokens.weight)

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x").write_bytes(b"hello")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x")

    def test_shape_mismatch(self, tmp_path):
        save_checkpoint(init(TINY, 0), tmp_path / "m")
        data = (tmp_path / "m").read_bytes().replace(b"vocab_size=11", b"vocab_size=12", 1)
        (tmp_path / "m").write_bytes(data)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "m")

    def test_clone_is_independent(self):
        m = init(TINY, 0)
        c = clone(m)
        with torch.no_grad():
            c.embed_tokens.weight.zero_()
        assert m.embed_tokens.weight.abs().sum() > 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_logits_finite_for_any_valid_batch(seed):
    rng = np.random.default_rng(seed)
    m = init(TINY, seed % 7)
    assert torch.isfinite(forward(m, random_batch(rng, TINY.vocab_size))).all()
