"""Encoder-decoder transformer, smoothed NLL loss and checkpoint I/O.

Pre-norm layers with an extra layer norm on top of each stack, learned
positions, GELU feed-forward blocks, and one embedding table shared by the
encoder input, decoder input and output projection.
"""

from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CKPT_TAG = b"#denoise_mt-checkpoint v1\n"


class ModelError(ValueError):
    pass


class CheckpointError(ModelError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    enc_layers: int = 2
    dec_layers: int = 2
    d_model: int = 64
    heads: int = 4
    ffn_dim: int = 128
    dropout: float = 0.1
    final_layernorm: bool = True
    vocab_size: int = 1000
    max_positions: int = 128

    def __post_init__(self):
        for name in ("enc_layers", "dec_layers", "d_model", "heads", "ffn_dim", "vocab_size", "max_positions"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1")
        if self.d_model % self.heads:
            raise ModelError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must be in [0, 1)")


PAPER_SCALE = ModelConfig(enc_layers=12, dec_layers=12, d_model=1024, heads=16, ffn_dim=4096,
                          dropout=0.1, vocab_size=250_000, max_positions=1024)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def forward(self, x, memory, key_pad=None, causal=False):
        B, T, D = x.shape
        S = memory.shape[1]
        h, dk = self.heads, D // self.heads
        q = self.q_proj(x).view(B, T, h, dk).transpose(1, 2)
        k = self.k_proj(memory).view(B, S, h, dk).transpose(1, 2)
        v = self.v_proj(memory).view(B, S, h, dk).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(dk)
        if key_pad is not None:
            scores = scores.masked_fill(key_pad[:, None, None, :], float("-inf"))
        if causal:
            future = torch.ones(T, S, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(future, float("-inf"))
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, T, D)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, ffn_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(d_model, ffn_dim)
        self.fc2 = nn.Linear(ffn_dim, d_model)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.heads)
        self.self_attn_norm = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim)
        self.ffn_norm = nn.LayerNorm(cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, src_pad):
        h = self.self_attn_norm(x)
        x = x + self.dropout(self.self_attn(h, h, key_pad=src_pad))
        return x + self.dropout(self.ffn(self.ffn_norm(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.heads)
        self.self_attn_norm = nn.LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.heads)
        self.cross_attn_norm = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim)
        self.ffn_norm = nn.LayerNorm(cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, memory, src_pad):
        h = self.self_attn_norm(x)
        x = x + self.dropout(self.self_attn(h, h, causal=True))
        x = x + self.dropout(self.cross_attn(self.cross_attn_norm(x), memory, key_pad=src_pad))
        return x + self.dropout(self.ffn(self.ffn_norm(x)))


class Seq2SeqModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.embed_tokens = nn.Embedding(config.vocab_size, d)
        self.enc_positions = nn.Embedding(config.max_positions, d)
        self.dec_positions = nn.Embedding(config.max_positions, d)
        self.encoder_layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.enc_layers))
        self.decoder_layers = nn.ModuleList(DecoderLayer(config) for _ in range(config.dec_layers))
        if config.final_layernorm:
            self.encoder_norm = nn.LayerNorm(d)
            self.decoder_norm = nn.LayerNorm(d)
        self.embed_dropout = nn.Dropout(config.dropout)

    @property
    def output_projection(self) -> torch.Tensor:
        return self.embed_tokens.weight

    def set_dropout(self, p: float) -> None:
        for m in self.modules():
            if isinstance(m, nn.Dropout):
                m.p = p

    def _check_len(self, n: int, what: str) -> None:
        if n > self.config.max_positions:
            raise ModelError(f"{what} length {n} exceeds max_positions {self.config.max_positions}")

    def encode(self, src: torch.Tensor, src_pad: torch.Tensor) -> torch.Tensor:
        self._check_len(src.shape[1], "source")
        pos = torch.arange(src.shape[1], device=src.device)
        x = self.embed_dropout(self.embed_tokens(src) + self.enc_positions(pos))
        for layer in self.encoder_layers:
            x = layer(x, src_pad)
        if self.config.final_layernorm:
            x = self.encoder_norm(x)
        return x

    def decode(self, memory: torch.Tensor, src_pad: torch.Tensor, dec_in: torch.Tensor) -> torch.Tensor:
        self._check_len(dec_in.shape[1], "decoder input")
        pos = torch.arange(dec_in.shape[1], device=dec_in.device)
        x = self.embed_dropout(self.embed_tokens(dec_in) + self.dec_positions(pos))
        for layer in self.decoder_layers:
            x = layer(x, memory, src_pad)
        if self.config.final_layernorm:
            x = self.decoder_norm(x)
        return x @ self.embed_tokens.weight.t()

    def forward(self, src, src_pad, dec_in):
        return self.decode(self.encode(src, src_pad), src_pad, dec_in)


def init_bound(name: str, shape: Sequence[int], config: ModelConfig) -> tuple[float, float]:
    """Closed interval every freshly initialized entry of ``name`` lies in."""
    if name.endswith("norm.weight"):
        return (1.0, 1.0)
    if name.endswith(".bias"):
        return (0.0, 0.0)
    if "embed_tokens" in name or "positions" in name:
        a = math.sqrt(3.0 / config.d_model)
    else:
        fan_out, fan_in = shape
        a = math.sqrt(6.0 / (fan_in + fan_out))
    return (-a, a)


def init(config: ModelConfig, seed: int, dtype: torch.dtype = torch.float32) -> Seq2SeqModel:
    """Scaled-uniform weights, unit layer-norm gains, zero biases; deterministic in ``seed``."""
    model = Seq2SeqModel(config).to(dtype)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            lo, hi = init_bound(name, p.shape, config)
            if lo == hi:
                p.fill_(lo)
            else:
                p.copy_(torch.rand(p.shape, generator=gen, dtype=torch.float64) * (hi - lo) + lo)
    return model


@dataclass
class Batch:
    src: torch.Tensor
    src_pad: torch.Tensor
    dec_in: torch.Tensor
    target: torch.Tensor
    loss_mask: torch.Tensor

    @property
    def num_tokens(self) -> int:
        return int(self.loss_mask.sum())


def _pad(seqs: Sequence[Sequence[int]], pad: int) -> torch.Tensor:
    width = max(len(s) for s in seqs)
    out = torch.full((len(seqs), width), pad, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


def make_batch(triples: Sequence, pad: int) -> Batch:
    """Pad (source, decoder_input, target) triples, or objects carrying those fields."""
    srcs, decs, tgts = [], [], []
    for t in triples:
        if hasattr(t, "source"):
            s, d, g = t.source, t.decoder_input, t.target
        else:
            s, d, g = t
        if len(d) != len(g):
            raise ModelError("decoder input and target lengths differ")
        srcs.append(s)
        decs.append(d)
        tgts.append(g)
    src = _pad(srcs, pad)
    src_pad = torch.zeros_like(src, dtype=torch.bool)
    for i, s in enumerate(srcs):
        src_pad[i, len(s):] = True
    dec_in, target = _pad(decs, pad), _pad(tgts, pad)
    loss_mask = torch.zeros_like(target, dtype=torch.bool)
    for i, g in enumerate(tgts):
        loss_mask[i, :len(g)] = True
    return Batch(src, src_pad, dec_in, target, loss_mask)


def forward(model: Seq2SeqModel, batch: Batch) -> torch.Tensor:
    """Logits of shape (batch, target_len, vocab)."""
    for name, t in (("source", batch.src), ("decoder input", batch.dec_in)):
        if int(t.max()) >= model.config.vocab_size or int(t.min()) < 0:
            raise ModelError(f"{name} holds ids outside the vocabulary")
    return model(batch.src, batch.src_pad, batch.dec_in)


def smoothed_nll(logits: torch.Tensor, target: torch.Tensor, mask: torch.Tensor,
                 label_smoothing: float = 0.0, reduce: str = "mean") -> torch.Tensor:
    """Cross-entropy against (1 - eps) * one_hot + eps * uniform, over unmasked positions."""
    if not 0.0 <= label_smoothing < 1.0:
        raise ModelError("label_smoothing must be in [0, 1)")
    lprobs = F.log_softmax(logits, dim=-1)
    nll = -lprobs.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    if label_smoothing > 0:
        nll = (1.0 - label_smoothing) * nll - label_smoothing * lprobs.mean(-1)
    nll = nll.masked_fill(~mask, 0.0)
    if reduce == "sum":
        return nll.sum()
    return nll.sum() / mask.sum().clamp(min=1)


def smoothing_floor(vocab_size: int, label_smoothing: float) -> float:
    """Smallest attainable smoothed loss (entropy of the smoothed target)."""
    if label_smoothing == 0:
        return 0.0
    on = 1.0 - label_smoothing + label_smoothing / vocab_size
    off = label_smoothing / vocab_size
    return -(on * math.log(on) + (vocab_size - 1) * off * math.log(off))


def loss(model: Seq2SeqModel, batch: Batch, label_smoothing: float = 0.0) -> tuple[float, dict[str, np.ndarray]]:
    """Scalar loss and a gradient array for every named parameter."""
    model.zero_grad(set_to_none=True)
    value = smoothed_nll(forward(model, batch), batch.target, batch.loss_mask, label_smoothing)
    value.backward()
    grads = {}
    for name, p in model.named_parameters():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        grads[name] = g.detach().cpu().numpy().copy()
    model.zero_grad(set_to_none=True)
    return float(value.detach()), grads


# checkpoints ---------------------------------------------------------------

_DTYPES = {torch.float32: "f4", torch.float64: "f8"}


def save_checkpoint(model: Seq2SeqModel, path: str | Path | io.BufferedIOBase, meta: dict | None = None) -> None:
    """Header of ``key=value`` lines, a blank line, then named little-endian parameter blocks."""
    buf = io.BytesIO()
    buf.write(CKPT_TAG)
    for k, v in asdict(model.config).items():
        buf.write(f"{k}={v}\n".encode())
    for k, v in sorted((meta or {}).items()):
        buf.write(f"meta.{k}={v}\n".encode())
    buf.write(b"\n")
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        code = _DTYPES[tensor.dtype]
        shape = ",".join(str(s) for s in arr.shape)
        buf.write(f"{name} {code} {shape}\n".encode())
        buf.write(np.ascontiguousarray(arr, dtype="<" + code).tobytes())
    data = buf.getvalue()
    if isinstance(path, (str, Path)):
        Path(path).write_bytes(data)
    else:
        path.write(data)


def _parse_value(field_type, raw: str):
    if field_type in (bool, "bool"):
        return raw == "True"
    if field_type in (int, "int"):
        return int(raw)
    return float(raw)


def load_checkpoint(path: str | Path) -> tuple[Seq2SeqModel, dict[str, str]]:
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_TAG):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(CKPT_TAG)
    raw_cfg: dict[str, str] = {}
    meta: dict[str, str] = {}
    while True:
        end = data.index(b"\n", pos)
        line = data[pos:end].decode()
        pos = end + 1
        if not line:
            break
        key, _, value = line.partition("=")
        if key.startswith("meta."):
            meta[key[5:]] = value
        else:
            raw_cfg[key] = value
    types = {f.name: f.type for f in fields(ModelConfig)}
    try:
        config = ModelConfig(**{k: _parse_value(types[k], v) for k, v in raw_cfg.items()})
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad config header: {exc}") from exc
    model = Seq2SeqModel(config)
    expected = model.state_dict()
    state = {}
    dtype = torch.float32
    while pos < len(data):
        end = data.index(b"\n", pos)
        name, code, shape_s = data[pos:end].decode().split(" ")
        pos = end + 1
        shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
        if name not in expected:
            raise CheckpointError(f"{path}: unexpected parameter {name}")
        if tuple(expected[name].shape) != shape:
            raise CheckpointError(f"{path}: {name} has shape {shape}, config implies {tuple(expected[name].shape)}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * int(code[1])
        arr = np.frombuffer(data[pos:pos + nbytes], dtype="<" + code).reshape(shape)
        pos += nbytes
        dtype = torch.float64 if code == "f8" else torch.float32
        state[name] = torch.from_numpy(arr.copy())
    missing = set(expected) - set(state)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    model = model.to(dtype)
    model.load_state_dict(state)
    return model, meta


def clone(model: Seq2SeqModel) -> Seq2SeqModel:
    other = Seq2SeqModel(model.config).to(next(model.parameters()).dtype)
    other.load_state_dict(model.state_dict())
    return other
