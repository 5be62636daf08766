"""Neural building blocks shared by the speech BERT and the TTS models."""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import (DimensionError, Tensor, concat, conv1d, dropout, embedding_lookup,
                     layer_norm, parameter, softmax)


class DegenerateMaskError(ValueError):
    """An attention mask left some query row with nothing to attend to."""


class PoisonedGradientError(FloatingPointError):
    """Non-finite gradient or loss; the optimizer step was aborted."""


class CheckpointError(ValueError):
    pass


def xavier_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """Parameter container. Parameters and submodules are discovered from
    instance attributes in assignment order, which keeps names stable."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise CheckpointError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for n, p in own.items():
            if state[n].shape != p.shape:
                raise CheckpointError(f"{n}: shape {state[n].shape} != {p.shape}")
            p.data = np.array(state[n], dtype=np.float64, copy=True)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.W = parameter(xavier_uniform(rng, (d_out, d_in), d_in, d_out))
        self.b = parameter(np.zeros(d_out)) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"Linear expects width {self.d_in}, got {x.shape[-1]}")
        y = x @ self.W.T
        return y + self.b if self.b is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = parameter(np.ones(d))
        self.beta = parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator):
        self.fc1 = Linear(d_model, d_ff, rng)
        self.fc2 = Linear(d_ff, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).relu())


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator):
        self.table = parameter(xavier_uniform(rng, (num, dim), num, dim))
        self.num = num

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.num):
            raise IndexError(f"id out of range [0, {self.num})")
        return embedding_lookup(self.table, ids)


def sinusoid_table(length: int, d_model: int) -> np.ndarray:
    """Interleaved sin/cos table: column 2k is sin(pos / 10000^(2k/d)),
    column 2k+1 the matching cos."""
    if length < 1:
        raise ValueError("length must be >= 1")
    pos = np.arange(length, dtype=np.float64)[:, None]
    k = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, k / d_model)
    table = np.zeros((length, d_model))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return table


class ScaledPositionalEncoding(Module):
    def __init__(self, d_model: int, alpha: float = 1.0):
        self.alpha = parameter(np.array([alpha]))
        self.d_model = d_model

    def table(self, length: int) -> Tensor:
        return self.alpha * sinusoid_table(length, self.d_model)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.table(x.shape[0])


def scaled_positional_encoding(length: int, d_model: int, alpha: float) -> np.ndarray:
    return alpha * sinusoid_table(length, d_model)


def causal_mask(n: int) -> np.ndarray:
    """Boolean (n, n) mask, True where attention is allowed."""
    return np.tril(np.ones((n, n), dtype=bool))


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, heads: int, rng: np.random.Generator, dropout_rate: float = 0.0):
        if d_model % heads:
            raise DimensionError(f"d_model={d_model} not divisible by heads={heads}")
        self.Wq = Linear(d_model, d_model, rng)
        self.Wk = Linear(d_model, d_model, rng)
        self.Wv = Linear(d_model, d_model, rng)
        self.Wo = Linear(d_model, d_model, rng)
        self.heads = heads
        self.d_model = d_model
        self.dropout_rate = dropout_rate
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        return x.reshape(n, self.heads, self.d_model // self.heads).transpose(1, 0, 2)

    def __call__(self, query: Tensor, memory: Tensor, mask: np.ndarray | None = None,
                 rng: np.random.Generator | None = None) -> Tensor:
        n, m = query.shape[0], memory.shape[0]
        if query.shape[-1] != self.d_model or memory.shape[-1] != self.d_model:
            raise DimensionError("attention inputs must have width d_model")
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (n, m):
                raise DimensionError(f"mask shape {mask.shape} != {(n, m)}")
            if not mask.any(axis=1).all():
                bad = int(np.flatnonzero(~mask.any(axis=1))[0])
                raise DegenerateMaskError(f"attention mask row {bad} is fully masked")
        q, k, v = self._split(self.Wq(query)), self._split(self.Wk(memory)), self._split(self.Wv(memory))
        scores = (q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(self.d_model // self.heads))
        w = softmax(scores, axis=-1, mask=None if mask is None else mask[None])
        self.last_weights = w.data
        w = dropout(w, self.dropout_rate, rng)
        ctx = (w @ v).transpose(1, 0, 2).reshape(n, self.d_model)
        return self.Wo(ctx)


class EncoderLayer(Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, d_model: int, heads: int, d_ff: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, heads, rng)
        self.norm2 = LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff, rng)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, mask)
        return x + self.ff(self.norm2(x))


class DecoderLayer(Module):
    """Self-attention, cross-attention to a memory, feed-forward."""

    def __init__(self, d_model: int, heads: int, d_ff: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, heads, rng)
        self.norm2 = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, heads, rng)
        self.norm3 = LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff, rng)

    def __call__(self, x: Tensor, memory: Tensor, self_mask: np.ndarray | None = None) -> Tensor:
        h = self.norm1(x)
        x = x + self.self_attn(h, h, self_mask)
        x = x + self.cross_attn(self.norm2(x), memory)
        return x + self.ff(self.norm3(x))


class Prenet(Module):
    """Two affine+ReLU layers. Dropout here is the always-on kind used by
    autoregressive TTS decoders; it is only active when an rng is passed."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator, dropout_rate: float = 0.0):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)
        self.dropout_rate = dropout_rate

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        h = dropout(self.fc1(x).relu(), self.dropout_rate, rng)
        return dropout(self.fc2(h).relu(), self.dropout_rate, rng)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator):
        if kernel % 2 == 0:
            raise ValueError("kernel size must be odd for same padding")
        self.kernel = parameter(xavier_uniform(rng, (c_out, c_in, kernel), c_in * kernel, c_out * kernel))
        self.bias = parameter(np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d(x, self.kernel, self.bias)


class Postnet(Module):
    """Residual convolutional refinement: returns the correction only."""

    def __init__(self, n_mels: int, channels: int, layers: int, kernel: int, rng: np.random.Generator):
        if layers < 1:
            raise ValueError("postnet needs at least one layer")
        dims = [n_mels] + [channels] * (layers - 1) + [n_mels]
        self.convs = [Conv1d(dims[i], dims[i + 1], kernel, rng) for i in range(layers)]

    def __call__(self, x: Tensor) -> Tensor:
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = x.tanh()
        return x


# -- optimizer ---------------------------------------------------------------

class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.98),
                 eps: float = 1e-9, clip_norm: float | None = None):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        for p, g in zip(self.params, grads):
            if not np.all(np.isfinite(g)):
                raise PoisonedGradientError(f"non-finite gradient in parameter {p.name or p.shape}")
        if self.clip_norm is not None:
            total = np.sqrt(sum(float((g * g).sum()) for g in grads))
            if total > self.clip_norm:
                grads = [g * (self.clip_norm / total) for g in grads]
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"SBTC"
CKPT_VERSION = 1


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Little-endian: magic, version u32, count u32, then per tensor
    name length u32, UTF-8 name, rank u32, dims u32..., float64 payload."""
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d to 1-d
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if off + 8 * n > len(buf):
                raise CheckpointError("truncated checkpoint payload")
            out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(dims).astype(np.float64)
            off += 8 * n
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    if off != len(buf):
        raise CheckpointError(f"checkpoint length mismatch: {len(buf) - off} trailing bytes")
    return out


def concat_last(*xs: Tensor) -> Tensor:
    return concat(xs, axis=-1)
