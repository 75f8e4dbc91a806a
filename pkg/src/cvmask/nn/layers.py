from __future__ import annotations

import numpy as np

from .tensor import Tensor, add, gelu, layer_norm, matmul, mul, reshape, scale, softmax, transpose


class ConfigError(ValueError):
    pass


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def sinusoidal_embed(t, dim: int) -> np.ndarray:
    """Interleaved (sin, cos) time features; ``t`` may be a scalar or an array."""
    if dim % 2:
        raise ConfigError(f"sinusoidal embedding needs an even dim, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    freq = 1.0 / 10000.0 ** (2.0 * np.arange(dim // 2) / dim)
    ang = t[..., None] * freq
    out = np.empty(t.shape + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or p <= 0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, keep)


def drop_path(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Zero whole residual branches per sample (leading axis)."""
    if rng is None or p <= 0:
        return x
    shape = (x.shape[0],) + (1,) * (x.data.ndim - 1)
    keep = (rng.random(shape) >= p) / (1.0 - p)
    return mul(x, keep)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, n, d = x.shape
    return transpose(reshape(x, (b, n, n_heads, d // n_heads)), (0, 2, 1, 3))


def multi_head_attention(q_in: Tensor, kv_in: Tensor | None, p: dict, n_heads: int,
                         key_mask=None, qk_norm=False, mode="self") -> Tensor:
    """Bidirectional scaled dot-product attention.

    ``p`` holds ``wq, wk, wv, wo`` (and biases ``bq, bk, bv, bo``); with
    ``qk_norm`` it also holds ``q_gain, k_gain`` applied after per-head
    layer normalisation. ``key_mask`` is a (batch, n_keys) boolean array of
    attendable keys.
    """
    if mode == "self":
        kv_in = q_in
    elif kv_in is None:
        raise ConfigError("cross attention needs kv_in")
    b, nq, d = q_in.shape
    if d % n_heads:
        raise ConfigError(f"model dim {d} not divisible by {n_heads} heads")
    hd = d // n_heads
    q = _split_heads(linear(q_in, p["wq"], p.get("bq")), n_heads)
    k = _split_heads(linear(kv_in, p["wk"], p.get("bk")), n_heads)
    v = _split_heads(linear(kv_in, p["wv"], p.get("bv")), n_heads)
    if qk_norm:
        q = layer_norm(q, p["q_gain"])
        k = layer_norm(k, p["k_gain"])
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    mask = None
    if key_mask is not None:
        mask = np.asarray(key_mask, dtype=bool)[:, None, None, :]
    attn = softmax(scores, axis=-1, mask=mask)
    ctx = transpose(matmul(attn, v), (0, 2, 1, 3))
    ctx = reshape(ctx, (b, nq, d))
    return linear(ctx, p["wo"], p.get("bo"))


def feed_forward(x: Tensor, p: dict, drop=0.0, rng=None) -> Tensor:
    h = gelu(linear(x, p["w1"], p["b1"]))
    h = dropout(h, drop, rng)
    return linear(h, p["w2"], p["b2"])


def init_linear(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out))
