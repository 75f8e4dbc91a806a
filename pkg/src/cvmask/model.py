"""Value-only masked autoencoder over (time, code, value) triplets.

Masked events stay in the encoder input with their value term removed, so
time, code and type remain visible. Decoder queries (a shared mask token
plus the event's time and code) cross-attend over every encoder output and
a linear head reads out the value.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .nn.layers import ConfigError, init_linear
from .nn.tensor import Tensor, add, gather, layer_norm, mul, parameter, reshape, scale

TYPE_VALUE = 0
TYPE_NO_VALUE = 1
N_TYPES = 2


@dataclass
class ModelConfig:
    vocab_size: int
    d_model_enc: int = 32
    n_layers_enc: int = 2
    n_heads_enc: int = 4
    d_model_dec: int = 16
    n_layers_dec: int = 1
    n_heads_dec: int = 2
    mlp_ratio: float = 4.0
    dropout: float = 0.1
    drop_path: float = 0.1
    layer_scale: float = 0.1
    qk_norm: bool = True
    max_len: int = 512
    lam: float = 0.1

    def validate(self):
        for d, h, which in ((self.d_model_enc, self.n_heads_enc, "encoder"),
                            (self.d_model_dec, self.n_heads_dec, "decoder")):
            if h < 1 or d % h:
                raise ConfigError(f"{which} d_model {d} not divisible by {h} heads")
        if self.d_model_enc % 2:
            raise ConfigError("encoder d_model must be even for the sinusoidal time embedding")
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be >= 1")
        return self

    @classmethod
    def preset(cls, scale: str, vocab_size: int, **overrides) -> "ModelConfig":
        dims = {"desk": (32, 2, 4, 16, 1, 2), "paper": (256, 8, 8, 128, 4, 4)}
        if scale not in dims:
            raise ConfigError(f"unknown scale preset {scale!r}")
        names = ("d_model_enc", "n_layers_enc", "n_heads_enc", "d_model_dec", "n_layers_dec", "n_heads_dec")
        kw = dict(zip(names, dims[scale]))
        kw.update(overrides)
        return cls(vocab_size, **kw).validate()

    def to_json(self) -> dict:
        return asdict(self)


# parameters ----------------------------------------------------------------

def _attn_params(rng, d, prefix, qk_norm, n_heads):
    p = {}
    for k in "qkvo":
        p[f"{prefix}.w{k}"] = init_linear(rng, d, d)
        p[f"{prefix}.b{k}"] = np.zeros(d)
    if qk_norm:
        p[f"{prefix}.q_gain"] = np.ones(d // n_heads)
        p[f"{prefix}.k_gain"] = np.ones(d // n_heads)
    return p


def _block_params(rng, d, hidden, prefix, n_heads, qk_norm, layer_scale=None):
    p = {f"{prefix}.ln1_g": np.ones(d), f"{prefix}.ln1_b": np.zeros(d),
         f"{prefix}.ln2_g": np.ones(d), f"{prefix}.ln2_b": np.zeros(d),
         f"{prefix}.mlp.w1": init_linear(rng, d, hidden), f"{prefix}.mlp.b1": np.zeros(hidden),
         f"{prefix}.mlp.w2": init_linear(rng, hidden, d), f"{prefix}.mlp.b2": np.zeros(d)}
    p.update(_attn_params(rng, d, f"{prefix}.attn", qk_norm, n_heads))
    if layer_scale is not None:
        p[f"{prefix}.ls1"] = np.full(d, layer_scale)
        p[f"{prefix}.ls2"] = np.full(d, layer_scale)
    return p


def init_params(cfg: ModelConfig, seed=0) -> dict[str, Tensor]:
    cfg.validate()
    rng = np.random.default_rng(seed)
    de, dd = cfg.d_model_enc, cfg.d_model_dec
    p = {
        "code_emb": rng.normal(0.0, 1.0, size=(cfg.vocab_size, de)),
        "value_w": rng.normal(0.0, 1.0, size=(1, de)),
        "value_b": np.zeros(de),
        "type_emb": rng.normal(0.0, 0.5, size=(N_TYPES, de)),
    }
    for i in range(cfg.n_layers_enc):
        p.update(_block_params(rng, de, int(de * cfg.mlp_ratio), f"enc{i}", cfg.n_heads_enc, cfg.qk_norm,
                               cfg.layer_scale))
    if cfg.n_layers_enc:
        p["enc_norm_g"], p["enc_norm_b"] = np.ones(de), np.zeros(de)
    p["enc2dec_w"] = init_linear(rng, de, dd)
    p["enc2dec_b"] = np.zeros(dd)
    p["mask_token"] = rng.normal(0.0, 0.02, size=dd)
    for i in range(cfg.n_layers_dec):
        p.update(_block_params(rng, dd, int(dd * cfg.mlp_ratio), f"dec{i}", cfg.n_heads_dec, False))
    p["dec_norm_g"], p["dec_norm_b"] = np.ones(dd), np.zeros(dd)
    p["head_w"] = init_linear(rng, dd, 1)
    p["head_b"] = np.zeros(1)
    p["vis_head_w"] = init_linear(rng, de, 1)
    p["vis_head_b"] = np.zeros(1)
    return {k: parameter(v, name=k) for k, v in p.items()}


def params_checksum(params: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(getattr(params[k], "data", params[k])).tobytes())
    return h.hexdigest()


def _sub(params, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


# batching ------------------------------------------------------------------

@dataclass
class BatchInput:
    time: np.ndarray      # (B, L)
    code: np.ndarray      # (B, L) int
    value: np.ndarray     # (B, L), 0 where absent
    present: np.ndarray   # (B, L) bool, value-bearing real events
    real: np.ndarray      # (B, L) bool, False on padding
    masked: np.ndarray    # (B, L) bool

    @property
    def visible(self) -> np.ndarray:
        return self.present & ~self.masked & self.real


def make_batch(seqs, plans=None) -> BatchInput:
    """Right-pad sequences into arrays; ``plans`` are MaskPlans (or None for no masking)."""
    B = len(seqs)
    L = max(1, max(len(s) for s in seqs))
    time = np.zeros((B, L))
    code = np.zeros((B, L), dtype=np.int64)
    value = np.zeros((B, L))
    present = np.zeros((B, L), dtype=bool)
    real = np.zeros((B, L), dtype=bool)
    masked = np.zeros((B, L), dtype=bool)
    for i, s in enumerate(seqs):
        n = len(s)
        time[i, :n] = s.times()
        code[i, :n] = s.codes()
        v = s.values()
        present[i, :n] = ~np.isnan(v)
        value[i, :n] = np.nan_to_num(v, nan=0.0)
        real[i, :n] = True
        if plans is not None and plans[i] is not None:
            masked[i, :n] = plans[i].mask
    if np.any(masked & ~present):
        raise ValueError("mask plan selects an event without a value")
    return BatchInput(time, code, value, present, real, masked)


# forward -------------------------------------------------------------------

def embed_triplets(batch: BatchInput, params, cfg: ModelConfig) -> Tensor:
    if np.any(batch.code[batch.real] >= cfg.vocab_size) or np.any(batch.code < 0):
        raise ValueError("code outside the model vocabulary")
    show = batch.present & ~batch.masked & batch.real
    vals = np.where(show, batch.value, 0.0)[..., None]
    value_term = mul(nn.linear(Tensor(vals), params["value_w"], params["value_b"]), show[..., None].astype(float))
    types = np.where(batch.present | ~batch.real, TYPE_VALUE, TYPE_NO_VALUE)
    e = add(Tensor(nn.sinusoidal_embed(batch.time, cfg.d_model_enc)), gather(params["code_emb"], batch.code))
    e = add(e, value_term)
    return add(e, gather(params["type_emb"], types))


def _block(x, p, n_heads, key_mask, cfg, rng, kv=None, qk_norm=False, layer_scale=True):
    h = layer_norm(x, p["ln1_g"], p["ln1_b"])
    mode = "self" if kv is None else "cross"
    a = nn.multi_head_attention(h, kv, _sub(p, "attn"), n_heads, key_mask=key_mask, qk_norm=qk_norm, mode=mode)
    if layer_scale:
        a = mul(a, p["ls1"])
    x = add(x, nn.drop_path(nn.dropout(a, cfg.dropout, rng), cfg.drop_path if layer_scale else 0.0, rng))
    h = nn.feed_forward(layer_norm(x, p["ln2_g"], p["ln2_b"]), _sub(p, "mlp"), cfg.dropout, rng)
    if layer_scale:
        h = mul(h, p["ls2"])
    return add(x, nn.drop_path(nn.dropout(h, cfg.dropout, rng), cfg.drop_path if layer_scale else 0.0, rng))


def encode(emb: Tensor, real: np.ndarray, params, cfg: ModelConfig, rng=None) -> Tensor:
    """Pre-norm self-attention stack; ``rng`` enables dropout/drop-path (training)."""
    x = emb
    for i in range(cfg.n_layers_enc):
        x = _block(x, _sub(params, f"enc{i}"), cfg.n_heads_enc, real, cfg, rng, qk_norm=cfg.qk_norm)
    if cfg.n_layers_enc:
        x = layer_norm(x, params["enc_norm_g"], params["enc_norm_b"])
    return x


def decode(latents: Tensor, batch: BatchInput, params, cfg: ModelConfig, rng=None) -> Tensor:
    """Predicted (normalised) values at masked positions, row-major over (batch, position)."""
    B, L = batch.masked.shape
    counts = batch.masked.sum(axis=1)
    if counts.sum() == 0:
        raise ValueError("decode needs at least one masked position")
    Q = int(counts.max())
    pos = np.zeros((B, Q), dtype=np.int64)
    qmask = np.zeros((B, Q), dtype=bool)
    for b in range(B):
        idx = np.flatnonzero(batch.masked[b])
        pos[b, :idx.size] = idx
        qmask[b, :idx.size] = True
    rows = np.arange(B)[:, None]
    qt, qc = batch.time[rows, pos], batch.code[rows, pos]
    ctx = add(Tensor(nn.sinusoidal_embed(qt, cfg.d_model_enc)), gather(params["code_emb"], qc))
    q = add(nn.linear(ctx, params["enc2dec_w"], params["enc2dec_b"]), params["mask_token"])
    kv = nn.linear(latents, params["enc2dec_w"], params["enc2dec_b"])
    for i in range(cfg.n_layers_dec):
        q = _block(q, _sub(params, f"dec{i}"), cfg.n_heads_dec, batch.real, cfg, rng, kv=kv, layer_scale=False)
    q = layer_norm(q, params["dec_norm_g"], params["dec_norm_b"])
    out = nn.linear(q, params["head_w"], params["head_b"])
    flat = reshape(out, (B * Q,))
    return gather(flat, np.flatnonzero(qmask.reshape(-1)))


def visible_head(latents: Tensor, batch: BatchInput, params) -> Tensor | None:
    B, L, d = latents.shape
    idx = np.flatnonzero(batch.visible.reshape(-1))
    if idx.size == 0:
        return None
    h = gather(reshape(latents, (B * L, d)), idx)
    return reshape(nn.linear(h, params["vis_head_w"], params["vis_head_b"]), (idx.size,))


def vo_mae_loss(pred_masked: Tensor, targets_masked, pred_visible: Tensor | None = None,
                targets_visible=None, lam=0.1) -> tuple[Tensor, float, float]:
    """Masked MSE plus ``lam`` times visible-value MSE; returns (total, masked, unmasked)."""
    lm = nn.mse(pred_masked, targets_masked)
    if pred_visible is None or pred_visible.data.size == 0:
        return lm, float(lm.data), 0.0
    lu = nn.mse(pred_visible, targets_visible)
    return add(lm, scale(lu, lam)), float(lm.data), float(lu.data)


@dataclass
class ForwardOut:
    loss: Tensor
    masked_mse: float
    unmasked_mse: float
    pred_masked: np.ndarray
    latents: Tensor = field(repr=False)


def forward(params, cfg: ModelConfig, batch: BatchInput, rng=None) -> ForwardOut:
    emb = embed_triplets(batch, params, cfg)
    lat = encode(emb, batch.real, params, cfg, rng)
    pm = decode(lat, batch, params, cfg, rng)
    pv = visible_head(lat, batch, params)
    loss, lm, lu = vo_mae_loss(pm, batch.value[batch.masked], pv, batch.value[batch.visible], cfg.lam)
    return ForwardOut(loss, lm, lu, pm.data, lat)


class VOMAE:
    """Parameters plus config with inference helpers used by evaluation."""

    def __init__(self, cfg: ModelConfig, params=None, seed=0, batch_size=32):
        self.cfg = cfg.validate()
        self.params = params if params is not None else init_params(cfg, seed)
        self.batch_size = batch_size

    def predict(self, seqs, plans) -> list[np.ndarray]:
        """Normalised predictions at each plan's masked positions (eval mode)."""
        out = []
        for i in range(0, len(seqs), self.batch_size):
            chunk, cplans = seqs[i:i + self.batch_size], plans[i:i + self.batch_size]
            batch = make_batch(chunk, cplans)
            lat = encode(embed_triplets(batch, self.params, self.cfg), batch.real, self.params, self.cfg)
            pred = decode(lat, batch, self.params, self.cfg).data
            counts = batch.masked.sum(axis=1)
            out.extend(np.split(pred, np.cumsum(counts)[:-1]))
        return out

    def pooled(self, seqs) -> np.ndarray:
        """Mean encoder latent over real positions, values fully visible."""
        feats = []
        for i in range(0, len(seqs), self.batch_size):
            batch = make_batch(seqs[i:i + self.batch_size])
            lat = encode(embed_triplets(batch, self.params, self.cfg), batch.real, self.params, self.cfg).data
            w = batch.real[..., None].astype(float)
            feats.append((lat * w).sum(axis=1) / w.sum(axis=1))
        return np.concatenate(feats, axis=0)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def save(self, path, extra=None):
        doc = {"model_config": self.cfg.to_json()}
        if extra:
            doc.update(extra)
        return nn.save_arrays(path, self.arrays(), extra=doc)

    @classmethod
    def load(cls, path) -> "VOMAE":
        arrays, manifest = nn.load_arrays(path)
        cfg = ModelConfig(**manifest["model_config"])
        return cls(cfg, {k: parameter(v, name=k) for k, v in arrays.items()})


def config_hash(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()[:16]
