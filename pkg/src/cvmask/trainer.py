"""Pretraining loop and frozen-encoder linear probes."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .model import VOMAE, ModelConfig, forward, make_batch, params_checksum
from .nn.tensor import NonFiniteError, Tensor, parameter
from .volatility import WeightMap, sample_mask

log = logging.getLogger(__name__)

VALID_SEED_SALT = 7919


@dataclass
class TrainConfig:
    lr: float = 1e-4
    warmup_steps: int = 1000
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 42
    policy: str = "cv"
    target_ratio: float = 0.25
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    clip_norm: float = 1.0

    def validate(self):
        if self.lr <= 0 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("lr, batch_size and patience must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        return self

    @classmethod
    def preset(cls, scale: str, **overrides) -> "TrainConfig":
        if scale == "paper":
            return cls(**overrides).validate()
        if scale == "desk":
            base = dict(lr=1e-2, warmup_steps=50, max_epochs=200)
            base.update(overrides)
            return cls(**base).validate()
        raise ValueError(f"unknown scale preset {scale!r}")


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    seconds: list = field(default_factory=list)
    convergence_epoch: int = 0
    best_val_loss: float = float("inf")
    epochs_run: int = 0
    stopped_early: bool = False
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        # wall-clock lives only in the per-epoch CSV so the JSON is reproducible
        doc = asdict(self)
        doc.pop("seconds")
        return doc

    def write(self, out_dir, stem="train_report", extra=None) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        doc = self.to_json()
        if extra:
            doc.update(extra)
        jpath = out_dir / f"{stem}.json"
        jpath.write_text(json.dumps(doc, indent=2, sort_keys=True))
        cpath = out_dir / f"{stem}_epochs.csv"
        with open(cpath, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "lr", "seconds"])
            for i in range(self.epochs_run):
                w.writerow([i + 1, repr(self.train_loss[i]), repr(self.val_loss[i]), repr(self.lr[i]),
                            _secs(self.seconds, i)])
        return jpath, cpath


def _secs(seconds, i):
    # epochs replayed from a checkpoint have no timing
    return f"{seconds[i]:.3f}" if i < len(seconds) and seconds[i] is not None else ""


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""
    params: dict
    opt: nn.OptimizerState
    report: TrainReport
    best_params: dict
    epochs_done: int = 0
    bad_epochs: int = 0

    def save(self, path, model_cfg: ModelConfig, train_cfg: TrainConfig):
        arrays = {f"param.{k}": v.data for k, v in self.params.items()}
        arrays.update({f"best.{k}": v for k, v in self.best_params.items()})
        arrays.update({f"opt_m.{k}": v for k, v in self.opt.m.items()})
        arrays.update({f"opt_v.{k}": v for k, v in self.opt.v.items()})
        extra = {"model_config": model_cfg.to_json(), "train_config": asdict(train_cfg),
                 "opt_step": self.opt.step, "epochs_done": self.epochs_done, "bad_epochs": self.bad_epochs,
                 "report": self.report.to_json()}
        return nn.save_arrays(path, arrays, extra=extra)

    @classmethod
    def load(cls, path) -> tuple["TrainState", ModelConfig, TrainConfig]:
        arrays, man = nn.load_arrays(path)

        def section(prefix):
            n = len(prefix) + 1
            return {k[n:]: v for k, v in arrays.items() if k.startswith(prefix + ".")}

        params = {k: parameter(v, name=k) for k, v in section("param").items()}
        opt = nn.OptimizerState(section("opt_m"), section("opt_v"), man["opt_step"])
        report = TrainReport(**man["report"])
        # checkpoints carry no wall-clock so they stay byte-reproducible
        report.seconds = [None] * report.epochs_run
        state = cls(params, opt, report, section("best"), man["epochs_done"],
                    man["bad_epochs"])
        return state, ModelConfig(**man["model_config"]), TrainConfig(**man["train_config"])


def lr_at(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup to ``base_lr`` over ``warmup_steps``, then constant."""
    if step < 1:
        raise ValueError("step counts from 1")
    if warmup_steps <= 0 or step >= warmup_steps:
        return base_lr
    return base_lr * step / warmup_steps


def sample_plans(seqs, weights: np.ndarray, target_ratio: float, seed_key) -> list:
    """One MaskPlan per sequence, seeded by ``(*seed_key, index)``."""
    key = list(seed_key)
    return [sample_mask(s, weights, target_ratio, np.random.default_rng(key + [i])) for i, s in enumerate(seqs)]


def masked_mse(model: VOMAE, seqs, plans) -> float:
    preds = model.predict(seqs, plans)
    err = np.concatenate([p - s.values()[pl.mask] for p, s, pl in zip(preds, seqs, plans)])
    return float(np.mean(err**2))


def pretrain(train_seqs, valid_seqs, weights: WeightMap, train_cfg: TrainConfig, model_cfg: ModelConfig,
             state: TrainState | None = None, max_epochs_this_call: int | None = None,
             checkpoint_path=None) -> tuple[VOMAE, TrainReport, TrainState]:
    """Pretrain a VO-MAE on normalised sequences with masks drawn from ``weights``.

    Returns the best-validation model, the report, and the resumable state.
    """
    train_cfg.validate()
    if not train_seqs or not valid_seqs:
        raise ValueError("pretraining needs non-empty train and validation splits")
    seed = train_cfg.seed
    w = weights.array(model_cfg.vocab_size)
    if state is None:
        model = VOMAE(model_cfg, seed=seed)
        report = TrainReport(config={"train": asdict(train_cfg), "model": model_cfg.to_json(),
                                     "policy": weights.policy, "weights_cv75": weights.cv75})
        state = TrainState(model.params, nn.OptimizerState(), report,
                           {k: v.data.copy() for k, v in model.params.items()})
    params, report = state.params, state.report
    model = VOMAE(model_cfg, params, batch_size=train_cfg.batch_size)
    val_plans = sample_plans(valid_seqs, w, train_cfg.target_ratio, [seed, VALID_SEED_SALT])
    n = len(train_seqs)
    stop_at = train_cfg.max_epochs if max_epochs_this_call is None else min(
        train_cfg.max_epochs, state.epochs_done + max_epochs_this_call)

    while state.epochs_done < stop_at and state.bad_epochs < train_cfg.patience:
        epoch = state.epochs_done + 1
        t0 = time.perf_counter()
        plans = sample_plans(train_seqs, w, train_cfg.target_ratio, [seed, epoch])
        order = np.random.default_rng([seed, epoch, 0]).permutation(n)
        losses, sizes = [], []
        for bi, start in enumerate(range(0, n, train_cfg.batch_size)):
            idx = order[start:start + train_cfg.batch_size]
            batch = make_batch([train_seqs[i] for i in idx], [plans[i] for i in idx])
            out = forward(params, model_cfg, batch, rng=np.random.default_rng([seed, epoch, bi + 1, 1]))
            if not np.isfinite(out.loss.data):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {bi}")
            grads = nn.backward(out.loss, params, allow_unused=True)
            grads, _ = nn.clip_grad_norm(grads, train_cfg.clip_norm)
            lr = lr_at(state.opt.step + 1, train_cfg.lr, train_cfg.warmup_steps)
            nn.adamw_step(params, grads, state.opt, lr, train_cfg.beta1, train_cfg.beta2, train_cfg.eps,
                          train_cfg.weight_decay)
            losses.append(float(out.loss.data))
            sizes.append(len(idx))
        val = masked_mse(model, valid_seqs, val_plans)
        report.train_loss.append(float(np.average(losses, weights=sizes)))
        report.val_loss.append(val)
        report.lr.append(lr)
        report.seconds.append(time.perf_counter() - t0)
        report.epochs_run = epoch
        if val < report.best_val_loss:
            report.best_val_loss = val
            report.convergence_epoch = epoch
            state.best_params = {k: v.data.copy() for k, v in params.items()}
            state.bad_epochs = 0
        else:
            state.bad_epochs += 1
        state.epochs_done = epoch
        log.info("epoch %d train %.5f val %.5f (best %d)", epoch, report.train_loss[-1], val,
                 report.convergence_epoch)
        if checkpoint_path is not None:
            state.save(checkpoint_path, model_cfg, train_cfg)
    report.stopped_early = state.bad_epochs >= train_cfg.patience
    best = VOMAE(model_cfg, {k: parameter(v.copy(), name=k) for k, v in state.best_params.items()},
                 batch_size=train_cfg.batch_size)
    return best, report, state


# linear probes -------------------------------------------------------------

@dataclass
class ProbeConfig:
    lr: float = 1e-4
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    weight_decay: float = 0.01
    standardize: bool = True
    n_boot: int = 1000


@dataclass
class ProbeResult:
    weight: np.ndarray
    bias: float
    scores: np.ndarray
    labels: np.ndarray
    auroc: float
    auprc: float
    auroc_ci: tuple
    auprc_ci: tuple
    encoder_checksum: str

    def to_json(self) -> dict:
        return {"auroc": self.auroc, "auprc": self.auprc, "auroc_ci": list(self.auroc_ci),
                "auprc_ci": list(self.auprc_ci), "n_eval": int(self.labels.size),
                "n_pos": int(self.labels.sum()), "pooling": "mean", "encoder_checksum": self.encoder_checksum}


def fit_logistic_probe(x_train, y_train, cfg: ProbeConfig):
    """Single linear layer trained with AdamW on the logistic loss."""
    y_train = np.asarray(y_train, dtype=np.float64)
    if np.unique(y_train).size < 2:
        raise ValueError("probe labels contain a single class; AUROC is undefined")
    d = x_train.shape[1]
    params = {"w": parameter(np.zeros((d, 1)), name="w"), "b": parameter(np.zeros(1), name="b")}
    opt = nn.OptimizerState()
    n = len(y_train)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits = nn.linear(Tensor(x_train[idx]), params["w"], params["b"])
            loss = nn.bce_with_logits(logits, y_train[idx])
            grads = nn.backward(loss, params)
            nn.adamw_step(params, grads, opt, cfg.lr, weight_decay=cfg.weight_decay)
    return params["w"].data[:, 0].copy(), float(params["b"].data[0])


def probe_features(encoder, seqs) -> np.ndarray:
    return encoder.pooled(seqs) if hasattr(encoder, "pooled") else np.asarray(encoder(seqs))


def train_linear_probe(encoder, train_seqs, train_labels, eval_seqs, eval_labels,
                       cfg: ProbeConfig | None = None) -> ProbeResult:
    """Fit a probe on frozen pooled encoder features and score it on the eval set.

    ``encoder`` is a VOMAE (mean-pooled latents) or any callable mapping
    sequences to a feature matrix.
    """
    from .evalkit.stats import auprc, auroc, bootstrap_ci

    cfg = cfg or ProbeConfig()
    eval_labels = np.asarray(eval_labels, dtype=np.int64)
    if np.unique(eval_labels).size < 2:
        raise ValueError("evaluation labels contain a single class; AUROC is undefined")
    before = params_checksum(encoder.params) if hasattr(encoder, "params") else ""
    xtr = probe_features(encoder, train_seqs)
    xev = probe_features(encoder, eval_seqs)
    if cfg.standardize:
        mu, sd = xtr.mean(axis=0), xtr.std(axis=0)
        sd = np.where(sd > 1e-12, sd, 1.0)
        xtr, xev = (xtr - mu) / sd, (xev - mu) / sd
    w, b = fit_logistic_probe(xtr, train_labels, cfg)
    scores = xev @ w + b
    after = params_checksum(encoder.params) if hasattr(encoder, "params") else ""
    if before != after:
        raise RuntimeError("probe training modified the frozen encoder")
    return ProbeResult(w, b, scores, eval_labels, auroc(scores, eval_labels), auprc(scores, eval_labels),
                       bootstrap_ci(auroc, scores, eval_labels, cfg.n_boot, cfg.seed)[1:],
                       bootstrap_ci(auprc, scores, eval_labels, cfg.n_boot, cfg.seed)[1:], after)
