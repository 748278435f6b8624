"""Training of the LSTM rate model: masked MSE, BPTT, Adam and the
best-validation training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import kernels
from .dataset import Dataset
from .lstm import GATES, OUTPUT_ORDER, LstmParams

log = logging.getLogger(__name__)

# order of the stacked parameter arrays handled by the optimiser
PARAM_NAMES = ("wu", "wh", "b", "fc_w", "fc_b")
# L2 is applied to weights only, biases are not decayed
_DECAY = (True, True, False, True, False)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 2000
    mini_batch: int = 512
    lr0: float = 0.02
    lr_drop_factor: float = 0.25
    lr_drop_period: int = 500
    l2: float = 0.1
    grad_clip: float = 1.0
    val_frequency: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    hidden_dim: int = 8
    decimate: int = 10          # raw 100 Hz records per training step
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < 0 or self.mini_batch < 1 or self.lr_drop_period < 1:
            raise ValueError("max_epochs >= 0, mini_batch >= 1 and lr_drop_period >= 1 required")
        if not 0 < self.lr_drop_factor < 1:
            raise ValueError("lr_drop_factor must lie in (0, 1)")
        if min(self.lr0, self.grad_clip, self.adam_eps) <= 0 or self.l2 < 0:
            raise ValueError("lr0, grad_clip and adam_eps must be positive, l2 non-negative")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.val_frequency < 1 or self.hidden_dim < 1 or self.decimate < 1:
            raise ValueError("val_frequency, hidden_dim and decimate must be >= 1")

    @classmethod
    def full_profile(cls, **overrides) -> "TrainConfig":
        """Full-length schedule (10000 epochs)."""
        return cls(**{"max_epochs": 10000, **overrides})

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        d = json.loads(Path(path).read_text())
        if d.pop("profile", "desk") == "full":
            d.setdefault("max_epochs", 10000)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# Data handling

def split_dataset(d: Dataset, ratio: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Sequence-level shuffled split into (train, val)."""
    if len(d) == 0:
        raise ValueError("cannot split an empty dataset")
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(d))
    n_train = int(round(ratio * len(d)))
    n_train = min(max(n_train, 1), len(d) - 1) if len(d) > 1 else 1
    train = [d.sequences[k] for k in sorted(order[:n_train])]
    val = [d.sequences[k] for k in sorted(order[n_train:])]
    return Dataset(train, "train"), Dataset(val, "val")


def mse_loss(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.lr0 * (1.0 - cfg.lr_drop_factor) ** (epoch // cfg.lr_drop_period)


# ---------------------------------------------------------------------------
# Optimiser pieces

class AdamMoments(NamedTuple):
    m: tuple
    v: tuple

    @classmethod
    def zeros_like(cls, params) -> "AdamMoments":
        return cls(tuple(np.zeros_like(p) for p in params), tuple(np.zeros_like(p) for p in params))


def clip_gradients(grads, threshold: float):
    """Rescale so the global L2 norm does not exceed ``threshold``."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm <= threshold:
        return [np.array(g, dtype=np.float64) for g in grads]
    scale = threshold / norm
    return [g * scale for g in grads]


def adam_step(params, grads, moments: AdamMoments, cfg: TrainConfig, iteration: int,
              lr: float | None = None, decay=None):
    """One bias-corrected Adam update with classic L2 added to the gradient.

    ``decay`` selects which arrays receive the L2 term (all by default).
    Returns ``(params', moments')``; inputs are not modified.
    """
    if iteration < 1:
        raise ValueError("iteration counts from 1")
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    lr = cfg.lr0 if lr is None else lr
    decay = (True,) * len(params) if decay is None else decay
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** iteration
    c2 = 1.0 - b2 ** iteration
    new_p, new_m, new_v = [], [], []
    for p, g, m, v, dec in zip(params, grads, moments.m, moments.v, decay):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged("non-finite gradient")
        if dec and cfg.l2:
            g = g + cfg.l2 * p
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamMoments(tuple(new_m), tuple(new_v))


# ---------------------------------------------------------------------------
# Gradients and prediction in physical units

def _as_batch(inputs, targets=None, mask=None):
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    y = None
    if targets is not None:
        y = np.asarray(targets, dtype=np.float64)
        y = y[None] if single else y
        if y.shape[:2] != x.shape[:2]:
            raise ValueError("inputs and targets differ in length")
    if mask is None:
        mask = np.ones(x.shape[:2])
    else:
        mask = np.asarray(mask, dtype=np.float64)
        mask = mask[None] if single else mask
    return x, y, mask


def _unstack_grads(p: LstmParams, grads) -> dict:
    dwu, dwh, db, dfcw, dfcb = grads
    nh = p.hidden_dim
    out = {}
    for q, g in enumerate(GATES):
        sl = slice(q * nh, (q + 1) * nh)
        out[f"w_u_{g}"] = dwu[sl]
        out[f"w_h_{g}"] = dwh[sl]
        out[f"b_{g}"] = db[sl]
    out["fc_w"] = dfcw
    out["fc_b"] = dfcb
    return out


def bptt_gradients(p: LstmParams, inputs, targets, mask=None) -> tuple[float, dict]:
    """Masked MSE of the predicted rates and its exact gradient.

    ``inputs`` (T, 4) or (B, T, 4) in physical units, ``targets`` matching
    (.., 2). The recurrence starts from a zero state for each sequence.
    Returns ``(loss, grads)`` with ``grads`` keyed by LstmParams field.
    """
    x, y, mask = _as_batch(inputs, targets, mask)
    if x.shape[1] == 0:
        raise ValueError("sequence must be non-empty")
    xn = np.ascontiguousarray((x - p.norm_mean) / p.norm_std)
    loss, _, *grads = kernels.seq_loss_grad(*p.stacked, xn, np.ascontiguousarray(y),
                                            np.ascontiguousarray(mask))
    if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
        raise TrainingDiverged("non-finite loss or gradient in BPTT")
    return float(loss), _unstack_grads(p, grads)


def predict(p: LstmParams, inputs) -> np.ndarray:
    """Rates over a sequence (T, 4) or batch (B, T, 4) from a zero state."""
    x, _, _ = _as_batch(inputs)
    xn = np.ascontiguousarray((x - p.norm_mean) / p.norm_std)
    out = kernels.seq_predict(*p.stacked, xn)
    return out[0] if np.ndim(inputs) == 2 else out


# ---------------------------------------------------------------------------
# Metrics and reporting

class OutputMetrics(NamedTuple):
    mae: float
    rmse: float
    nrmse: float      # RMSE / (max(target) - min(target)); NaN when the range is zero


def evaluate_metrics(p: LstmParams, d_test: Dataset) -> dict:
    """Per-output MAE, RMSE and range-normalised RMSE over all test records."""
    if len(d_test) == 0 or d_test.n_records == 0:
        raise ValueError("test set is empty")
    pred = np.concatenate([predict(p, s.inputs) for s in d_test.sequences])
    _, target = d_test.stacked()
    return metrics_from_predictions(pred, target)


def metrics_from_predictions(pred, target) -> dict:
    err = np.asarray(pred) - np.asarray(target)
    out = {}
    for k, name in enumerate(OUTPUT_ORDER):
        span = float(np.max(target[:, k]) - np.min(target[:, k]))
        rmse = float(np.sqrt(np.mean(err[:, k] ** 2)))
        if span == 0.0:
            log.warning("target %s has zero range; NRMSE undefined", name)
            nrmse = math.nan
        else:
            nrmse = rmse / span
        out[name] = OutputMetrics(float(np.mean(np.abs(err[:, k]))), rmse, nrmse)
    return out


@dataclass
class TrainReport:
    train_iterations: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_iterations: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_val_loss: float = math.inf
    best_iteration: int = 0
    epochs_run: int = 0
    diverged: bool = False
    message: str = ""
    metrics: dict = field(default_factory=dict)
    target_mean: list = field(default_factory=list)
    target_std: list = field(default_factory=list)
    nrmse_normalizer: str = "target range (max - min)"
    loss_units: str = "MSE of standardised targets"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metrics"] = {k: dict(v._asdict()) if isinstance(v, OutputMetrics) else v
                        for k, v in self.metrics.items()}
        return d

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


# ---------------------------------------------------------------------------
# Training loop

def init_params(rng, hidden_dim: int, input_dim: int = 4) -> list:
    """Glorot-uniform input weights, orthogonal recurrent weights, unit forget bias."""
    rng = np.random.default_rng(rng)
    nh = hidden_dim

    def glorot(rows, cols):
        lim = math.sqrt(6.0 / (rows + cols))
        return rng.uniform(-lim, lim, (rows, cols))

    wu = glorot(4 * nh, input_dim)
    wh = np.vstack([np.linalg.qr(rng.standard_normal((nh, nh)))[0] for _ in GATES])
    b = np.zeros(4 * nh)
    b[nh:2 * nh] = 1.0
    return [wu, wh, b, glorot(2, nh), np.zeros(2)]


def _fold_output_scale(arrs, norm_mean, norm_std, y_mean, y_std) -> LstmParams:
    wu, wh, b, fcw, fcb = arrs
    return LstmParams.from_stacked(wu, wh, b, y_std[:, None] * fcw, y_std * fcb + y_mean,
                                   norm_mean=norm_mean, norm_std=norm_std)


def _to_training_data(d: Dataset, stride: int) -> Dataset:
    return d.decimate(stride) if stride > 1 else d


def train(d_train: Dataset, d_val: Dataset, cfg: TrainConfig = TrainConfig(),
          init: LstmParams | None = None) -> tuple[LstmParams, TrainReport]:
    """Adam with sequential mini-batches over padded sequences.

    Records are decimated by ``cfg.decimate`` first so the network steps
    at the estimator sample time. Inputs and targets are standardised with
    training-set statistics; the input statistics are stored with the
    returned weights and the target scaling is folded into the output layer.
    Validation runs at iteration 0, every ``val_frequency`` iterations and
    after the last one; the parameters with the lowest validation loss are
    returned.
    """
    if len(d_train) == 0 or len(d_val) == 0:
        raise ValueError("training and validation sets must be non-empty")
    dt = _to_training_data(d_train, cfg.decimate)
    dv = _to_training_data(d_val, cfg.decimate)
    xs, ys = dt.stacked()
    x_mean, x_std = xs.mean(axis=0), xs.std(axis=0)
    x_std[x_std == 0] = 1.0
    y_mean, y_std = ys.mean(axis=0), ys.std(axis=0)
    y_std[y_std == 0] = 1.0

    def prepared(d):
        x, y, mask, _ = d.padded()
        return (np.ascontiguousarray((x - x_mean) / x_std), np.ascontiguousarray((y - y_mean) / y_std),
                np.ascontiguousarray(mask))

    xt, yt, mt = prepared(dt)
    xv, yv, mv = prepared(dv)

    if init is None:
        params = init_params(cfg.seed, cfg.hidden_dim)
    else:
        wu, wh, b, fcw, fcb = init.stacked
        params = [wu.copy(), wh.copy(), b.copy(), fcw / y_std[:, None], (fcb - y_mean) / y_std]
    moments = AdamMoments.zeros_like(params)
    report = TrainReport(target_mean=y_mean.tolist(), target_std=y_std.tolist())
    best = [p.copy() for p in params]

    def validate(iteration):
        loss = kernels.seq_loss_grad(*params, xv, yv, mv)[0]
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite validation loss at iteration {iteration}")
        report.val_iterations.append(iteration)
        report.val_loss.append(float(loss))
        if loss < report.best_val_loss:
            report.best_val_loss = float(loss)
            report.best_iteration = iteration
            best[:] = [p.copy() for p in params]

    n_seq = xt.shape[0]
    iteration = 0
    try:
        validate(0)
        for epoch in range(cfg.max_epochs):
            lr = lr_schedule(cfg, epoch)
            for start in range(0, n_seq, cfg.mini_batch):
                sl = slice(start, start + cfg.mini_batch)
                loss, _, *grads = kernels.seq_loss_grad(*params, xt[sl], yt[sl], mt[sl])
                iteration += 1
                if not math.isfinite(loss):
                    raise TrainingDiverged(f"non-finite training loss at iteration {iteration}")
                grads = clip_gradients(grads, cfg.grad_clip)
                params, moments = adam_step(params, grads, moments, cfg, iteration, lr, _DECAY)
                report.train_iterations.append(iteration)
                report.train_loss.append(float(loss))
                if iteration % cfg.val_frequency == 0:
                    validate(iteration)
            report.epochs_run = epoch + 1
        if not report.val_iterations or report.val_iterations[-1] != iteration:
            validate(iteration)
        report.message = "completed"
    except TrainingDiverged as exc:
        log.error("training stopped: %s", exc)
        report.diverged = True
        report.message = str(exc)

    return _fold_output_scale(best, x_mean, x_std, y_mean, y_std), report
