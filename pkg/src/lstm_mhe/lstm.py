"""LSTM + fully connected thermal rate model.

The network maps (n_em, t_em, theta_w, theta_r) to the temperature change
rates (dtheta_w, dtheta_r) while carrying a hidden/cell state between calls.
Inputs are z-scored with ``norm_mean``/``norm_std`` before the LSTM cell;
an identity normalisation (mean 0, std 1) is the default.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

FEATURE_ORDER = ("n_em", "t_em", "theta_w", "theta_r")
OUTPUT_ORDER = ("dtheta_w", "dtheta_r")
GATES = ("i", "f", "g", "o")
_MATRIX_FIELDS = (
    "w_u_i", "w_u_f", "w_u_g", "w_u_o",
    "w_h_i", "w_h_f", "w_h_g", "w_h_o",
    "b_i", "b_f", "b_g", "b_o",
    "fc_w", "fc_b",
)


@dataclass(frozen=True, eq=False)
class LstmParams:
    w_u_i: np.ndarray
    w_u_f: np.ndarray
    w_u_g: np.ndarray
    w_u_o: np.ndarray
    w_h_i: np.ndarray
    w_h_f: np.ndarray
    w_h_g: np.ndarray
    w_h_o: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_g: np.ndarray
    b_o: np.ndarray
    fc_w: np.ndarray
    fc_b: np.ndarray
    norm_mean: np.ndarray = field(default=None)
    norm_std: np.ndarray = field(default=None)

    def __post_init__(self):
        for name in _MATRIX_FIELDS:
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        nin = self.w_u_i.shape[1] if self.w_u_i.ndim == 2 else -1
        mean = np.zeros(nin) if self.norm_mean is None else self.norm_mean
        std = np.ones(nin) if self.norm_std is None else self.norm_std
        for name, arr in (("norm_mean", mean), ("norm_std", std)):
            arr = np.array(arr, dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        self._validate()

    def _validate(self):
        nh, ni = self.w_u_i.shape
        for g in GATES:
            if getattr(self, f"w_u_{g}").shape != (nh, ni):
                raise ValueError(f"w_u_{g} must have shape {(nh, ni)}")
            if getattr(self, f"w_h_{g}").shape != (nh, nh):
                raise ValueError(f"w_h_{g} must have shape {(nh, nh)}")
            if getattr(self, f"b_{g}").shape != (nh,):
                raise ValueError(f"b_{g} must have shape {(nh,)}")
        if self.fc_w.shape != (2, nh) or self.fc_b.shape != (2,):
            raise ValueError("fc_w must be (2, hidden) and fc_b (2,)")
        if self.norm_mean.shape != (ni,) or self.norm_std.shape != (ni,):
            raise ValueError("norm_mean/norm_std must match input_dim")
        if np.any(self.norm_std <= 0):
            raise ValueError("norm_std entries must be positive")
        for name in _MATRIX_FIELDS + ("norm_mean", "norm_std"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite entries")

    @property
    def input_dim(self) -> int:
        return self.w_u_i.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w_u_i.shape[0]

    @property
    def stacked(self):
        """Gate-stacked arrays ``(wu, wh, b, fc_w, fc_b)`` in i, f, g, o order."""
        cached = self.__dict__.get("_stacked")
        if cached is None:
            wu = np.vstack([getattr(self, f"w_u_{g}") for g in GATES])
            wh = np.vstack([getattr(self, f"w_h_{g}") for g in GATES])
            b = np.concatenate([getattr(self, f"b_{g}") for g in GATES])
            cached = (wu, wh, b, np.ascontiguousarray(self.fc_w), np.ascontiguousarray(self.fc_b))
            object.__setattr__(self, "_stacked", cached)
        return cached

    @classmethod
    def zeros(cls, hidden_dim: int = 8, input_dim: int = 4) -> "LstmParams":
        kw = {}
        for g in GATES:
            kw[f"w_u_{g}"] = np.zeros((hidden_dim, input_dim))
            kw[f"w_h_{g}"] = np.zeros((hidden_dim, hidden_dim))
            kw[f"b_{g}"] = np.zeros(hidden_dim)
        return cls(fc_w=np.zeros((2, hidden_dim)), fc_b=np.zeros(2), **kw)

    @classmethod
    def random(cls, rng, hidden_dim: int = 8, input_dim: int = 4, scale: float = 0.5) -> "LstmParams":
        rng = np.random.default_rng(rng)
        kw = {}
        for g in GATES:
            kw[f"w_u_{g}"] = scale * rng.standard_normal((hidden_dim, input_dim))
            kw[f"w_h_{g}"] = scale * rng.standard_normal((hidden_dim, hidden_dim))
            kw[f"b_{g}"] = scale * rng.standard_normal(hidden_dim)
        return cls(
            fc_w=scale * rng.standard_normal((2, hidden_dim)),
            fc_b=scale * rng.standard_normal(2),
            **kw,
        )

    @classmethod
    def from_stacked(cls, wu, wh, b, fc_w, fc_b, norm_mean=None, norm_std=None) -> "LstmParams":
        nh = wh.shape[1]
        kw = {}
        for q, g in enumerate(GATES):
            sl = slice(q * nh, (q + 1) * nh)
            kw[f"w_u_{g}"] = wu[sl]
            kw[f"w_h_{g}"] = wh[sl]
            kw[f"b_{g}"] = b[sl]
        return cls(fc_w=fc_w, fc_b=fc_b, norm_mean=norm_mean, norm_std=norm_std, **kw)

    def with_(self, **changes) -> "LstmParams":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = {
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "feature_order": list(FEATURE_ORDER),
            "output_order": list(OUTPUT_ORDER),
            "norm_mean": self.norm_mean.tolist(),
            "norm_std": self.norm_std.tolist(),
        }
        for name in _MATRIX_FIELDS:
            out[name] = getattr(self, name).tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "LstmParams":
        order = tuple(d.get("feature_order", FEATURE_ORDER))
        if order != FEATURE_ORDER:
            raise ValueError(f"feature order {order} does not match {FEATURE_ORDER}")
        missing = [k for k in _MATRIX_FIELDS if k not in d]
        if missing:
            raise ValueError(f"weights are missing fields: {missing}")
        p = cls(
            norm_mean=d.get("norm_mean"),
            norm_std=d.get("norm_std"),
            **{k: d[k] for k in _MATRIX_FIELDS},
        )
        if "input_dim" in d and d["input_dim"] != p.input_dim:
            raise ValueError("input_dim header disagrees with matrix shapes")
        if "hidden_dim" in d and d["hidden_dim"] != p.hidden_dim:
            raise ValueError("hidden_dim header disagrees with matrix shapes")
        return p


def save_weights(params: LstmParams, path) -> None:
    Path(path).write_text(json.dumps(params.to_dict(), indent=1))


def load_weights(path) -> LstmParams:
    return LstmParams.from_dict(json.loads(Path(path).read_text()))


class LstmState(NamedTuple):
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden_dim: int = 8) -> "LstmState":
        return cls(np.zeros(hidden_dim), np.zeros(hidden_dim))


class DnnInput(NamedTuple):
    n_em: float
    t_em: float
    theta_w: float
    theta_r: float

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=np.float64)


class ThermalRates(NamedTuple):
    dtheta_w: float
    dtheta_r: float

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=np.float64)


def sigmoid(z):
    """Logistic function, evaluated without overflow for large ``|z|``."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def tanh_act(z):
    return np.tanh(z) if np.ndim(z) else float(np.tanh(z))


def _check_dim(vec, n, what):
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (n,):
        raise ValueError(f"{what} must have shape ({n},), got {vec.shape}")
    return vec


def _gates(p: LstmParams, u, h):
    wu, wh, b, _, _ = p.stacked
    nh = p.hidden_dim
    z = wu @ u + wh @ h + b
    i = sigmoid(z[:nh])
    f = sigmoid(z[nh:2 * nh])
    g = np.tanh(z[2 * nh:3 * nh])
    o = sigmoid(z[3 * nh:])
    return i, f, g, o


def lstm_cell_step(p: LstmParams, u, s: LstmState) -> LstmState:
    """One LSTM cell update on an already-normalised input vector ``u``."""
    u = _check_dim(u, p.input_dim, "input")
    h = _check_dim(s.h, p.hidden_dim, "h")
    c = _check_dim(s.c, p.hidden_dim, "c")
    i, f, g, o = _gates(p, u, h)
    c_new = f * c + i * g
    return LstmState(o * np.tanh(c_new), c_new)


def fc_forward(p: LstmParams, h) -> ThermalRates:
    h = _check_dim(h, p.hidden_dim, "h")
    r = p.fc_w @ h + p.fc_b
    return ThermalRates(float(r[0]), float(r[1]))


def normalize_input(p: LstmParams, x) -> np.ndarray:
    x = _check_dim(x, p.input_dim, "input")
    return (x - p.norm_mean) / p.norm_std


def dnn_forward(p: LstmParams, x, s: LstmState) -> tuple[ThermalRates, LstmState]:
    """Advance the network one step on a raw physical input."""
    x = np.asarray(x, dtype=np.float64)
    s_new = lstm_cell_step(p, normalize_input(p, x), s)
    return fc_forward(p, s_new.h), s_new


def dnn_jacobian(p: LstmParams, x, s: LstmState) -> np.ndarray:
    """Jacobian of (rates, h', c') w.r.t. (theta_w, theta_r, h, c).

    Returns an array of shape (2 + 2H, 2 + 2H); row blocks are rates, h', c'
    and column blocks theta_w, theta_r, h, c.
    """
    u = normalize_input(p, x)
    h = _check_dim(s.h, p.hidden_dim, "h")
    c = _check_dim(s.c, p.hidden_dim, "c")
    wu, wh, _, fcw, _ = p.stacked
    nh = p.hidden_dim
    nx = 2 + 2 * nh
    i, f, g, o = _gates(p, u, h)
    c_new = f * c + i * g
    tc = np.tanh(c_new)

    # pre-activation sensitivities w.r.t. (theta_w, theta_r, h)
    dz = np.hstack([wu[:, 2:4] / p.norm_std[2:4], wh])
    di = (i * (1 - i))[:, None] * dz[:nh]
    df = (f * (1 - f))[:, None] * dz[nh:2 * nh]
    dg = (1 - g * g)[:, None] * dz[2 * nh:3 * nh]
    do = (o * (1 - o))[:, None] * dz[3 * nh:]

    dc = np.zeros((nh, nx))
    dc[:, :2 + nh] = df * c[:, None] + di * g[:, None] + i[:, None] * dg
    dc[:, 2 + nh:] = np.diag(f)
    dh = (o * (1 - tc * tc))[:, None] * dc
    dh[:, :2 + nh] += do * tc[:, None]

    jac = np.empty((nx, nx))
    jac[:2] = fcw @ dh
    jac[2:2 + nh] = dh
    jac[2 + nh:] = dc
    return jac


def thermal_euler_step(theta_w: float, theta_r: float, rates, dk: float) -> tuple[float, float]:
    if dk <= 0:
        raise ValueError("dk must be positive")
    return theta_w + rates[0] * dk, theta_r + rates[1] * dk


def integrate_rates(theta0, rates, dk: float) -> np.ndarray:
    """Absolute temperatures from a rate sequence by explicit Euler.

    ``rates`` has shape (T, 2); the result has shape (T + 1, 2) and starts
    at ``theta0``.
    """
    rates = np.asarray(rates, dtype=np.float64)
    out = np.empty((len(rates) + 1, 2))
    out[0] = theta0
    for k, r in enumerate(rates):
        out[k + 1] = thermal_euler_step(out[k, 0], out[k, 1], r, dk)
    return out
