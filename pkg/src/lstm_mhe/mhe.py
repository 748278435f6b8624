"""Moving horizon estimation with the LSTM rate model as process model.

State per node: x = (theta_w, theta_r, h (H), c (H)). Process noise w enters
additively on the two temperatures only. The window NLP

    min  1/2 |theta_0 - x_bar|^2_P0 + 1/2 hc_weight |hc_0 - hc_bar|^2
         + 1/2 sum_k |w_k|^2_q + 1/2 sum_k |theta_k + bias - y_k|^2_r
    s.t. x_{k+1} = f(x_k, p_k) + (w_k, 0),  theta_min <= theta_k <= theta_max

is solved by damped Gauss-Newton SQP in single-shooting form: the nodes are
eliminated through the dynamics (full condensing), leaving (x_0, w) as
decision variables and the node bounds as general linear inequalities.
Weights are given as the diagonal entries multiplying the squared
residuals (i.e. already inverted covariances).
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import kernels
from .lstm import LstmParams
from .qp import QpProblem, solve_qp_box
from .vehicle import VehicleParams, em_speed

log = logging.getLogger(__name__)

PARAM_ORDER = ("t_em_acc", "t_em_brk", "t_fric_brk", "phi", "v")
LOG_COLUMNS = ("t_s", "est_theta_w", "est_theta_r", "cost", "sqp_iters", "kkt", "solve_ms")


class MheNumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class MheConfig:
    N: int = 15
    dk: float = 0.1
    meas_weight: tuple = (0.02, 0.02)       # multiplies squared measurement residuals
    noise_weight: tuple = (0.7, 0.7)        # multiplies squared process noise
    arrival_weight: tuple = (1.0, 1.0)
    hc_weight: float = 1e-6
    theta_min: float = 0.0
    theta_max: float = 155.0
    max_sqp_iters: int = 20
    max_qp_iters: int = 100
    kkt_tol: float = 1e-8
    step_tol: float = 1e-8
    max_ls_trials: int = 10
    condensing: str = "full"
    meas_bias: tuple = (0.0, 0.0)           # known sensor mean, part of the measurement model
    meas_delay_steps: int = 0
    outlier_gate: float | None = None       # degC, per-channel innovation gate
    offset_window: int = 10                 # gated samples used to tell a step offset from outliers

    def __post_init__(self):
        for name in ("meas_weight", "noise_weight", "arrival_weight", "meas_bias"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
            if len(getattr(self, name)) != 2:
                raise ValueError(f"{name} needs two entries")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.dk <= 0:
            raise ValueError("dk must be positive")
        if min(self.meas_weight + self.noise_weight + self.arrival_weight) <= 0 or self.hc_weight <= 0:
            raise ValueError("weights must be positive definite")
        if not self.theta_min < self.theta_max:
            raise ValueError("theta_min must be below theta_max")
        if self.max_sqp_iters < 1 or self.max_qp_iters < 1 or self.max_ls_trials < 1:
            raise ValueError("iteration limits must be >= 1")
        if self.condensing != "full":
            raise ValueError("only full condensing is implemented")
        if self.meas_delay_steps < 0:
            raise ValueError("meas_delay_steps must be >= 0")
        if self.outlier_gate is not None and self.outlier_gate <= 0:
            raise ValueError("outlier_gate must be positive")
        if self.offset_window < 1:
            raise ValueError("offset_window must be >= 1")

    @property
    def horizon(self) -> float:
        return self.N * self.dk

    def to_dict(self) -> dict:
        d = asdict(self)
        d["T"] = self.horizon
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MheConfig":
        d = dict(d)
        horizon = d.pop("T", None)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown estimator config keys: {sorted(unknown)}")
        cfg = cls(**d)
        if horizon is not None and not math.isclose(horizon, cfg.horizon, rel_tol=1e-9):
            raise ValueError(f"horizon T={horizon} inconsistent with N*dk={cfg.horizon}")
        return cfg

    @classmethod
    def from_json(cls, path) -> "MheConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


class MheState(NamedTuple):
    theta_w: float
    theta_r: float
    h: np.ndarray
    c: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.theta_w, self.theta_r], self.h, self.c])

    @classmethod
    def from_vector(cls, x) -> "MheState":
        x = np.asarray(x, dtype=np.float64)
        nh = (len(x) - 2) // 2
        return cls(float(x[0]), float(x[1]), x[2:2 + nh].copy(), x[2 + nh:].copy())


@dataclass
class MheWindow:
    """Data of one window with ``n`` intervals and ``n + 1`` nodes."""

    y: np.ndarray               # (n+1, 2) raw measurements
    mask: np.ndarray            # (n+1, 2) 1 = use, 0 = ignore
    params: np.ndarray          # (n, 5) per-interval parameter vectors
    exo: np.ndarray             # (n, 2) network exogenous inputs (n_em, t_em)
    x_bar: np.ndarray           # (2,) arrival temperatures
    hc_bar: np.ndarray          # (2H,) arrival anchor of the LSTM state
    x0_guess: np.ndarray        # (2 + 2H,)
    w_guess: np.ndarray         # (n, 2)

    @property
    def n(self) -> int:
        return len(self.exo)

    def __post_init__(self):
        self.y = np.atleast_2d(np.asarray(self.y, dtype=np.float64))
        self.mask = np.atleast_2d(np.asarray(self.mask, dtype=np.float64))
        self.params = np.asarray(self.params, dtype=np.float64).reshape(-1, 5)
        self.exo = np.asarray(self.exo, dtype=np.float64).reshape(-1, 2)
        self.w_guess = np.asarray(self.w_guess, dtype=np.float64).reshape(-1, 2)
        n = len(self.exo)
        if self.y.shape != (n + 1, 2) or self.mask.shape != (n + 1, 2):
            raise ValueError("need one measurement per node")
        if self.params.shape[0] != n or self.w_guess.shape[0] != n:
            raise ValueError("need one parameter vector and noise guess per interval")


@dataclass
class MheSolution:
    xs: np.ndarray              # (n+1, 2 + 2H) node states
    w: np.ndarray               # (n, 2)
    cost: float
    sqp_iters: int
    kkt: float
    solve_time: float = 0.0
    converged: bool = True
    status: str = "converged"
    active: list = field(default_factory=list)   # (node, channel, "lo" | "hi")
    cost_history: list = field(default_factory=list)

    @property
    def estimate(self) -> np.ndarray:
        return self.xs[-1]


# ---------------------------------------------------------------------------
# Model pieces

def exogenous_inputs(params, vehicle: VehicleParams = VehicleParams()) -> np.ndarray:
    """Map parameter vectors (t_em_acc, t_em_brk, t_fric_brk, phi, v) to (n_em, t_em)."""
    p = np.asarray(params, dtype=np.float64).reshape(-1, 5)
    return np.column_stack([em_speed(vehicle, p[:, 4]), p[:, 0] + p[:, 1]])


def _rollout(model: LstmParams, exo, x0, w, dk, with_jac=False):
    wu, wh, b, fcw, fcb = model.stacked
    xs, jac = kernels.rollout(wu, wh, b, fcw, fcb, model.norm_mean, model.norm_std,
                              np.ascontiguousarray(exo, dtype=np.float64), np.ascontiguousarray(x0, dtype=np.float64),
                              np.ascontiguousarray(w, dtype=np.float64).reshape(-1, 2), float(dk), with_jac)
    if not np.all(np.isfinite(xs)):
        raise MheNumericError("non-finite state in rollout")
    return xs, jac


def dynamics_step(cfg: MheConfig, model: LstmParams, p_k, x, w=(0.0, 0.0),
                  vehicle: VehicleParams = VehicleParams()) -> np.ndarray:
    """x_{k+1} = f(x_k, p_k) + (w, 0): operating point, network step, Euler, noise."""
    exo = exogenous_inputs(p_k, vehicle)
    xs, _ = _rollout(model, exo, x, np.asarray(w, dtype=np.float64).reshape(1, 2), cfg.dk)
    return xs[1]


def measurement_model(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)[:2].copy()


def residual_vector(cfg: MheConfig, window: MheWindow, xs, w) -> np.ndarray:
    """Stacked weighted residuals r with cost = 0.5 |r|^2."""
    xs = np.asarray(xs)
    w = np.asarray(w).reshape(-1, 2)
    sp0 = np.sqrt(cfg.arrival_weight)
    sq = np.sqrt(cfg.noise_weight)
    sr = np.sqrt(cfg.meas_weight)
    nh2 = xs.shape[1] - 2
    parts = [sp0 * (xs[0, :2] - window.x_bar),
             math.sqrt(cfg.hc_weight) * (xs[0, 2:] - window.hc_bar[:nh2]),
             (sq * w).ravel(),
             (sr * window.mask * (xs[:, :2] + np.asarray(cfg.meas_bias) - window.y)).ravel()]
    return np.concatenate(parts)


def evaluate_cost(cfg: MheConfig, window: MheWindow, xs, w) -> float:
    r = residual_vector(cfg, window, xs, w)
    return 0.5 * float(r @ r)


class Linearization(NamedTuple):
    xs: np.ndarray      # (n+1, nx) nominal trajectory
    A: np.ndarray       # (n, nx, nx) df/dx
    B: np.ndarray       # (nx, 2) df/dw, identity on the temperatures


def linearize(cfg: MheConfig, model: LstmParams, window: MheWindow, x0, w) -> Linearization:
    xs, A = _rollout(model, window.exo, x0, w, cfg.dk, with_jac=True)
    nx = xs.shape[1]
    B = np.zeros((nx, 2))
    B[0, 0] = B[1, 1] = 1.0
    return Linearization(xs, A, B)


class CondensedQp(NamedTuple):
    qp: QpProblem
    jac: np.ndarray         # residual Jacobian w.r.t. z = (x0, w)
    res: np.ndarray         # residuals at the linearisation point
    sens: np.ndarray        # (n+1, nx, nz) node sensitivities dx_k/dz


def condense(cfg: MheConfig, lin: Linearization, window: MheWindow, w) -> CondensedQp:
    """Eliminate the node states: Gauss-Newton QP in dz = (dx_0, dw_0..dw_{n-1})."""
    xs, A, B = lin
    n = len(A)
    nx = xs.shape[1]
    nz = nx + 2 * n
    sens = np.zeros((n + 1, nx, nz))
    sens[0, :, :nx] = np.eye(nx)
    for k in range(n):
        sens[k + 1] = A[k] @ sens[k]
        sens[k + 1, :, nx + 2 * k:nx + 2 * k + 2] += B
    res = residual_vector(cfg, window, xs, w)

    sp0 = np.sqrt(cfg.arrival_weight)
    sq = np.sqrt(cfg.noise_weight)
    sr = np.sqrt(cfg.meas_weight)
    rows = []
    arr = np.zeros((2, nz))
    arr[0, 0], arr[1, 1] = sp0
    rows.append(arr)
    hc = np.zeros((nx - 2, nz))
    hc[:, 2:nx] = math.sqrt(cfg.hc_weight) * np.eye(nx - 2)
    rows.append(hc)
    wr = np.zeros((2 * n, nz))
    for k in range(n):
        wr[2 * k, nx + 2 * k] = sq[0]
        wr[2 * k + 1, nx + 2 * k + 1] = sq[1]
    rows.append(wr)
    meas = (sr * window.mask)[:, :, None] * sens[:, :2, :]
    rows.append(meas.reshape(-1, nz))
    jac = np.vstack(rows)

    H = jac.T @ jac
    g = jac.T @ res
    C = sens[:, :2, :].reshape(-1, nz)
    theta = xs[:, :2].ravel()
    qp = QpProblem(H, g, C, cfg.theta_min - theta, cfg.theta_max - theta)
    return CondensedQp(qp, jac, res, sens)


def _violation(cfg: MheConfig, xs) -> float:
    th = xs[:, :2]
    return float(np.sum(np.maximum(cfg.theta_min - th, 0.0)) + np.sum(np.maximum(th - cfg.theta_max, 0.0)))


def sqp_solve(cfg: MheConfig, model: LstmParams, window: MheWindow, x0=None, w=None) -> MheSolution:
    """Damped Gauss-Newton SQP from the window's warm start (or ``x0``, ``w``).

    Each iteration linearises, condenses, solves the QP and backtracks on
    the true cost plus an l1 penalty on bound violations (the penalty is
    zero at feasible points). Stops on a small step, a small KKT residual
    or the iteration limit.
    """
    t_start = time.perf_counter()
    x0 = np.array(window.x0_guess if x0 is None else x0, dtype=np.float64)
    w = np.array(window.w_guess if w is None else w, dtype=np.float64).reshape(-1, 2)
    nx = len(x0)
    xs, _ = _rollout(model, window.exo, x0, w, cfg.dk)
    cost = evaluate_cost(cfg, window, xs, w)
    if not math.isfinite(cost):
        raise MheNumericError("non-finite cost at the initial guess")
    history = [cost]
    mu = 1.0
    iters = 0
    kkt = math.inf
    status = "max iterations"
    converged = False
    active = []

    for _ in range(cfg.max_sqp_iters):
        lin = linearize(cfg, model, window, x0, w)
        cq = condense(cfg, lin, window, w)
        sol = solve_qp_box(cq.qp, cfg.max_qp_iters)
        iters += 1
        dz = sol.x
        lam = sol.lam_lo + sol.lam_hi
        viol = _violation(cfg, xs)
        # stationarity of the NLP at the current point: g - C'lam = -H dz
        kkt = float(np.max(np.abs(cq.qp.H @ dz))) + viol
        active = [(row // 2, row % 2, side) for row, side in sol.active]
        if kkt < cfg.kkt_tol:
            status, converged = "kkt", True
            break
        mu = max(mu, 2.0 * float(np.max(lam, initial=0.0)))
        merit0 = cost + mu * viol
        slope = float(cq.qp.g @ dz) - mu * viol
        alpha = 1.0
        accepted = False
        for _trial in range(cfg.max_ls_trials):
            x0_t = x0 + alpha * dz[:nx]
            w_t = w + alpha * dz[nx:].reshape(-1, 2)
            xs_t, _ = _rollout(model, window.exo, x0_t, w_t, cfg.dk)
            cost_t = evaluate_cost(cfg, window, xs_t, w_t)
            merit_t = cost_t + mu * _violation(cfg, xs_t)
            if math.isfinite(merit_t) and merit_t <= merit0 + 1e-4 * alpha * min(slope, 0.0):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            status = "line search failed"
            break
        step = alpha * float(np.max(np.abs(dz), initial=0.0))
        x0, w, xs, cost = x0_t, w_t, xs_t, cost_t
        history.append(cost)
        if step < cfg.step_tol:
            status, converged = "step", True
            break

    return MheSolution(xs, w, cost, iters, kkt, time.perf_counter() - t_start, converged, status,
                       active, history)


# ---------------------------------------------------------------------------
# Window handling and the online estimator

def advance_window(window: MheWindow, y_new, p_new, exo_new, solution: MheSolution, N: int,
                   mask_new=(1.0, 1.0)) -> MheWindow:
    """Append a node; once the window holds more than N + 1 nodes drop the oldest.

    When the oldest node is dropped the arrival anchor moves to the solved
    state of the node that becomes the first one. The warm start is the
    previous solution shifted accordingly, with zero noise on the new
    interval.
    """
    y = np.vstack([window.y, np.asarray(y_new, dtype=np.float64)[None]])
    mask = np.vstack([window.mask, np.asarray(mask_new, dtype=np.float64)[None]])
    params = np.vstack([window.params, np.asarray(p_new, dtype=np.float64).reshape(1, 5)])
    exo = np.vstack([window.exo, np.asarray(exo_new, dtype=np.float64).reshape(1, 2)])
    w_guess = np.vstack([solution.w, np.zeros((1, 2))])
    x_bar, hc_bar, x0_guess = window.x_bar, window.hc_bar, solution.xs[0]
    if len(exo) > N:
        y, mask, params, exo, w_guess = y[1:], mask[1:], params[1:], exo[1:], w_guess[1:]
        x_bar = solution.xs[1, :2].copy()
        hc_bar = solution.xs[1, 2:].copy()
        x0_guess = solution.xs[1]
    return MheWindow(y, mask, params, exo, x_bar, hc_bar, x0_guess.copy(), w_guess)


class MovingHorizonEstimator:
    """Online estimator: push one measurement (and the parameters of the
    interval that led to it) per call and get the current state estimate.

    With ``meas_delay_steps = d`` a measurement taken at step s is treated
    as a reading of the state at step s - d. The window is solved on those
    aligned readings and its last node is propagated d steps with the
    buffered parameters to give the estimate at step s.
    """

    def __init__(self, model: LstmParams, cfg: MheConfig = MheConfig(),
                 vehicle: VehicleParams = VehicleParams()):
        if model.input_dim != 4:
            raise ValueError("estimator expects a four-feature network")
        self.model = model
        self.cfg = cfg
        self.vehicle = vehicle
        self.nh = model.hidden_dim
        self.window: MheWindow | None = None
        self.solution: MheSolution | None = None
        self.step_index = -1
        self._params = []           # parameters of intervals 0..s-1
        # load/compile the rollout kernels now so per-step timing covers solving only
        for jac in (False, True):
            _rollout(model, np.zeros((1, 2)), np.zeros(2 + 2 * self.nh), np.zeros((1, 2)), cfg.dk, jac)
        self.offset = np.zeros(2)   # identified sensor step offsets
        self._suspect = [[], []]    # innovations collected while a channel is gated

    def reset(self):
        self.__init__(self.model, self.cfg, self.vehicle)

    def _gate(self, y, pred_theta):
        """Per-channel innovation gate with step-offset re-identification.

        A reading whose innovation (after removing the known sensor mean and
        any identified offset) exceeds the gate is dropped and collected. Once
        ``offset_window`` readings are collected their median decides: beyond
        the gate it is a step change of the sensor and is added to the offset
        estimate, otherwise the readings were isolated outliers.
        """
        mask = np.ones(2)
        cfg = self.cfg
        if cfg.outlier_gate is None:
            return mask
        innov = np.asarray(y) - np.asarray(cfg.meas_bias) - self.offset - pred_theta
        for ch in range(2):
            pending = self._suspect[ch]
            if not pending and abs(innov[ch]) <= cfg.outlier_gate:
                continue
            pending.append(innov[ch])
            mask[ch] = 0.0
            if len(pending) >= cfg.offset_window:
                m = float(np.median(pending))
                if abs(m) > cfg.outlier_gate:
                    self.offset[ch] += m
                    log.info("channel %d: sensor offset now %.3f", ch, self.offset[ch])
                pending.clear()
        return mask

    def step(self, y, p_prev=None) -> tuple[MheState, MheSolution]:
        """Process measurement ``y`` at the next step.

        ``p_prev`` is the parameter vector of the interval that ended at this
        step; it is ignored on the very first call.
        """
        cfg = self.cfg
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (2,) or not np.all(np.isfinite(y)):
            raise ValueError("measurement must be two finite temperatures")
        self.step_index += 1
        s = self.step_index
        if s > 0:
            if p_prev is None:
                raise ValueError("parameters of the elapsed interval are required after the first step")
            self._params.append(np.asarray(p_prev, dtype=np.float64).reshape(5))
        d = cfg.meas_delay_steps
        node_time = max(s - d, 0)

        if self.window is None:
            x_bar = y - np.asarray(cfg.meas_bias)
            hc0 = np.zeros(2 * self.nh)
            self.window = MheWindow(y[None], np.ones((1, 2)), np.zeros((0, 5)), np.zeros((0, 2)),
                                    x_bar, hc0, np.concatenate([x_bar, hc0]), np.zeros((0, 2)))
        elif node_time == 0:
            # still reading the initial state through the delay line
            prev = self.solution.xs[0]
            self.window = MheWindow(y[None], np.ones((1, 2)), np.zeros((0, 5)), np.zeros((0, 2)),
                                    prev[:2].copy(), prev[2:].copy(), prev.copy(), np.zeros((0, 2)))
        else:
            p_new = self._params[node_time - 1]
            exo_new = exogenous_inputs(p_new, self.vehicle)
            pred = _rollout(self.model, exo_new, self.solution.xs[-1], np.zeros((1, 2)), cfg.dk)[0][1]
            mask = self._gate(y, pred[:2])
            self.window = advance_window(self.window, y - self.offset, p_new, exo_new, self.solution,
                                         cfg.N, mask)

        try:
            self.solution = sqp_solve(cfg, self.model, self.window)
        except (MheNumericError, np.linalg.LinAlgError) as exc:
            # keep the warm start so the next window still has a trajectory
            log.warning("MHE solve failed at step %d: %s", s, exc)
            xs, _ = _rollout(self.model, self.window.exo, self.window.x0_guess, self.window.w_guess, cfg.dk)
            self.solution = MheSolution(xs, self.window.w_guess.copy(), math.nan, 0, math.inf,
                                        converged=False, status="failed")
        x_last = self.solution.xs[-1]
        lag = s - node_time
        if lag:
            exo = exogenous_inputs(np.array(self._params[node_time:s]), self.vehicle)
            x_last = _rollout(self.model, exo, x_last, np.zeros((lag, 2)), cfg.dk)[0][-1]
        est = x_last.copy()
        est[:2] = np.clip(est[:2], cfg.theta_min, cfg.theta_max)
        return MheState.from_vector(est), self.solution


def estimate_step(estimator: MovingHorizonEstimator, y, p=None) -> tuple[MheState, MheSolution]:
    return estimator.step(y, p)


def write_solution_log(path, rows) -> None:
    """rows: iterable of (t_s, MheState, MheSolution)."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(LOG_COLUMNS)
        for t, est, sol in rows:
            wr.writerow([repr(float(t)), repr(est.theta_w), repr(est.theta_r), repr(sol.cost),
                         sol.sqp_iters, repr(sol.kkt), repr(sol.solve_time * 1e3)])
