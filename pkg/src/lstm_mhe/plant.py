"""Synthetic ground-truth thermal plant, temperature sensor model and data generation.

The plant is a three-node lumped parameter thermal network (winding, rotor,
stator core) with a coolant path. It stands in for a proprietary
high-fidelity machine model; its coefficients are plausible for a small
traction PMSM but not fitted to any real machine.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Dataset, Sequence
from .vehicle import DriverConfig, DrivingCycle, VehicleParams, em_speed, pi_driver_step, vehicle_euler_step

log = logging.getLogger(__name__)

NODES = ("winding", "rotor", "stator")
MAX_PLAUSIBLE_TEMP = 500.0


class PlantDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LptnParams:
    capacitance: tuple = (2200.0, 3000.0, 9000.0)          # J/K
    # symmetric conductances between (w-r, w-s, r-s), W/K
    g_wr: float = 1.5
    g_ws: float = 14.0
    g_rs: float = 5.0
    g_cool: tuple = (0.0, 1.0, 150.0)                         # W/K to coolant per node
    theta_cool: float = 65.0
    k_cu: float = 0.4             # W / Nm^2
    k_fe: float = 4e-4            # W / rpm^1.5
    k_m: float = 8e-3             # W / rpm
    # share of each loss type injected per node (winding, rotor, stator)
    cu_split: tuple = (1.0, 0.0, 0.0)
    fe_split: tuple = (0.0, 0.5, 0.5)
    m_split: tuple = (0.0, 1.0, 0.0)

    def __post_init__(self):
        if len(self.capacitance) != 3 or min(self.capacitance) <= 0:
            raise ValueError("three positive capacitances required")
        if min(self.g_wr, self.g_ws, self.g_rs, *self.g_cool) < 0:
            raise ValueError("conductances must be non-negative")
        if min(self.k_cu, self.k_fe, self.k_m) < 0:
            raise ValueError("loss coefficients must be non-negative")
        for split in (self.cu_split, self.fe_split, self.m_split):
            if len(split) != 3 or min(split) < 0 or abs(sum(split) - 1.0) > 1e-12:
                raise ValueError("loss splits must be three non-negative fractions summing to 1")

    @property
    def conductance(self) -> np.ndarray:
        g = np.zeros((3, 3))
        g[0, 1] = g[1, 0] = self.g_wr
        g[0, 2] = g[2, 0] = self.g_ws
        g[1, 2] = g[2, 1] = self.g_rs
        return g

    @property
    def max_stable_dk(self) -> float:
        total = self.conductance.sum(axis=1) + np.asarray(self.g_cool)
        return float(2.0 * np.min(np.asarray(self.capacitance) / total))

    def steady_state(self, n_em: float, t_em: float) -> np.ndarray:
        """Node temperatures at thermal equilibrium for a constant operating point."""
        g = self.conductance
        lap = np.diag(g.sum(axis=1) + np.asarray(self.g_cool)) - g
        rhs = power_loss(self, n_em, t_em) + np.asarray(self.g_cool) * self.theta_cool
        return np.linalg.solve(lap, rhs)

    @classmethod
    def from_json(cls, path) -> "LptnParams":
        d = json.loads(Path(path).read_text())
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def to_dict(self) -> dict:
        return asdict(self)


def power_loss(lp: LptnParams, n_em: float, t_em: float) -> np.ndarray:
    """Loss power injected per node in W: copper ~ T^2, iron ~ n^1.5, mechanical ~ n."""
    if n_em < 0:
        raise ValueError("n_em must be non-negative")
    p_cu = lp.k_cu * t_em * t_em
    p_fe = lp.k_fe * n_em ** 1.5
    p_m = lp.k_m * n_em
    return (p_cu * np.asarray(lp.cu_split) + p_fe * np.asarray(lp.fe_split)
            + p_m * np.asarray(lp.m_split))


def lptn_rates(lp: LptnParams, theta: np.ndarray, n_em: float, t_em: float) -> np.ndarray:
    g = lp.conductance
    flow = g @ theta - g.sum(axis=1) * theta
    flow = flow + np.asarray(lp.g_cool) * (lp.theta_cool - theta)
    return (power_loss(lp, n_em, t_em) + flow) / np.asarray(lp.capacitance)


def lptn_step(lp: LptnParams, theta: np.ndarray, n_em: float, t_em: float, dk: float) -> np.ndarray:
    """Explicit Euler step of the three node temperatures."""
    if dk <= 0:
        raise ValueError("dk must be positive")
    if dk >= lp.max_stable_dk:
        raise ValueError(f"dk={dk} exceeds the explicit Euler stability limit {lp.max_stable_dk:.4g}")
    theta = np.asarray(theta, dtype=np.float64)
    out = theta + lptn_rates(lp, theta, n_em, t_em) * dk
    if not np.all(np.isfinite(out)) or np.max(np.abs(out)) > MAX_PLAUSIBLE_TEMP:
        raise PlantDiverged(f"plant temperatures left the plausible range: {out}")
    return out


# ---------------------------------------------------------------------------
# Sensor

@dataclass(frozen=True)
class FaultProfile:
    kind: str = "none"            # none | offset | amplified_noise
    magnitude: float = 0.0        # offset in degC, or variance multiplier
    t_start: float = 0.0
    t_end: float = 0.0
    channels: tuple = (0,)        # 0 = winding, 1 = rotor

    def __post_init__(self):
        if self.kind not in ("none", "offset", "amplified_noise"):
            raise ValueError(f"unknown fault kind {self.kind!r}")
        if self.kind != "none" and self.t_end <= self.t_start:
            raise ValueError("fault window must have t_end > t_start")
        if self.kind == "amplified_noise" and self.magnitude < 0:
            raise ValueError("noise scale must be non-negative")

    def active(self, t: float, channel: int) -> bool:
        return self.kind != "none" and channel in self.channels and self.t_start <= t < self.t_end

    @classmethod
    def offset(cls, delta=-5.0, t_start=0.0, t_end=0.0, channels=(0,)):
        return cls("offset", delta, t_start, t_end, tuple(channels))

    @classmethod
    def amplified_noise(cls, scale=10.0, t_start=0.0, t_end=0.0, channels=(0,)):
        return cls("amplified_noise", scale, t_start, t_end, tuple(channels))


@dataclass(frozen=True)
class SensorConfig:
    noise_mean: float = -1.0
    noise_var: float = 0.1
    delay: float = 1.5
    fault: FaultProfile = field(default_factory=FaultProfile)

    def __post_init__(self):
        if self.noise_var < 0:
            raise ValueError("noise variance must be non-negative")
        if self.delay < 0:
            raise ValueError("delay must be non-negative")

    def delay_steps(self, dk: float) -> int:
        return int(round(self.delay / dk))

    @classmethod
    def from_dict(cls, d: dict) -> "SensorConfig":
        d = dict(d)
        fault = d.pop("fault", None) or {}
        if "channels" in fault:
            fault["channels"] = tuple(fault["channels"])
        return cls(fault=FaultProfile(**fault), **d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fault"]["channels"] = list(d["fault"]["channels"])
        return d


class Sensor:
    """Two-channel temperature sensor with delay, Gaussian noise and faults.

    The delay is a ring buffer of ``round(delay / dk)`` samples that is
    seeded with the first true value (zero-order hold before warm-up).
    The RNG is owned by the instance.
    """

    def __init__(self, config: SensorConfig, dk: float, rng):
        self.config = config
        self.dk = dk
        self.rng = np.random.default_rng(rng)
        self.n_delay = config.delay_steps(dk)
        self._buf = None
        self._pos = 0

    def _delayed(self, truth: np.ndarray) -> np.ndarray:
        if self.n_delay == 0:
            return truth
        if self._buf is None:
            self._buf = np.tile(truth, (self.n_delay, 1))
        out = self._buf[self._pos].copy()
        self._buf[self._pos] = truth
        self._pos = (self._pos + 1) % self.n_delay
        return out

    def read(self, truth, t: float) -> np.ndarray:
        """Push the current true (theta_w, theta_r) and return the measurement."""
        cfg = self.config
        delayed = self._delayed(np.array(truth, dtype=np.float64))
        std = math.sqrt(cfg.noise_var)
        # draw both channels every call so the stream does not depend on faults
        z = self.rng.standard_normal(2)
        out = np.empty(2)
        for ch in range(2):
            scale = 1.0
            offset = 0.0
            if cfg.fault.active(t, ch):
                if cfg.fault.kind == "offset":
                    offset = cfg.fault.magnitude
                else:
                    scale = math.sqrt(cfg.fault.magnitude)
            out[ch] = delayed[ch] + cfg.noise_mean + std * scale * z[ch] + offset
        return out


def sensor_read(sensor: Sensor, truth, channel: int, t: float) -> float:
    return float(sensor.read(truth, t)[channel])


# ---------------------------------------------------------------------------
# Driving cycles and closed-loop data generation

def synthesize_cycle(seed: int, duration: float, aggressiveness: float,
                     v_max: float = 130.0 / 3.6, dt: float = 0.5) -> DrivingCycle:
    """Piecewise ramp-and-hold reference speed with a smooth road grade.

    ``aggressiveness`` in [0, 1] scales target speeds, ramp rates, hold
    brevity and grade amplitude. Zero gives a constant moderate cruise on
    flat road.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    a = float(np.clip(aggressiveness, 0.0, 1.0))
    rng = np.random.default_rng(seed)
    n = int(math.ceil(duration / dt)) + 1
    t = np.arange(n) * dt
    cruise = 50.0 / 3.6
    if a == 0.0:
        return DrivingCycle(t, np.full(n, cruise), np.zeros(n))

    v_hi = min(v_max, 12.0 + 26.0 * a)
    ramp_max = 0.8 + 2.2 * a
    v = np.empty(n)
    cur = cruise
    k = 0
    while k < n:
        if rng.random() < 0.15 * a:
            target = 0.0
        else:
            target = rng.uniform(0.3 * v_hi, v_hi)
        accel = rng.uniform(0.5, 1.0) * ramp_max
        n_ramp = max(1, int(math.ceil(abs(target - cur) / (accel * dt))))
        ramp = np.linspace(cur, target, n_ramp + 1)[1:]
        hold = rng.uniform(4.0, 40.0) * (1.0 - 0.7 * a)
        seg = np.concatenate([ramp, np.full(max(1, int(hold / dt)), target)])
        m = min(len(seg), n - k)
        v[k:k + m] = seg[:m]
        k += m
        cur = target

    amp = 0.02 + 0.06 * a
    phases = rng.uniform(0, 2 * np.pi, 3)
    periods = rng.uniform(40.0, 200.0, 3)
    phi = sum(np.sin(2 * np.pi * t / p + ph) for p, ph in zip(periods, phases)) / 3.0
    phi = np.clip(amp * phi, -0.08, 0.08)
    return DrivingCycle(t, np.clip(v, 0.0, v_max), phi)


@dataclass
class CycleRun:
    """Full closed-loop trace at the plant step."""

    t: np.ndarray
    v: np.ndarray
    n_em: np.ndarray
    cmd: np.ndarray        # (T, 3) t_em_acc, t_em_brk, t_fric_brk
    theta: np.ndarray      # (T + 1, 3)
    rates: np.ndarray      # (T, 3)


def simulate_cycle(cycle: DrivingCycle, vp: VehicleParams, lp: LptnParams,
                   driver: DriverConfig = DriverConfig(), dk: float = 0.01,
                   theta0=None) -> CycleRun:
    n = int(round(cycle.duration / dk))
    theta = np.empty((n + 1, 3))
    theta[0] = lp.theta_cool if theta0 is None else theta0
    rates = np.empty((n, 3))
    v_tr = np.empty(n)
    n_tr = np.empty(n)
    cmds = np.empty((n, 3))
    t = cycle.t[0] + np.arange(n) * dk
    v_ref_tr = np.interp(t, cycle.t, cycle.v_ref)
    phi_tr = np.interp(t, cycle.t, cycle.phi)
    v = float(v_ref_tr[0])
    integral = 0.0
    for k in range(n):
        cmd, integral = pi_driver_step(integral, v_ref_tr[k], v, dk, driver)
        n_em = em_speed(vp, v)
        t_em = cmd.t_em_acc + cmd.t_em_brk
        r = lptn_rates(lp, theta[k], n_em, t_em)
        rates[k] = r
        theta[k + 1] = lptn_step(lp, theta[k], n_em, t_em, dk)
        v_tr[k] = v
        n_tr[k] = n_em
        cmds[k] = cmd
        v = vehicle_euler_step(vp, v, cmd, phi_tr[k], dk)
    return CycleRun(t, v_tr, n_tr, cmds, theta, rates)


def generate_dataset(cycles, vp: VehicleParams = VehicleParams(), lp: LptnParams = LptnParams(),
                     driver: DriverConfig = DriverConfig(), dk: float = 0.01,
                     theta0=None) -> Dataset:
    """Closed-loop driver -> vehicle -> plant runs, one sequence per cycle.

    Records (n_em, t_em, theta_w, theta_r) at each step with the true
    winding/rotor temperature derivatives used by that step as targets.
    ``theta0`` may be one initial node-temperature vector or one per cycle.
    """
    cycles = list(cycles)
    if not cycles:
        raise ValueError("at least one cycle is required")
    seqs = []
    for sid, cyc in enumerate(cycles):
        th0 = theta0
        if theta0 is not None and np.ndim(theta0) == 2:
            th0 = theta0[sid]
        try:
            run = simulate_cycle(cyc, vp, lp, driver, dk, th0)
        except PlantDiverged as exc:
            log.warning("dropping cycle %d: %s", sid, exc)
            continue
        inputs = np.column_stack([run.n_em, run.cmd[:, 0] + run.cmd[:, 1], run.theta[:-1, 0], run.theta[:-1, 1]])
        seqs.append(Sequence(inputs, run.rates[:, :2], run.t, sid))
    return Dataset(seqs)


def training_cycles(n_cycles: int, seed: int, duration: float = 300.0,
                    aggressiveness=(0.4, 1.0), theta_range=(40.0, 110.0)):
    """Random cycle set plus initial node temperatures for data generation.

    Every third cycle runs at full aggressiveness so the winding spends a
    sizeable share of samples in the critical range.
    """
    if n_cycles < 1:
        raise ValueError("n_cycles must be >= 1")
    rng = np.random.default_rng(seed)
    cycles, theta0 = [], []
    for k in range(n_cycles):
        a = 1.0 if k % 3 == 0 else rng.uniform(*aggressiveness)
        cycles.append(synthesize_cycle(int(rng.integers(2**31)), duration, a))
        tw = rng.uniform(*theta_range)
        tr = rng.uniform(theta_range[0], min(tw, theta_range[1]))
        theta0.append([tw, tr, 65.0 + rng.uniform(0.0, 5.0)])
    return cycles, np.array(theta0)
