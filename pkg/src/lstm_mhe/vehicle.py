"""One-dimensional longitudinal vehicle model and PI driver."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np


@dataclass(frozen=True)
class VehicleParams:
    m_veh: float = 1160.0
    c_d: float = 0.32
    c_r: float = 0.011
    r_dyn: float = 0.293
    a_c: float = 2.21
    i_diff: float = 9.3
    v_max: float = 130.0 / 3.6
    rho: float = 1.204
    g: float = 9.81

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value > 0:
                raise ValueError(f"{name} must be strictly positive")

    @classmethod
    def from_json(cls, path) -> "VehicleParams":
        return cls(**json.loads(Path(path).read_text()))


class DriveCommand(NamedTuple):
    t_em_acc: float = 0.0
    t_em_brk: float = 0.0
    t_fric_brk: float = 0.0

    @property
    def t_em(self) -> float:
        return self.t_em_acc + self.t_em_brk

    @property
    def total(self) -> float:
        return self.t_em_acc + self.t_em_brk + self.t_fric_brk


@dataclass(frozen=True)
class DriverConfig:
    """PI gains and actuator limits. Torques are referred to the machine shaft."""

    kp: float = 800.0
    ki: float = 50.0
    t_em_max: float = 150.0
    t_fric_max: float = 1500.0
    v_max: float = 130.0 / 3.6


@dataclass(frozen=True)
class DrivingCycle:
    t: np.ndarray
    v_ref: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        v = np.asarray(self.v_ref, dtype=np.float64)
        phi = np.asarray(self.phi, dtype=np.float64)
        if not (t.shape == v.shape == phi.shape) or t.ndim != 1 or t.size < 2:
            raise ValueError("cycle columns must be equal-length 1-D arrays with >= 2 samples")
        if np.any(np.diff(t) <= 0):
            raise ValueError("cycle time stamps must be strictly increasing")
        if np.any(v < 0):
            raise ValueError("reference velocity must be non-negative")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "v_ref", v)
        object.__setattr__(self, "phi", phi)

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])

    def at(self, t: float) -> tuple[float, float]:
        return float(np.interp(t, self.t, self.v_ref)), float(np.interp(t, self.t, self.phi))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_s", "v_ref_mps", "phi_rad"])
            for row in zip(self.t, self.v_ref, self.phi):
                w.writerow([repr(float(x)) for x in row])

    @classmethod
    def from_csv(cls, path) -> "DrivingCycle":
        data = np.genfromtxt(path, delimiter=",", names=True)
        return cls(data["t_s"], data["v_ref_mps"], data["phi_rad"])


def longitudinal_accel(vp: VehicleParams, v: float, cmd: DriveCommand, phi: float) -> float:
    traction = cmd.total * vp.i_diff / vp.r_dyn
    grade = vp.m_veh * vp.g * math.sin(phi)
    aero = 0.5 * vp.c_d * vp.a_c * vp.rho * v * v
    rolling = vp.m_veh * vp.g * math.cos(phi) * vp.c_r
    return (traction - grade - aero - rolling) / vp.m_veh


def vehicle_euler_step(vp: VehicleParams, v: float, cmd: DriveCommand, phi: float, dk: float) -> float:
    """Explicit Euler velocity update; no reverse driving, governor at ``v_max``."""
    if dk <= 0:
        raise ValueError("dk must be positive")
    return min(max(0.0, v + longitudinal_accel(vp, v, cmd, phi) * dk), vp.v_max)


def em_speed(vp: VehicleParams, v):
    """Machine speed in rpm for a vehicle speed in m/s."""
    return 30.0 * v * vp.i_diff / (math.pi * vp.r_dyn)


def pi_driver_step(integral: float, v_ref: float, v: float, dk: float,
                   limits: DriverConfig = DriverConfig()) -> tuple[DriveCommand, float]:
    """PI velocity tracking with clamping anti-windup and regen-first braking.

    Returns the torque split and the updated error integral.
    """
    if dk <= 0:
        raise ValueError("dk must be positive")
    v_ref = min(max(v_ref, 0.0), limits.v_max)
    err = v_ref - v
    t_min = -(limits.t_em_max + limits.t_fric_max)
    t_max = limits.t_em_max if v < limits.v_max else 0.0

    candidate = integral + err * dk
    demand = limits.kp * err + limits.ki * candidate
    saturated_hi = demand > t_max and err > 0
    saturated_lo = demand < t_min and err < 0
    if saturated_hi or saturated_lo:
        candidate = integral
        demand = limits.kp * err + limits.ki * candidate
    demand = min(max(demand, t_min), t_max)

    if demand >= 0:
        cmd = DriveCommand(demand, 0.0, 0.0)
    else:
        regen = max(demand, -limits.t_em_max)
        cmd = DriveCommand(0.0, regen, demand - regen)
    return cmd, candidate
