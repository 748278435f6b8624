"""Closed-loop model-in-the-loop simulation of driver, vehicle, thermal
plant, sensor and estimator, plus run metrics and timing reports."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .lstm import LstmParams, load_weights
from .mhe import MheConfig, MovingHorizonEstimator, dynamics_step
from .plant import (
    FaultProfile,
    LptnParams,
    PlantDiverged,
    Sensor,
    SensorConfig,
    lptn_step,
    synthesize_cycle,
)
from .vehicle import DriverConfig, DrivingCycle, VehicleParams, em_speed, pi_driver_step, vehicle_euler_step

log = logging.getLogger(__name__)

RUN_COLUMNS = ("t_s", "truth_tw", "truth_tr", "meas_tw", "meas_tr", "est_tw", "est_tr", "v_mps",
               "t_em_acc", "t_em_brk", "t_fric_brk", "solve_ms", "sqp_iters")
SERIES_COLUMNS = ("t_s", "truth_tw", "meas_tw", "est_tw", "truth_tr", "meas_tr", "est_tr")
RECOVERY_MARGIN = 3.0


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    duration: float = 600.0
    dk: float = 0.1
    substeps: int = 10                  # plant/driver steps per estimator step
    seed: int = 0
    cycle_file: str | None = None
    cycle_seed: int = 7
    aggressiveness: float = 0.9
    theta0: tuple = (60.0, 60.0, 65.0)
    weights: str | None = None          # None -> packaged default weights
    compensate_sensor: bool = True      # estimator knows sensor mean and delay
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    plant: LptnParams = field(default_factory=LptnParams)
    driver: DriverConfig = field(default_factory=DriverConfig)
    sensor: SensorConfig = field(default_factory=SensorConfig)
    estimator: MheConfig = field(default_factory=lambda: MheConfig(outlier_gate=3.0))

    def __post_init__(self):
        if self.duration <= 0 or self.dk <= 0 or self.substeps < 1:
            raise ConfigError("duration, dk must be positive and substeps >= 1")
        if not math.isclose(self.dk, self.estimator.dk, rel_tol=1e-12):
            raise ConfigError(f"simulation dk {self.dk} differs from estimator dk {self.estimator.dk}")
        if len(self.theta0) != 3:
            raise ConfigError("theta0 needs three node temperatures")
        fault = self.sensor.fault
        if fault.kind != "none" and (fault.t_start < 0 or fault.t_end > self.duration):
            raise ConfigError("fault window must lie inside the simulation span")

    def make_cycle(self) -> DrivingCycle:
        if self.cycle_file:
            cyc = DrivingCycle.from_csv(self.cycle_file)
        else:
            cyc = synthesize_cycle(self.cycle_seed, self.duration, self.aggressiveness, self.vehicle.v_max)
        if cyc.duration + 1e-9 < self.duration:
            raise ConfigError(f"cycle lasts {cyc.duration} s, shorter than duration {self.duration} s")
        return cyc

    def estimator_config(self) -> MheConfig:
        est = self.estimator
        if self.compensate_sensor:
            est = replace(est, meas_bias=(self.sensor.noise_mean,) * 2,
                          meas_delay_steps=self.sensor.delay_steps(self.dk))
        return est

    def load_model(self) -> LstmParams:
        if self.weights is None:
            from . import default_weights_path
            return load_weights(default_weights_path())
        path = Path(self.weights)
        if not path.is_file():
            raise FileNotFoundError(f"weights file {path} not found; train one with `lstm-mhe train` "
                                    "or omit 'weights' to use the packaged default")
        return load_weights(path)

    def with_fault(self, fault: FaultProfile) -> "SimConfig":
        return replace(self, sensor=replace(self.sensor, fault=fault))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sensor"] = self.sensor.to_dict()
        d["estimator"] = self.estimator.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "SimConfig":
        d = dict(d)
        try:
            sub = {
                "vehicle": VehicleParams(**d.pop("vehicle", {})),
                "plant": LptnParams(**{k: tuple(v) if isinstance(v, list) else v
                                       for k, v in d.pop("plant", {}).items()}),
                "driver": DriverConfig(**d.pop("driver", {})),
                "sensor": SensorConfig.from_dict(d.pop("sensor", {})),
            }
            if "estimator" in d:
                sub["estimator"] = MheConfig.from_dict(d.pop("estimator"))
            if "theta0" in d:
                d["theta0"] = tuple(d["theta0"])
            for key in ("weights", "cycle_file"):
                if d.get(key) and base_dir is not None and not Path(d[key]).is_absolute():
                    d[key] = str(Path(base_dir) / d[key])
            return cls(**d, **sub)
        except TypeError as exc:
            raise ConfigError(f"invalid simulation config: {exc}") from exc

    @classmethod
    def from_json(cls, path) -> "SimConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), base_dir=path.parent)


class SimRecord(NamedTuple):
    t: float
    truth_tw: float
    truth_tr: float
    meas_tw: float
    meas_tr: float
    est_tw: float
    est_tr: float
    v: float
    t_em_acc: float
    t_em_brk: float
    t_fric_brk: float
    solve_ms: float
    sqp_iters: int
    status: str = "ok"


@dataclass
class RunMetrics:
    n_records: int
    rmse_meas: tuple
    rmse_est: tuple
    bias_est: tuple
    max_abs_err_est: tuple
    solve_ms_mean: float
    solve_ms_max: float
    solve_ms_p99: float
    constraint_violations: int
    failed_steps: int
    aborted: bool = False
    fault_windows: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


class TimingReport(NamedTuple):
    mean_ms: float
    max_ms: float
    p99_ms: float
    budget_ms: float
    n_over: int
    passed: bool


# ---------------------------------------------------------------------------

def run_mil(cfg: SimConfig, model: LstmParams | None = None,
            truth_model: LstmParams | None = None) -> tuple[list, RunMetrics]:
    """Closed loop at the estimator rate with ``cfg.substeps`` plant steps per sample.

    At each sample the sensor reads the current truth, the estimator is fed
    that reading with the parameters of the elapsed interval, and then the
    PI driver, vehicle and plant advance one sample. A failed estimator step
    holds the previous estimate; plant divergence stops the run and returns
    the partial log.

    With ``truth_model`` the winding and rotor truth is produced by that
    network at the estimator rate from the interval-mean inputs instead of
    by the thermal network (model-consistent data).
    """
    cycle = cfg.make_cycle()
    model = cfg.load_model() if model is None else model
    est_cfg = cfg.estimator_config()
    estimator = MovingHorizonEstimator(model, est_cfg, cfg.vehicle)
    sensor = Sensor(cfg.sensor, cfg.dk, np.random.default_rng(cfg.seed))

    n_steps = int(round(cfg.duration / cfg.dk))
    h = cfg.dk / cfg.substeps
    theta = np.asarray(cfg.theta0, dtype=np.float64)
    if truth_model is not None:
        x_truth = np.concatenate([theta[:2], np.zeros(2 * truth_model.hidden_dim)])
    t0 = float(cycle.t[0])
    v = cycle.at(t0)[0]
    integral = 0.0
    p_prev = None
    held = None
    records = []
    aborted = False

    for s in range(n_steps):
        t = s * cfg.dk
        y = sensor.read(theta[:2], t)
        status = "ok"
        try:
            est, sol = estimator.step(y, p_prev)
            if sol.status == "failed":
                raise RuntimeError("solver failure")
            est_th = (est.theta_w, est.theta_r)
            solve_ms, iters = sol.solve_time * 1e3, sol.sqp_iters
        except Exception as exc:  # the loop must survive any estimator fault
            log.warning("estimator step %d failed (%s); holding previous estimate", s, exc)
            status = "held"
            est_th = held if held is not None else tuple(y - np.asarray(est_cfg.meas_bias))
            solve_ms, iters = math.nan, 0
        held = est_th

        truth = theta.copy()
        cmd_sum = np.zeros(3)
        v_sum = 0.0
        phi0 = cycle.at(t0 + t)[1]
        try:
            for i in range(cfg.substeps):
                ts = t0 + t + i * h
                v_ref, phi = cycle.at(ts)
                cmd, integral = pi_driver_step(integral, v_ref, v, h, cfg.driver)
                n_em = em_speed(cfg.vehicle, v)
                theta = lptn_step(cfg.plant, theta, n_em, cmd.t_em, h)
                cmd_sum += cmd
                v_sum += v
                v = vehicle_euler_step(cfg.vehicle, v, cmd, phi, h)
        except PlantDiverged as exc:
            log.error("plant diverged at t=%.2f s: %s", t, exc)
            aborted = True
        cmd_mean = cmd_sum / cfg.substeps
        p_prev = np.array([*cmd_mean, phi0, v_sum / cfg.substeps])
        if truth_model is not None:
            x_truth = dynamics_step(est_cfg, truth_model, p_prev, x_truth, vehicle=cfg.vehicle)
            theta[:2] = x_truth[:2]
        records.append(SimRecord(t, truth[0], truth[1], y[0], y[1], est_th[0], est_th[1],
                                 v_sum / cfg.substeps, *cmd_mean, solve_ms, iters, status))
        if aborted:
            break

    metrics = compute_metrics(records, cfg.sensor.fault, (est_cfg.theta_min, est_cfg.theta_max))
    metrics.aborted = aborted
    return records, metrics


def _window_stats(rec, sel, channel):
    truth = rec[:, 1 + channel]
    meas = rec[:, 3 + channel]
    est = rec[:, 5 + channel]
    err_m = meas[sel] - truth[sel]
    err_e = est[sel] - truth[sel]
    return {
        "rmse_meas": float(np.sqrt(np.mean(err_m ** 2))),
        "rmse_est": float(np.sqrt(np.mean(err_e ** 2))),
        "bias_meas": float(np.mean(err_m)),
        "bias_est": float(np.mean(err_e)),
        "max_abs_err_est": float(np.max(np.abs(err_e))),
    }


def compute_metrics(records, fault: FaultProfile | None = None, bounds=(0.0, 155.0),
                    recovery_margin: float = RECOVERY_MARGIN) -> RunMetrics:
    if not records:
        raise ValueError("no records")
    rec = np.array([r[:13] for r in records], dtype=np.float64)
    err_m = rec[:, 3:5] - rec[:, 1:3]
    err_e = rec[:, 5:7] - rec[:, 1:3]
    solve = rec[:, 11]
    solve = solve[np.isfinite(solve)]
    violations = int(np.sum((rec[:, 5:7] < bounds[0]) | (rec[:, 5:7] > bounds[1])))
    failed = sum(1 for r in records if r.status != "ok")
    windows = []
    if fault is not None and fault.kind != "none":
        sel = (rec[:, 0] >= fault.t_start) & (rec[:, 0] < fault.t_end + recovery_margin)
        if np.any(sel):
            for ch in fault.channels:
                windows.append({"kind": fault.kind, "channel": int(ch), "t_start": fault.t_start,
                                "t_end": fault.t_end + recovery_margin, "n": int(np.sum(sel)),
                                **_window_stats(rec, sel, ch)})
    return RunMetrics(
        n_records=len(records),
        rmse_meas=tuple(float(v) for v in np.sqrt(np.mean(err_m ** 2, axis=0))),
        rmse_est=tuple(float(v) for v in np.sqrt(np.mean(err_e ** 2, axis=0))),
        bias_est=tuple(float(v) for v in np.mean(err_e, axis=0)),
        max_abs_err_est=tuple(float(v) for v in np.max(np.abs(err_e), axis=0)),
        solve_ms_mean=float(np.mean(solve)) if solve.size else math.nan,
        solve_ms_max=float(np.max(solve)) if solve.size else math.nan,
        solve_ms_p99=float(np.percentile(solve, 99)) if solve.size else math.nan,
        constraint_violations=violations,
        failed_steps=failed,
        fault_windows=windows,
    )


def fault_experiment(cfg: SimConfig, profile: FaultProfile, model: LstmParams | None = None) -> dict:
    """Nominal and faulted runs with the same seed, compared inside the fault window."""
    if profile.kind != "none" and (profile.t_start < 0 or profile.t_end > cfg.duration):
        raise ConfigError("fault window must lie inside the run")
    model = cfg.load_model() if model is None else model
    nominal_cfg = cfg.with_fault(FaultProfile())
    faulted_cfg = cfg.with_fault(profile)
    nom_rec, nom = run_mil(nominal_cfg, model)
    if profile.kind == "none":
        flt_rec, flt = nom_rec, nom
    else:
        flt_rec, flt = run_mil(faulted_cfg, model)
    report = {"profile": asdict(profile), "nominal": nom.to_dict(), "faulted": flt.to_dict(), "windows": []}
    if profile.kind != "none":
        # nominal statistics over the same window for the degradation figure
        ref = compute_metrics(nom_rec, profile).fault_windows
        for w_f, w_n in zip(flt.fault_windows, ref):
            report["windows"].append({
                **w_f,
                "nominal_rmse_est": w_n["rmse_est"],
                "degradation_rmse_est": w_f["rmse_est"] - w_n["rmse_est"],
            })
    report["records"] = flt_rec
    return report


def timing_report(records, budget_ms: float = 100.0) -> TimingReport:
    ms = np.array([r.solve_ms if hasattr(r, "solve_ms") else r for r in records], dtype=np.float64)
    ms = ms[np.isfinite(ms)]
    if ms.size == 0:
        raise ValueError("no timed records")
    n_over = int(np.sum(ms > budget_ms))
    return TimingReport(float(np.mean(ms)), float(np.max(ms)), float(np.percentile(ms, 99)),
                        budget_ms, n_over, n_over == 0)


# ---------------------------------------------------------------------------
# Files

def write_run_csv(records, path, with_timing: bool = False) -> None:
    """run.csv with repr floats. Wall-clock solve times differ between
    otherwise identical runs, so unless ``with_timing`` is set the solve_ms
    column holds nan and the file is bit-reproducible (see write_timing_csv).
    """
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(RUN_COLUMNS)
        for r in records:
            ms = r.solve_ms if with_timing else math.nan
            wr.writerow([repr(float(x)) for x in r[:11]] + [repr(float(ms)), int(r.sqp_iters)])


def write_timing_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(("t_s", "solve_ms", "sqp_iters"))
        for r in records:
            wr.writerow([repr(float(r.t)), repr(float(r.solve_ms)), int(r.sqp_iters)])


def read_run_csv(path) -> list:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = tuple(next(rd))
        if header != RUN_COLUMNS:
            raise ValueError(f"unexpected run.csv columns {header}")
        out = []
        for row in rd:
            vals = [float(x) for x in row]
            status = "ok" if vals[12] > 0 else "held"     # a held step runs no SQP iteration
            out.append(SimRecord(*vals[:12], int(vals[12]), status))
    return out


def write_series_csv(records, path) -> None:
    """Plot-ready truth / measured / estimated series for both channels."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(SERIES_COLUMNS)
        for r in records:
            wr.writerow([repr(float(x)) for x in (r.t, r.truth_tw, r.meas_tw, r.est_tw,
                                                   r.truth_tr, r.meas_tr, r.est_tr)])
