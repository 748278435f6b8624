"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 4-7 use the packaged default network; criterion 2 trains a fresh
one from synthetic plant data with the desk profile.
"""

import hashlib
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from lstm_mhe import default_weights_path
from lstm_mhe.harness import SimConfig, run_mil, timing_report, write_run_csv
from lstm_mhe.lstm import LstmParams, LstmState, dnn_jacobian, load_weights
from lstm_mhe.mhe import MheConfig, condense, linearize, sqp_solve
from lstm_mhe.plant import FaultProfile, generate_dataset, training_cycles
from lstm_mhe.qp import solve_qp_box
from lstm_mhe.training import TrainConfig, bptt_gradients, evaluate_metrics, split_dataset, train
from lstm_mhe.vehicle import DriveCommand, VehicleParams, longitudinal_accel
from oracles import central_jacobian, column_rel_err, fd_param_gradient, kkt_solve_active, \
    rel_err, sparse_mhe_qp
from test_mhe import NX, _tight_instance, make_model, make_window

DURATION = 600.0
FAULT_START, FAULT_END = 300.0, 330.0


def verdict(n, ok, detail, elapsed):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}  ({elapsed:.1f} s)"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


@pytest.fixture(scope="module")
def model():
    return load_weights(default_weights_path())


@pytest.fixture(scope="module")
def nominal(model):
    t0 = time.perf_counter()
    records, metrics = run_mil(SimConfig(duration=DURATION), model)
    return records, metrics, time.perf_counter() - t0


def test_c1_gradient_and_jacobian_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_jac = 0.0
    for _ in range(20):
        p = LstmParams.random(rng, scale=0.5).with_(norm_mean=np.array([5000.0, 20.0, 100.0, 80.0]),
                                                    norm_std=np.array([3000.0, 60.0, 30.0, 20.0]))
        x = np.array([rng.uniform(0, 12000), rng.uniform(-150, 150), rng.uniform(40, 150), rng.uniform(40, 110)])
        c = rng.normal(size=8)
        s = LstmState(np.tanh(c) * rng.uniform(0.1, 0.9, 8), c)
        jac = dnn_jacobian(p, x, s)

        def out(v):
            from lstm_mhe.lstm import dnn_forward
            r, s2 = dnn_forward(p, np.array([x[0], x[1], v[0], v[1]]), LstmState(v[2:10], v[10:18]))
            return np.concatenate([r, s2.h, s2.c])

        fd = central_jacobian(out, np.concatenate([x[2:4], s.h, s.c]), step=1e-5)
        worst_jac = max(worst_jac, column_rel_err(jac, fd))
    worst_grad = 0.0
    from lstm_mhe.lstm import _MATRIX_FIELDS
    for _ in range(20):
        p = LstmParams.random(rng, scale=0.5)
        x = rng.normal(size=(5, 4))
        y = rng.normal(size=(5, 2))
        _, grads = bptt_gradients(p, x, y)
        f = {n: np.array(getattr(p, n)) for n in _MATRIX_FIELDS}
        fd = fd_param_gradient(f, x, y)
        worst_grad = max(worst_grad, max(rel_err(grads[n], fd[n]) for n in fd))
    elapsed = time.perf_counter() - t0
    ok = worst_jac < 1e-5 and worst_grad < 1e-4 and elapsed < 10.0
    assert verdict(1, ok, f"jacobian rel err {worst_jac:.2e} (<1e-5), bptt rel err {worst_grad:.2e} (<1e-4)", elapsed)


def test_c2_training_quality():
    t0 = time.perf_counter()
    cycles, th0 = training_cycles(24, 1)
    data = generate_dataset(cycles, theta0=th0)
    cfg = TrainConfig()                       # desk profile
    n_samples = data.decimate(cfg.decimate).n_records
    tr, va = split_dataset(data, 0.8, 0)
    test_cycles, test_th0 = training_cycles(6, 99)
    test = generate_dataset(test_cycles, theta0=test_th0)
    params, report = train(tr, va, cfg)
    metrics = evaluate_metrics(params, test.decimate(cfg.decimate))
    nw, nr = metrics["dtheta_w"].nrmse, metrics["dtheta_r"].nrmse
    elapsed = time.perf_counter() - t0
    ok = (n_samples >= 50_000 and cfg.max_epochs <= 2000 and not report.diverged
          and nw < 0.10 and nr < 0.15 and elapsed < 1800)
    assert verdict(2, ok, f"{n_samples} samples, {report.epochs_run} epochs, held-out NRMSE "
                          f"w {100 * nw:.2f}% (<10%), r {100 * nr:.2f}% (<15%)", elapsed)


def test_c3_qp_and_sqp_oracles():
    t0 = time.perf_counter()
    worst = 0.0
    cert_ok = True
    for seed in range(50):
        m, cfg, win, x0, w = _tight_instance(seed)
        lin = linearize(cfg, m, win, x0, w)
        sol = solve_qp_box(condense(cfg, lin, win, w).qp)
        weights = (cfg.arrival_weight, cfg.hc_weight, cfg.noise_weight, cfg.meas_weight, cfg.meas_bias)
        H, g, E, D, dlo, dhi = sparse_mhe_qp(weights, win, lin.xs, w, lin.A, cfg.theta_min, cfg.theta_max)
        v, _, mult = kkt_solve_active(H, g, E, D, dlo, dhi, sol.active)
        dv = D @ v
        cert_ok &= bool(sol.converged and np.all(mult >= -1e-10) and np.all(dv >= dlo - 1e-9)
                        and np.all(dv <= dhi + 1e-9))
        n = len(w)
        ref = np.concatenate([v[:NX], v[(n + 1) * NX:]])
        worst = max(worst, float(np.max(np.abs(sol.x - ref))) / max(1.0, float(np.max(np.abs(ref)))))
    rng = np.random.default_rng(3)
    m = make_model(rng)
    cfg = MheConfig(meas_bias=(-1.0, -1.0))
    win, xs = make_window(rng, m, 15, cfg, noise=0.0)
    start = xs[0] + np.r_[3.0, -2.0, rng.normal(scale=0.05, size=NX - 2)]
    fixed = sqp_solve(cfg, m, win, x0=start, w=rng.normal(scale=0.2, size=(15, 2)))
    elapsed = time.perf_counter() - t0
    ok = cert_ok and worst < 1e-8 and fixed.cost < 1e-10 and elapsed < 30
    assert verdict(3, ok, f"50 instances max dev {worst:.1e} (<1e-8), KKT certificates ok={cert_ok}, "
                          f"perfect-data cost {fixed.cost:.1e} (<1e-10)", elapsed)


def test_c4_noise_attenuation(nominal):
    records, metrics, elapsed = nominal
    ratio = metrics.rmse_est[0] / metrics.rmse_meas[0]
    ok = (ratio <= 0.5 and all(e <= mm for e, mm in zip(metrics.rmse_est, metrics.rmse_meas))
          and metrics.constraint_violations == 0 and not metrics.aborted and elapsed < 120)
    assert verdict(4, ok, f"winding RMSE est {metrics.rmse_est[0]:.3f} / meas {metrics.rmse_meas[0]:.3f} "
                          f"= {ratio:.3f} (<=0.5); rotor {metrics.rmse_est[1]:.3f} / {metrics.rmse_meas[1]:.3f}",
                   elapsed)


def test_c5_fault_robustness(model, nominal):
    t0 = time.perf_counter()
    base = SimConfig(duration=DURATION)
    offset = FaultProfile.offset(-5.0, FAULT_START, FAULT_END, (0,))
    noisy = FaultProfile.amplified_noise(10.0, FAULT_START, FAULT_END, (0,))
    rec_o, m_o = run_mil(base.with_fault(offset), model)
    rec_n, m_n = run_mil(base.with_fault(noisy), model)
    (w_o,) = m_o.fault_windows
    (w_n,) = m_n.fault_windows
    in_window = [r for r in rec_o if FAULT_START <= r.t < FAULT_END + 3.0]
    worst = max(abs(r.est_tw - r.truth_tw) for r in in_window)
    bounds_ok = all(0.0 <= v <= 155.0 for recs in (rec_o, rec_n, nominal[0])
                    for r in recs for v in (r.est_tw, r.est_tr))
    elapsed = time.perf_counter() - t0
    ok = abs(w_o["bias_est"]) < 2.5 and w_n["rmse_est"] < w_n["rmse_meas"] and bounds_ok and worst < 10 \
        and elapsed < 240
    assert verdict(5, ok, f"offset bias est {w_o['bias_est']:+.3f} (|.|<2.5, meas {w_o['bias_meas']:+.2f}), "
                          f"max |err| {worst:.2f}; 10x noise RMSE est {w_n['rmse_est']:.3f} < meas "
                          f"{w_n['rmse_meas']:.3f}; bounds ok={bounds_ok}", elapsed)


def test_c6_timing(nominal):
    records, _, _ = nominal
    t = timing_report(records, budget_ms=100.0)
    ok = t.mean_ms < 100.0
    assert verdict(6, ok, f"N=15 dk=100 ms: mean {t.mean_ms:.2f} ms (<100; target <10), p99 {t.p99_ms:.2f}, "
                          f"max {t.max_ms:.2f} ms", 0.0)


def test_c7_determinism(model, nominal, tmp_path):
    t0 = time.perf_counter()
    records_b, _ = run_mil(SimConfig(duration=DURATION), model)
    digests = []
    for k, records in enumerate((nominal[0], records_b)):
        p = tmp_path / f"run{k}.csv"
        write_run_csv(records, p)
        digests.append(hashlib.sha256(p.read_bytes()).hexdigest())
    elapsed = time.perf_counter() - t0 + nominal[2]
    ok = digests[0] == digests[1] and elapsed < 240
    assert verdict(7, ok, f"sha256 {digests[0][:12]} vs {digests[1][:12]}", elapsed)


def test_c8_dynamics_regression():
    t0 = time.perf_counter()
    vp = VehicleParams(rho=1.204)
    a = longitudinal_accel(vp, 20.0, DriveCommand(0.0, 0.0, 0.0), 0.0)
    ok = abs(a - (-0.25472)) < 1e-4
    assert verdict(8, ok, f"a = {a:.6f} m/s^2 (expected -0.25472 +- 1e-4)", time.perf_counter() - t0)
