"""Compare the numba and numpy kernel implementations.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Times the BPTT loss/gradient on a training-sized batch, batched prediction
and the 15-step estimator rollout with its Jacobian, checks both versions
agree, and reports the speed-up. Without numba the *_nb kernels run as
plain Python and are skipped unless --python-loops is given.
"""

import argparse
import time

import numpy as np

from lstm_mhe import kernels
from lstm_mhe._accel import NUMBA_AVAILABLE
from lstm_mhe.lstm import LstmParams


def _time(fn, repeat):
    fn()  # compile / warm caches
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng, nh=8):
    p = LstmParams.random(rng, hidden_dim=nh)
    wu, wh, b, fcw, fcb = p.stacked
    x = rng.normal(size=(64, 300, 4))
    y = rng.normal(size=(64, 300, 2))
    mask = np.ones((64, 300))
    exo = np.column_stack([rng.uniform(0, 10000, 15), rng.uniform(-100, 150, 15)])
    x0 = np.r_[90.0, 70.0, np.zeros(2 * nh)]
    w = np.zeros((15, 2))
    mean = np.array([5000.0, 20.0, 90.0, 70.0])
    std = np.array([3000.0, 60.0, 30.0, 20.0])
    return {
        "bptt 64x300": (lambda k: k(wu, wh, b, fcw, fcb, x, y, mask), "seq_loss_grad"),
        "predict 64x300": (lambda k: k(wu, wh, b, fcw, fcb, x), "seq_predict"),
        "rollout N=15 +jac": (lambda k: k(wu, wh, b, fcw, fcb, mean, std, exo, x0, w, 0.1, True), "rollout"),
    }


def _flat(out):
    if isinstance(out, tuple):
        return np.concatenate([np.ravel(np.asarray(o, dtype=float)) for o in out])
    return np.ravel(out)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--python-loops", action="store_true")
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"numba available: {NUMBA_AVAILABLE}")
    print(f"{'kernel':22s} {'numpy ms':>10s} {'numba ms':>10s} {'speed-up':>9s} {'max diff':>10s}")
    for name, (call, base) in cases(rng).items():
        k_np = getattr(kernels, base + "_np")
        k_nb = getattr(kernels, base + "_nb")
        t_np = _time(lambda: call(k_np), args.repeat)
        if NUMBA_AVAILABLE or args.python_loops:
            t_nb = _time(lambda: call(k_nb), args.repeat if NUMBA_AVAILABLE else 1)
            diff = float(np.max(np.abs(_flat(call(k_np)) - _flat(call(k_nb)))))
            print(f"{name:22s} {1e3 * t_np:10.3f} {1e3 * t_nb:10.3f} {t_np / t_nb:8.1f}x {diff:10.2e}")
        else:
            print(f"{name:22s} {1e3 * t_np:10.3f} {'-':>10s}")


if __name__ == "__main__":
    main()
