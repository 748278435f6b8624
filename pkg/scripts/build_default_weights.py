"""Regenerate the packaged network and its golden forward-pass fixture.

    python3 scripts/build_default_weights.py [--epochs 2000]

Trains on closed-loop data from the default synthetic plant, writes
src/lstm_mhe/data/default_weights.json, a training report next to it, and
golden_forward.json with a short forward sequence evaluated by the scalar
reference implementation in tests/oracles.py.
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

from lstm_mhe.lstm import load_weights, save_weights  # noqa: E402
from lstm_mhe.plant import generate_dataset, training_cycles  # noqa: E402
from lstm_mhe.training import TrainConfig, evaluate_metrics, split_dataset, train  # noqa: E402
from oracles import dnn_forward_scalar  # noqa: E402

DATA = ROOT / "src" / "lstm_mhe" / "data"


def golden(path_weights, n=12, seed=3):
    p = load_weights(path_weights)
    rng = np.random.default_rng(seed)
    h = [0.0] * p.hidden_dim
    c = [0.0] * p.hidden_dim
    cases = []
    for _ in range(n):
        x = [float(rng.uniform(0, 12000)), float(rng.uniform(-150, 150)),
             float(rng.uniform(40, 150)), float(rng.uniform(40, 110))]
        rates, h_new, c_new = dnn_forward_scalar(p, x, h, c)
        cases.append({"input": x, "h_prev": list(h), "c_prev": list(c), "rates": list(rates),
                      "h": list(h_new), "c": list(c_new)})
        h, c = list(h_new), list(c_new)
    return {"weights": "default_weights.json", "cases": cases}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=2000)
    ap.add_argument("--cycles", type=int, default=24)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--golden-only", action="store_true")
    args = ap.parse_args()
    out = DATA / "default_weights.json"
    if not args.golden_only:
        t0 = time.time()
        cycles, th0 = training_cycles(args.cycles, args.seed)
        data = generate_dataset(cycles, theta0=th0)
        tr, va = split_dataset(data, 0.8, 0)
        test_cycles, test_th0 = training_cycles(6, args.seed + 98)
        test = generate_dataset(test_cycles, theta0=test_th0)
        cfg = TrainConfig(max_epochs=args.epochs)
        params, report = train(tr, va, cfg)
        report.metrics = evaluate_metrics(params, test.decimate(cfg.decimate))
        save_weights(params, out)
        report.to_json(DATA / "default_weights_report.json")
        print(f"trained in {time.time() - t0:.0f} s:", report.metrics)
    (DATA / "golden_forward.json").write_text(json.dumps(golden(out), indent=1))


if __name__ == "__main__":
    main()
