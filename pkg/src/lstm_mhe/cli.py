"""Command line entry point: lstm-mhe <subcommand> ..."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__

log = logging.getLogger("lstm_mhe")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; here that code means a runtime failure
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, default=float))


def cmd_generate_data(args) -> int:
    from .plant import generate_dataset, training_cycles
    if args.cycles < 1 or args.duration <= 0:
        raise ValueError("--cycles must be >= 1 and --duration positive")
    cycles, theta0 = training_cycles(args.cycles, args.seed, args.duration)
    data = generate_dataset(cycles, theta0=theta0)
    if len(data) == 0:
        raise RuntimeError("every cycle diverged; no data written")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    data.to_csv(args.out)
    print(f"wrote {data.n_records} records in {len(data)} sequences to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .dataset import Dataset
    from .lstm import save_weights
    from .training import TrainConfig, evaluate_metrics, split_dataset, train
    if not Path(args.data).is_file():
        raise FileNotFoundError(f"data file {args.data} not found; create one with `lstm-mhe generate-data`")
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.epochs is not None:
        cfg = replace(cfg, max_epochs=args.epochs)
    data = Dataset.from_csv(args.data)
    if len(data) < 3:
        raise ValueError("need at least three sequences for train/validation/test splits")
    rest, test = split_dataset(data, 0.9, cfg.seed)
    tr, va = split_dataset(rest, 0.8, cfg.seed + 1)
    params, report = train(tr, va, cfg)
    save_weights(params, args.out)
    report.metrics = evaluate_metrics(params, test.decimate(cfg.decimate))
    if args.report:
        report.to_json(args.report)
    for name, m in report.metrics.items():
        print(f"{name}: NRMSE {100 * m.nrmse:.2f}%  RMSE {m.rmse:.4g}  MAE {m.mae:.4g}")
    print(f"weights written to {args.out}")
    if report.diverged:
        log.error("training diverged: %s", report.message)
        return EXIT_RUNTIME
    return EXIT_OK


def _sim_config(args):
    from .harness import SimConfig
    cfg = SimConfig.from_json(args.config) if args.config else SimConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "weights", None):
        cfg = replace(cfg, weights=args.weights)
    return cfg


def cmd_simulate(args) -> int:
    from .harness import run_mil, timing_report, write_run_csv, write_timing_csv
    cfg = _sim_config(args)
    model = cfg.load_model()
    records, metrics = run_mil(cfg, model)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_run_csv(records, out, with_timing=args.timing_in_csv)
    write_timing_csv(records, out.with_name("timing.csv"))
    metrics_path = Path(args.metrics) if args.metrics else out.with_name("metrics.json")
    d = metrics.to_dict()
    d["timing"] = timing_report(records)._asdict()
    _write_json(metrics_path, d)
    print(f"RMSE meas {metrics.rmse_meas[0]:.3f}/{metrics.rmse_meas[1]:.3f}  "
          f"est {metrics.rmse_est[0]:.3f}/{metrics.rmse_est[1]:.3f} degC (winding/rotor)")
    print(f"solve ms mean {metrics.solve_ms_mean:.2f} p99 {metrics.solve_ms_p99:.2f} max {metrics.solve_ms_max:.2f}")
    print(f"wrote {out}, {out.with_name('timing.csv')} and {metrics_path}")
    return EXIT_RUNTIME if metrics.aborted else EXIT_OK


def cmd_fault_test(args) -> int:
    from .harness import fault_experiment, write_run_csv
    from .plant import FaultProfile
    cfg = _sim_config(args)
    start = args.t_start if args.t_start is not None else 0.5 * cfg.duration
    end = start + args.length
    if args.kind == "offset":
        mag = -5.0 if args.magnitude is None else args.magnitude
    else:
        mag = 10.0 if args.magnitude is None else args.magnitude
    profile = FaultProfile(args.kind, mag, start, end, tuple(args.channel))
    report = fault_experiment(cfg, profile)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_run_csv(report.pop("records"), out / "run.csv")
    _write_json(out / "fault.json", report)
    for w in report["windows"]:
        print(f"channel {w['channel']} {w['kind']} [{w['t_start']:.1f}, {w['t_end']:.1f}) s: "
              f"bias est {w['bias_est']:+.3f}  RMSE est {w['rmse_est']:.3f}  RMSE meas {w['rmse_meas']:.3f}")
    print(f"wrote {out / 'run.csv'} and {out / 'fault.json'}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .harness import read_run_csv, write_series_csv
    if not Path(args.inp).is_file():
        raise FileNotFoundError(f"run file {args.inp} not found; produce one with `lstm-mhe simulate`")
    records = read_run_csv(args.inp)
    out = args.out or str(Path(args.inp).with_name("series.csv"))
    write_series_csv(records, out)
    print(f"wrote {len(records)} rows to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lstm-mhe", description="LSTM-embedded MHE temperature estimation toolkit")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate-data", help="closed-loop synthetic plant data for training")
    g.add_argument("--cycles", type=int, default=24)
    g.add_argument("--duration", type=float, default=300.0, help="seconds per cycle")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train the LSTM rate model")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="TrainConfig JSON")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", required=True, help="weights JSON")
    t.add_argument("--report", help="training report JSON")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("simulate", help="closed-loop MiL run")
    s.add_argument("--config", help="SimConfig JSON")
    s.add_argument("--seed", type=int)
    s.add_argument("--weights")
    s.add_argument("--out", required=True, help="run.csv path")
    s.add_argument("--metrics", help="metrics JSON (default: metrics.json next to --out)")
    s.add_argument("--timing-in-csv", action="store_true",
                   help="write wall-clock solve times into run.csv (breaks bit-reproducibility)")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fault-test", help="nominal versus faulted sensor run")
    f.add_argument("--config")
    f.add_argument("--seed", type=int)
    f.add_argument("--weights")
    f.add_argument("--kind", choices=("offset", "amplified_noise"), default="offset")
    f.add_argument("--magnitude", type=float, help="offset in degC or variance factor")
    f.add_argument("--t-start", type=float)
    f.add_argument("--length", type=float, default=30.0)
    f.add_argument("--channel", type=int, nargs="+", default=[0], choices=(0, 1))
    f.add_argument("--out", required=True, help="output directory")
    f.set_defaults(func=cmd_fault_test)

    r = sub.add_parser("report", help="plot-ready truth/measured/estimated series")
    r.add_argument("--in", dest="inp", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"lstm-mhe: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        print(f"lstm-mhe: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        log.exception("runtime failure")
        print(f"lstm-mhe: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
