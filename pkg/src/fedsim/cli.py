"""Command-line experiment runner.

Verbs:
  run       execute one experiment from a config file
  sweep     run a sweep over clients / batch / theta / dropout
  compare   Mann-Whitney U test between two run collections' AUC values
  replay    re-run a directory's config and verify the event-log digest
  gen-data  export a synthetic anomaly dataset as CSV

Exit codes: 0 ok, 1 usage/config error, 2 runtime failure (including a
failed replay verification).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .backends import backend_name
from .config import ConfigError, ExperimentConfig, SweepSpec
from .data import synth_anomaly, write_csv

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (defaults apply for missing keys)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, default=1, help="worker threads for client training")


def _load_config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.from_file(args.config)
    else:
        cfg = ExperimentConfig.from_dict({})
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def cmd_run(args) -> int:
    from .experiment import run_experiment

    cfg = _load_config(args)
    out = args.out or "runs/run"
    result = run_experiment(cfg, out_dir=out, workers=args.workers)
    summary = result.summary
    print(f"backend={backend_name()} mode={cfg.mode} seed={cfg.seed}")
    print(
        f"accuracy={summary.get('accuracy'):.4f} auc={summary.get('auc'):.4f} "
        f"comm_time_s={summary.get('comm_time_s'):.2f} "
        f"accepted_frac={summary.get('accepted_frac'):.3f}"
    )
    print(f"replay digest: {result.digest}")
    print(f"artifacts: {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .experiment import run_sweep

    cfg = _load_config(args)
    values = []
    for chunk in args.values.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        values.append(int(chunk) if args.axis in ("clients", "batch") else float(chunk))
    spec = SweepSpec(axis=args.axis, values=tuple(values), repeats=args.repeats)
    arms = [a.strip() for a in args.arms.split(",")] if args.arms else None
    out = args.out or f"runs/sweep-{args.axis}"
    rows = run_sweep(cfg, spec, out, arms=arms, workers=args.workers)
    failures = [r for r in rows if r.get("error")]
    print(f"{len(rows)} cells -> {os.path.join(out, 'sweep.csv')}")
    if failures:
        print(f"{len(failures)} cells failed; see errors.jsonl", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_compare(args) -> int:
    from .experiment import compare_runs

    res, verdict = compare_runs(args.dir_a, args.dir_b, alternative=args.alternative)
    print(
        f"U={res.u_statistic:.1f} n1={res.n1} n2={res.n2} "
        f"p={res.p_value:.3g} method={res.method}"
    )
    print(f"verdict: {verdict} (alpha=0.05)")
    return EXIT_OK


def cmd_replay(args) -> int:
    from .experiment import replay_run

    ok, report = replay_run(args.run_dir, workers=args.workers)
    for key, value in sorted(report.items()):
        print(f"{key}: {value}")
    if ok:
        print("replay: MATCH")
        return EXIT_OK
    print("replay: MISMATCH", file=sys.stderr)
    if report["recorded_backend"] != report["active_backend"]:
        print(
            "note: the recorded run used a different kernel backend; digests are "
            "only comparable within one backend",
            file=sys.stderr,
        )
    return EXIT_RUNTIME


def cmd_gen_data(args) -> int:
    ds = synth_anomaly(
        n=args.n, d=args.d, anomaly_frac=args.anomaly_frac,
        separation=args.separation, seed=args.seed if args.seed is not None else 1,
    )
    write_csv(ds, args.out)
    print(f"wrote {ds.n} rows x {ds.dim} features to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="execute one experiment")
    _add_common(p_run)
    p_run.set_defaults(fn=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a parameter sweep")
    _add_common(p_sweep)
    p_sweep.add_argument("--axis", required=True, choices=("clients", "batch", "theta", "dropout"))
    p_sweep.add_argument("--values", required=True, help="comma-separated axis values")
    p_sweep.add_argument("--repeats", type=int, default=1)
    p_sweep.add_argument("--arms", help="comma-separated modes to run per value")
    p_sweep.set_defaults(fn=cmd_sweep)

    p_cmp = sub.add_parser("compare", help="U test between two run collections")
    p_cmp.add_argument("dir_a")
    p_cmp.add_argument("dir_b")
    p_cmp.add_argument("--alternative", default="two_sided", choices=("two_sided", "greater"))
    p_cmp.set_defaults(fn=cmd_compare)

    p_rep = sub.add_parser("replay", help="verify a run directory's digest")
    p_rep.add_argument("run_dir")
    p_rep.add_argument("--workers", type=int, default=1)
    p_rep.set_defaults(fn=cmd_replay)

    p_gen = sub.add_parser("gen-data", help="export a synthetic dataset as CSV")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--n", type=int, default=20000)
    p_gen.add_argument("--d", type=int, default=20)
    p_gen.add_argument("--anomaly-frac", type=float, default=0.3, dest="anomaly_frac")
    p_gen.add_argument("--separation", type=float, default=4.0)
    p_gen.add_argument("--seed", type=int)
    p_gen.set_defaults(fn=cmd_gen_data)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
