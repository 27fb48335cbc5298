"""``lsvi-lab`` command line: validate | run | sweep | diagnose | report.

Exit codes: 0 success, 1 semantic failure (violations), 2 I/O or parse failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

from . import diagnostics, harness
from .mdp_core import GroundTruthMdp, SpecError, load_spec, validate_spec

EXIT_OK, EXIT_FAIL, EXIT_IO = 0, 1, 2

log = logging.getLogger("lsvi_lab")


def _parse_error(path, exc) -> str:
    pos = getattr(exc, "pos", None)
    if pos is not None:
        return f"{path}: parse error at byte offset {pos}: {exc.msg}"
    return f"{path}: {exc}"


def cmd_validate(args) -> int:
    try:
        mdp = load_spec(args.spec)
    except json.JSONDecodeError as exc:
        print(_parse_error(args.spec, exc), file=sys.stderr)
        return EXIT_IO
    except (OSError, SpecError) as exc:
        print(f"{args.spec}: {exc}", file=sys.stderr)
        return EXIT_IO
    spec = mdp.linear_surrogate if isinstance(mdp, GroundTruthMdp) else mdp
    report = validate_spec(spec)
    print(report)
    return EXIT_OK if report.ok else EXIT_FAIL


def _load_config(args):
    try:
        cfg = harness.load_config(args.config)
    except json.JSONDecodeError as exc:
        print(_parse_error(args.config, exc), file=sys.stderr)
        return None
    except (OSError, ValueError) as exc:
        print(f"{args.config}: {exc}", file=sys.stderr)
        return None
    changes = {"seed": harness.env_seed(cfg.seed)}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    for flag, key in (("baseline", "baseline"), ("init", "init"), ("checkpoints", "checkpoints")):
        val = getattr(args, flag, None)
        if val is not None:
            changes[key] = harness.BASELINE_ALIASES.get(val, val) if key == "baseline" else val
    return cfg.replace(**changes)


def cmd_run(args) -> int:
    cfg = _load_config(args)
    if cfg is None:
        return EXIT_IO
    try:
        mdp = harness.build_mdp(cfg)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cannot load MDP: {exc}", file=sys.stderr)
        return EXIT_IO
    except SpecError as exc:
        print(f"invalid MDP:\n{exc}", file=sys.stderr)
        return EXIT_FAIL
    result = harness.run_experiment(cfg, mdp=mdp)
    baseline = None
    if cfg.baseline != "none":
        baseline = harness.run_experiment(cfg, policy=cfg.baseline, mdp=mdp)
    summary = harness.write_run_dir(args.out, result, mdp, baseline)
    _print_summary("agent", summary["agent"])
    if baseline is not None:
        _print_summary(baseline.policy, summary["baseline"])
    return EXIT_OK


def _print_summary(label, s):
    slope = "n/a" if s["slope"] is None else f"{s['slope']:.4f}"
    print(f"{label}: terminal cumulative regret {s['terminal_regret']:.6g}, log-log slope {slope}")


def _parse_grid(items) -> dict:
    grid = {}
    for item in items or []:
        key, _, vals = item.partition("=")
        if not vals:
            raise ValueError(f"grid entry {item!r} must look like key=v1,v2")
        grid[key] = [json.loads(v) for v in vals.split(",")]
    return grid


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    if cfg is None:
        return EXIT_IO
    try:
        grid = _parse_grid(args.grid)
    except (ValueError, json.JSONDecodeError) as exc:
        print(f"bad --grid: {exc}", file=sys.stderr)
        return EXIT_IO
    if not grid:
        grid = {"seed": [cfg.seed]}
    cells = harness.sweep(cfg, grid, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(harness.sweep_csv(cells))
    (out / "sweep_summary.json").write_text(json.dumps(harness.sweep_summary(cells), indent=2))
    failed = [c for c in cells if c.error]
    for c in cells:
        status = "ERROR " + c.error if c.error else f"regret {c.summary['terminal_regret']:.6g}"
        print(f"cell {c.index} {c.params}: {status}")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_diagnose(args) -> int:
    run_dir = Path(args.run_dir)
    needed = ("config.json", "mdp.json", "checkpoints.npz")
    if not run_dir.is_dir() or any(not (run_dir / n).exists() for n in needed):
        print(f"{run_dir}: missing run artifacts ({', '.join(needed)})", file=sys.stderr)
        return EXIT_IO
    try:
        report = diagnostics.diagnose_run_dir(run_dir)
    except diagnostics.MissingCheckpoints as exc:
        print(f"{run_dir}: {exc}", file=sys.stderr)
        return EXIT_IO
    except (OSError, ValueError) as exc:
        print(f"{run_dir}: {exc}", file=sys.stderr)
        return EXIT_IO
    out = Path(args.out) if args.out else run_dir / "diagnostics.json"
    out.write_text(report.to_json())
    print(report.table())
    return EXIT_OK if report.ok else EXIT_FAIL


def cmd_report(args) -> int:
    from . import plotting

    curves = {}
    for run_dir in args.run_dirs:
        run_dir = Path(run_dir)
        csvs = sorted(run_dir.glob("*.csv")) if run_dir.is_dir() else []
        csvs = [p for p in csvs if p.name == "run.csv" or p.name.startswith("baseline_")]
        if not csvs:
            print(f"{run_dir}: no run CSVs found", file=sys.stderr)
            return EXIT_IO
        for path in csvs:
            label = "agent" if path.name == "run.csv" else path.stem.replace("baseline_", "")
            if len(args.run_dirs) > 1:
                label = f"{run_dir.name}:{label}"
            curves[label] = harness.read_run_csv(path)["cum_regret"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_tsv(out / "regret.tsv", curves, log=False)
    _write_tsv(out / "regret_loglog.tsv", curves, log=True)
    for fmt in args.format:
        plotting.save(plotting.regret_figure(curves), out / f"regret.{fmt}")
        plotting.save(plotting.regret_figure(curves, loglog=True), out / f"regret_loglog.{fmt}")
    for label, y in curves.items():
        slope = harness.safe_slope(y)
        print(f"{label}: terminal {y[-1]:.6g}, slope {'n/a' if slope is None else f'{slope:.4f}'}")
    return EXIT_OK


def _write_tsv(path, curves: dict, log: bool) -> None:
    labels = list(curves)
    K = max(len(v) for v in curves.values())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["log_k" if log else "k", *(f"log_{l}" if log else l for l in labels)])
        for i in range(K):
            k = i + 1
            row = [repr(math.log(k)) if log else k]
            for l in labels:
                y = curves[l]
                if i >= len(y):
                    row.append("")
                elif log:
                    row.append(repr(math.log(y[i])) if y[i] > 0 else "")
                else:
                    row.append(repr(float(y[i])))
            w.writerow(row)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lsvi-lab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a spec file")
    p.add_argument("spec")
    p.set_defaults(func=cmd_validate)

    def experiment_flags(p):
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--baseline", choices=["none", "random", "nobonus"])
        p.add_argument("--init", choices=list(harness.INIT_POLICIES))
        p.add_argument("--checkpoints", choices=["none", "every-k"])

    p = sub.add_parser("run", help="run one experiment")
    experiment_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a parameter grid")
    experiment_flags(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--grid", action="append", metavar="KEY=V1,V2",
                   help=f"grid axis; keys: {', '.join(harness.SWEEP_KEYS)}")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("diagnose", help="check proof-layer bounds on a run directory")
    p.add_argument("run_dir")
    p.add_argument("--out")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("report", help="write regret TSVs and figures")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--format", action="append", choices=["png", "pdf", "svg"])
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "format", "unset") is None:
        args.format = ["png"]
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
