"""Command line interface: gen, train, sweep, verify, report.

Exit codes: 0 success, 1 a verification check failed, 2 usage error.
Every subcommand except ``report`` accepts ``--config FILE`` with
``key = value`` lines (keys are the long option names, with '-' or '_');
options given on the command line override the file.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data_io, experiments, report, trainer, verify
from .diagnostics import report_json, report_table

log = logging.getLogger("deepcp")


class UsageError(Exception):
    pass


# value parsers ---------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text!r}")
    return v


def _fraction(text: str) -> float:
    v = _positive_float(text)
    if not v < 1:
        raise argparse.ArgumentTypeError(f"observed fraction must lie in (0, 1), got {text}")
    return v


def _scale(text: str) -> str:
    parts = text.replace(" ", "").split(",")
    if len(parts) not in (1, 2) or any(p not in ("std", "variance") for p in parts):
        raise argparse.ArgumentTypeError(f"expected std, variance or a pair like variance,std, got {text!r}")
    return ",".join(parts)


def _depth_map(text: str) -> dict[int, float]:
    out = {}
    for item in filter(None, text.replace(" ", "").split(",")):
        try:
            k, v = item.split(":")
            out[int(k)] = float(v)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected depth:value pairs, got {item!r}") from None
    return out


# config file -----------------------------------------------------------------

def read_config(path) -> dict[str, str]:
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def config_to_argv(parser: argparse.ArgumentParser, config: dict[str, str]) -> list[str]:
    """Turn config entries into option tokens placed before the real arguments."""
    by_dest = {a.dest: a for a in parser._actions if a.option_strings}
    argv = []
    for key, value in config.items():
        action = by_dest.get(key)
        if action is None or key in ("config", "help"):
            raise UsageError(f"unknown config key {key!r}")
        opt = max(action.option_strings, key=len)
        if action.nargs == 0:
            if value.lower() in ("1", "true", "yes", "on"):
                argv.append(opt)
            elif value.lower() not in ("0", "false", "no", "off"):
                raise UsageError(f"config key {key!r} expects true or false")
        else:
            argv += [opt, value]
    return argv


# subcommands -----------------------------------------------------------------

def cmd_gen(args) -> int:
    if args.from_table:
        tensor = data_io.load_tensor_table(args.from_table, standardize=args.standardize)
    else:
        if not args.dims:
            raise UsageError("gen needs --dims (or --from-table)")
        tensor = data_io.generate_synthetic(args.dims, args.rank, args.seed)
    ds = data_io.split_observed(tensor, args.observed, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_io.save_dataset(ds, out / "dataset.json")
    print(f"observed={len(ds.observed)} heldout={len(ds.heldout)} shape={'x'.join(map(str, ds.shape))} "
          f"-> {out / 'dataset.json'}")
    return 0


def _init_spec(args) -> experiments.InitSpec:
    return experiments.InitSpec(args.init, args.sigma_w, args.sigma_a, args.alpha, args.rho, args.scale)


def _load(path) -> data_io.CompletionDataset:
    try:
        return data_io.load_dataset(path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    ds = _load(args.data)
    depths = tuple(args.depth)
    if len(depths) not in (1, len(ds.shape)):
        raise UsageError(f"--depth needs 1 or {len(ds.shape)} values, got {len(depths)}")
    cfg = trainer.TrainConfig(learning_rate=args.lr, max_epochs=args.epochs, log_every=args.log_every,
                              stop_train_loss=args.stop_loss, seed=args.seed)
    spec = experiments.RunSpec(str(args.data), depths, args.blocks, _init_spec(args), cfg,
                               out_dir=str(args.out), rank_threshold=args.rank_threshold)
    row = experiments.execute(spec, ds)
    drift = row["epsilon_final"] - row["epsilon_initial"]
    print(f"status={row['status']} epochs={row['epochs']} train_loss={row['final_train_loss']:.6g} "
          f"test_loss={row['final_test_loss']:.6g} effective_rank={row['effective_rank']} "
          f"epsilon_drift={drift:.3g}")
    print(f"wrote {Path(args.out) / 'trajectory.csv'}, {Path(args.out) / 'summary.json'}")
    return 0


def grid_from_args(args) -> experiments.SweepGrid:
    return experiments.SweepGrid(
        depths=args.depths, sigma_w=args.sigma_w, sigma_A=args.sigma_a, alpha=args.alphas or [args.alpha],
        seeds=list(range(args.seed_offset, args.seed_offset + args.seeds)), kind=args.init, scale=args.scale,
        learning_rate=args.lr, lr_by_depth=args.lr_by_depth or {}, max_epochs=args.epochs,
        log_every=args.log_every, num_blocks=args.blocks)


def cmd_sweep(args) -> int:
    if not Path(args.data).exists():
        raise UsageError(f"dataset file not found: {args.data}")
    grid = grid_from_args(args)

    def progress(row):
        print(f"{row['run_id']}: status={row['status']} rank={row['effective_rank']} "
              f"test_loss={row['final_test_loss']}", flush=True)

    rows = experiments.run_sweep(grid, str(args.data), args.out, workers=args.workers, progress=progress)
    print(f"{len(rows)} rows in {Path(args.out) / 'summary.csv'}")
    return 0


def cmd_verify(args) -> int:
    gradient_fn = verify.wrong_sign_gradient if args.inject_wrong_gradient else None
    if args.only is None or "conservation" in args.only:
        if len(args.eta) < 2:
            raise UsageError("--eta needs at least two step sizes")
        print(verify.conservation_table(args.eta))
    results = verify.run_suite(args.only, etas=args.eta, gradient_fn=gradient_fn,
                               log=lambda s: print(s, flush=True))
    print(report_table(results))
    if args.json:
        Path(args.json).write_text(report_json(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return 1
    print(f"all {len(results)} checks passed")
    return 0


def cmd_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summaries = {}
    for item in args.summary or []:
        label, _, path = item.rpartition("=")
        label = label or Path(path).parent.name or path
        if not Path(path).exists():
            raise UsageError(f"summary file not found: {path}")
        summaries[label] = experiments.read_summary(path)
    if not summaries and not args.trajectory:
        raise UsageError("report needs --summary and/or --trajectory")
    written = []
    if summaries:
        all_rows = [r for rows in summaries.values() for r in rows]
        if not report.usable_rows(all_rows):
            raise report.ReportError("summaries contain no finished runs to report")
        (out / "depth_rank.svg").write_text(report.depth_rank_svg(all_rows, args.jitter_seed))
        (out / "depth_loss.svg").write_text(report.depth_loss_svg(all_rows, args.jitter_seed))
        table = report.best_loss_table(summaries)
        (out / "best_loss_table.txt").write_text(table)
        print(table, end="")
        written += ["depth_rank.svg", "depth_loss.svg", "best_loss_table.txt"]
    if args.trajectory:
        traj = trainer.read_trajectory_csv(args.trajectory)
        (out / "block_norms.svg").write_text(report.block_norm_svg(traj))
        written.append("block_norms.svg")
    print("wrote " + ", ".join(str(out / w) for w in written))
    return 0


# parser ----------------------------------------------------------------------

def _add_model_args(p: argparse.ArgumentParser):
    p.add_argument("--blocks", "-R", type=int, default=100, help="number of CP blocks R (default 100)")
    p.add_argument("--init", choices=["gaussian", "diagonal", "rank1"], default="diagonal",
                   help="initialization scheme (default diagonal: small noise, diagonal set to --alpha)")
    p.add_argument("--alpha", type=_positive_float, default=1.0, help="diagonal value for --init diagonal")
    p.add_argument("--rho", type=_positive_float, default=0.2, help="scale for --init rank1")
    p.add_argument("--scale", type=_scale, default="std",
                   help="read --sigma-w/--sigma-a as 'std' or 'variance'; a pair such as "
                        "'variance,std' sets the two separately (default std)")
    p.add_argument("--lr", type=_positive_float, default=1e-2, help="learning rate")
    p.add_argument("--epochs", type=int, default=10000, help="maximum number of epochs")
    p.add_argument("--log-every", type=int, default=100, help="diagnostics cadence in epochs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepcp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate (or import) a tensor and split it into observed/held-out")
    p.add_argument("--config", help="key = value file with defaults for these options")
    p.add_argument("--dims", type=_int_list, help="tensor shape, e.g. 10,10,10,10")
    p.add_argument("--rank", type=int, default=5, help="CP rank of the synthetic tensor")
    p.add_argument("--observed", type=_fraction, default=0.2, help="observed fraction in (0, 1)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--from-table", help="read a tensor table file instead of generating")
    p.add_argument("--standardize", action="store_true", help="z-score the table's listed entries")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one model and write trajectory.csv, model.ckpt, summary.json")
    p.add_argument("--config", help="key = value file with defaults for these options")
    p.add_argument("--data", required=True, help="dataset.json written by gen")
    p.add_argument("--depth", type=_int_list, default=[0],
                   help="uniform depth k, or one depth per mode (e.g. 1,2,0)")
    _add_model_args(p)
    p.add_argument("--sigma-w", type=_positive_float, default=0.01)
    p.add_argument("--sigma-a", type=_positive_float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stop-loss", type=float, default=1e-8, help="stop when the training loss is this small")
    p.add_argument("--rank-threshold", type=_positive_float, default=1.0,
                   help="deep block norm above which a block counts toward the effective rank")
    p.add_argument("--out", required=True, help="run output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run a depth x init x seed grid, appending to summary.csv")
    p.add_argument("--config", help="key = value file with defaults for these options")
    p.add_argument("--data", required=True)
    p.add_argument("--depths", type=_int_list, default=[0, 1, 3, 5])
    _add_model_args(p)
    p.add_argument("--sigma-w", type=_float_list, default=[0.005, 0.01])
    p.add_argument("--sigma-a", type=_float_list, default=[0.01, 0.1])
    p.add_argument("--alphas", type=_float_list, help="several diagonal values (overrides --alpha)")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds per grid point")
    p.add_argument("--seed-offset", type=int, default=0)
    p.add_argument("--lr-by-depth", type=_depth_map, help="per-depth learning rates, e.g. 0:1,5:0.3")
    p.add_argument("--workers", type=int, help=f"parallel runs (default ${experiments.WORKERS_ENV} or CPU count)")
    p.add_argument("--out", required=True, help="sweep directory (summary.csv and runs/)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="run the numerical verification suite")
    p.add_argument("--config", help="key = value file with defaults for these options")
    p.add_argument("--only", type=lambda s: [x for x in s.split(",") if x],
                   help="comma-separated subset of: " + ", ".join(verify.CHECKS))
    p.add_argument("--eta", type=_float_list, default=[1e-3, 5e-4],
                   help="step sizes for the conservation order test")
    p.add_argument("--json", help="also write the results as JSON")
    p.add_argument("--inject-wrong-gradient", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="SVG charts and the best-loss table from sweep output")
    p.add_argument("--summary", action="append",
                   help="summary.csv, optionally LABEL=path; repeat for several table columns")
    p.add_argument("--trajectory", help="trajectory.csv for the block norm plot")
    p.add_argument("--jitter-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    argv = list(argv)
    if argv and argv[0] in ("gen", "train", "sweep", "verify") and "--config" in argv[1:]:
        pos = argv.index("--config")
        if pos + 1 >= len(argv):
            parser.error("--config needs a file name")
        path = argv[pos + 1]
        subparser = parser._subparsers._group_actions[0].choices[argv[0]]
        extra = config_to_argv(subparser, read_config(path))
        argv = [argv[0]] + extra + argv[1:pos] + argv[pos + 2:]
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"deepcp: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse reports usage errors this way
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore", invalid="ignore")
    try:
        return args.func(args)
    except (UsageError, ValueError) as exc:  # includes TensorFileError and ReportError
        print(f"deepcp: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
