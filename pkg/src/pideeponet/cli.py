"""Command-line entry point: generate, train, eval, predict, selftest.

Every subcommand works inside a run directory (``--out``, default ``run``):

    generate   OUT/data.bin (+ OUT/constraint_rows.bin with --rows), OUT/config.ini
    train      OUT/checkpoint.bin, OUT/metrics.csv, OUT/config.ini
    eval       prints per-run mean/std of the relative L2 error, writes nothing
    predict    OUT/prediction.csv for one test input (or --input file)

Exit status: 0 on success, 1 on usage errors, 2 on runtime failures.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import checks, harness, pde
from .deeponet import OperatorDataset, load_checkpoint, write_dataset

log = logging.getLogger("pideeponet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _common(p):
    p.add_argument("--config", type=Path, help="INI config file")
    p.add_argument("--preset", choices=pde.KINDS, help="start from a built-in preset instead of a file")
    p.add_argument("--scale", choices=("desk", "paper"), default="desk", help="preset size (default desk)")
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--out", type=Path, default=Path("run"), help="run directory (default ./run)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pideeponet", description="Physics-informed DeepONet experiments.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("generate", help="sample inputs, collocation pools and a solved test set")
    _common(p)
    p.add_argument("--rows", action="store_true", help="also export constraint rows in the dataset row format")

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--data", type=Path, help="dataset archive (default OUT/data.bin, generated if missing)")

    p = sub.add_parser("eval", help="relative L2 error on the test set")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--errors", action="store_true", help="print every per-sample error")

    p = sub.add_parser("predict", help="predict a field on the test grid")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--sample", type=int, default=0, help="test input index (default 0)")
    p.add_argument("--input", type=Path, help="text file of sensor values to use instead of a test input")
    p.add_argument("--output", type=Path, help="CSV path (default OUT/prediction.csv)")

    p = sub.add_parser("selftest", help="gradient, second-derivative and solver oracle suites")
    _common(p)
    p.add_argument("--points", type=int, default=3, help="random parameter points per gradient check")
    return parser


def _config(args) -> harness.TrainConfig:
    over = {"seed": args.seed, "iterations": args.iterations}
    if args.config is not None and args.preset is not None:
        raise UsageError("--config and --preset are mutually exclusive")
    if args.config is not None:
        if not args.config.is_file():
            raise UsageError(f"config file not found: {args.config}")
        return harness.TrainConfig.load(args.config, **over)
    if args.preset is not None:
        return harness.preset(args.preset, args.scale, **{k: v for k, v in over.items() if v is not None})
    saved = args.out / "config.ini"
    if saved.is_file():
        return harness.TrainConfig.load(saved, **over)
    raise UsageError("no configuration: pass --config, --preset, or an --out directory holding config.ini")


def _data(args, config, required: bool = True):
    path = args.data or args.out / "data.bin"
    if path.is_file():
        return harness.load_data(path)
    if args.data is not None or required:
        raise FileNotFoundError(f"dataset not found: {path} (run 'generate' first)")
    return None


def _checkpoint(args):
    path = args.checkpoint or args.out / "checkpoint.bin"
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path} (run 'train' first)")
    params, _ = load_checkpoint(path)
    return params


def cmd_generate(args) -> int:
    config = _config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    data = harness.generate(config)
    harness.save_data(args.out / "data.bin", data)
    config.save(args.out / "config.ini")
    if args.rows:
        write_dataset(args.out / "constraint_rows.bin", constraint_dataset(data))
    sizes = ", ".join(f"{k}={len(v)}" for k, v in data.batch.pools.items())
    print(f"generated {config.benchmark}: {config.N} inputs, pools {sizes}, {len(data.test.truth)} test inputs "
          f"in {time.perf_counter() - start:.1f}s -> {args.out}")
    return 0


def constraint_dataset(data: harness.TrainingData) -> OperatorDataset:
    """First constraint pool as an ``OperatorDataset`` (rows grouped per input)."""
    name = harness.constraint_pools(data.batch)[0]
    rows = data.batch.pools[name]
    order = np.argsort(rows.sample, kind="stable")
    ids = rows.sample[order]
    N = int(np.unique(ids).size)
    target = rows.target[order][:, None] if rows.target is not None else None
    return OperatorDataset(ids, data.batch.branch_inputs[ids], rows.y[order], target, N, len(ids) // N)


def cmd_train(args) -> int:
    config = _config(args)
    data = _data(args, config, required=False)
    if data is None:
        log.info("no dataset in %s; generating", args.out)
        data = harness.generate(config)
        args.out.mkdir(parents=True, exist_ok=True)
        harness.save_data(args.out / "data.bin", data)
    start = time.perf_counter()
    try:
        _, metrics = harness.train(config, data, out_dir=args.out)
    except harness.TrainingDiverged as exc:
        print(f"training diverged: {exc}; last finite parameters saved to {args.out / 'checkpoint.bin'}", file=sys.stderr)
        return 2
    last = metrics[-1] if metrics else None
    tail = f", last logged loss {last.total_loss:.4e} at iteration {last.iteration}" if last else ""
    print(f"trained {config.iterations} iterations in {time.perf_counter() - start:.1f}s{tail} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    config = _config(args)
    data = _data(args, config)
    params = _checkpoint(args)
    ev = harness.evaluate(params, data.test)
    if args.errors:
        for i, e in enumerate(ev.errors):
            print(f"{i},{e:.17g}")
    print(f"{config.benchmark} relative L2: {ev.summary()}")
    return 0


def cmd_predict(args) -> int:
    config = _config(args)
    data = _data(args, config)
    params = _checkpoint(args)
    if args.input is not None:
        u = np.loadtxt(args.input, delimiter=",", ndmin=1).ravel()
    else:
        if not 0 <= args.sample < len(data.test.branch_inputs):
            raise UsageError(f"--sample must lie in [0, {len(data.test.branch_inputs)})")
        u = data.test.branch_inputs[args.sample]
    values = harness.predict(params, u, data.test.grid)
    out = args.output or args.out / "prediction.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    harness.write_prediction_csv(out, values, data.test.axes)
    print(f"wrote {values.size} predictions for {config.benchmark} -> {out}")
    return 0


def cmd_selftest(args) -> int:
    seed = 0 if args.seed is None else args.seed
    results = [checks.gradient_check(k, args.points, seed) for k in pde.KINDS]
    results.append(checks.gradient_check("burgers", args.points, seed, backbone="modified_mlp"))
    results.append(checks.second_derivative_check(50, seed))
    results.append(checks.second_derivative_check(50, seed, backbone="modified_mlp"))
    results += checks.solver_checks()
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 0 if not failed else 2


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime status
        print(f"pideeponet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
