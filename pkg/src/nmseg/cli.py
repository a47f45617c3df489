"""Command-line entry point: ``nmseg <subcommand> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import accounting
from .checkpoint import CheckpointError
from .data_metrics import SynthSpec, corpus_digest, generate_synthetic, load_dataset, save_dataset
from .errors import ConvergenceError, IntegrationError, ShapeError, TrainingError
from .network import Decoder, UNetConfig
from .ode_core import Method, NmOdeSystem, SolverConfig, error_at_horizon, find_equilibrium, integrate, linear_problem

log = logging.getLogger("nmseg")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument helpers


def _deltas(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")
    if len(vals) < 3:
        raise argparse.ArgumentTypeError("need at least three step sizes to fit a slope")
    if any(not 0 < d <= 1 for d in vals):
        raise argparse.ArgumentTypeError("step sizes must lie in (0, 1]")
    return vals


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("NMSEG_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"NMSEG_SEED must be an integer, got {env!r}")


def _add_model_flags(p: argparse.ArgumentParser, suffix: str = "", required: bool = False) -> None:
    dest = suffix.replace("-", "_")
    p.add_argument(f"--config{suffix}", dest=f"config{dest}", required=required, help="key = value network config")
    p.add_argument(f"--decoder{suffix}", dest=f"decoder{dest}", choices=[d.value for d in Decoder])
    p.add_argument(f"--y-channels{suffix}", dest=f"y_channels{dest}", type=_positive_int)
    p.add_argument(f"--channels{suffix}", dest=f"channels{dest}", help="encoder widths, e.g. 16,32,64,128")
    p.add_argument(f"--delta{suffix}", dest=f"delta{dest}", type=float)
    p.add_argument(f"--share-g{suffix}", dest=f"share_g{dest}", action="store_true", default=None)


def _config(args, suffix: str = "", fallback: UNetConfig | None = None) -> UNetConfig:
    """Config file (or ``fallback``) with any explicit flags layered on top."""
    get = lambda name: getattr(args, f"{name}{suffix}", None)  # noqa: E731
    overrides = {
        "decoder": get("decoder"),
        "y_channels": get("y_channels"),
        "delta": get("delta"),
        "share_g_across_sites": get("share_g"),
    }
    if get("channels"):
        try:
            chans = tuple(int(c) for c in get("channels").split(","))
        except ValueError:
            raise UsageError(f"bad --channels value {get('channels')!r}")
        overrides["encoder_channels"] = chans
        overrides["depth"] = len(chans)
    seed = getattr(args, "seed", None)
    if seed is not None or os.environ.get("NMSEG_SEED"):
        overrides["seed"] = _seed(args)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    try:
        path = get("config")
        if path:
            return UNetConfig.from_text(Path(path).read_text(encoding="utf-8"), **overrides)
        base = fallback if fallback is not None else UNetConfig()
        return base.replace(**overrides)
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}")
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid config: {exc}")


def _emit(args, text: str) -> None:
    out = getattr(args, "out", None)
    if out and out != "-":
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _load_data(args, cfg: UNetConfig):
    if args.data:
        data = load_dataset(args.data)
        if not data:
            raise TrainingError(f"no samples found under {args.data}")
        return data
    spec = SynthSpec(seed=args.data_seed, count=args.count, size=args.size, channels=cfg.input_channels)
    return generate_synthetic(spec)


# ---------------------------------------------------------------------------
# subcommands


def cmd_ode_convergence(args) -> int:
    method = Method(args.method)
    sys_, y0, exact = linear_problem(args.a, args.x)
    for d in args.deltas:
        n = round(args.horizon / d)
        if abs(n * d - args.horizon) > 1e-9 * args.horizon:
            raise UsageError(f"step {d} does not divide horizon {args.horizon}")

    def err(d):
        return error_at_horizon(sys_, y0, method, args.horizon, d, exact)

    with ThreadPoolExecutor(max_workers=args.threads) as pool:
        errors = list(pool.map(err, args.deltas))
    slope = float(np.polyfit(np.log(args.deltas), np.log(errors), 1)[0])
    if args.json:
        _emit(args, _dump({"method": method.value, "horizon": args.horizon, "deltas": args.deltas,
                           "errors": errors, "slope": slope}))
    else:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["delta", "error", "slope"])
        for d, e in zip(args.deltas, errors):
            w.writerow([repr(d), repr(e), f"{slope:.6f}"])
        _emit(args, buf.getvalue())
    return EXIT_OK


def _logistic(z):
    return 1.0 / (1.0 + np.exp(-z))


def cmd_ode_attractor(args) -> int:
    rng = np.random.default_rng(_seed(args))
    sys_ = NmOdeSystem.constant(_logistic, args.x)
    star = float(find_equilibrium(args.x, sys_, tol=1e-13))
    steps = round(args.horizon / args.delta)
    solver = SolverConfig(Method.EULER, args.delta, steps)
    finals = np.array([integrate(sys_, rng.uniform(-5, 5, args.dim), solver).final for _ in range(args.trials)])
    spread = float(max((np.abs(a - b).max() for a in finals for b in finals), default=0.0))
    gap = float(np.abs(finals - star).max())
    ok = spread <= args.tol
    if args.json:
        _emit(args, _dump({"y_star": star, "spread": spread, "max_distance_to_y_star": gap,
                           "trials": args.trials, "tol": args.tol, "ok": ok}))
    else:
        _emit(args, f"y* = {star:.12f}\nspread = {spread:.3e}\nmax |y_T - y*| = {gap:.3e}\n"
                    f"{'ok' if ok else 'FAIL'}: spread {'<=' if ok else '>'} {args.tol:g}\n")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_count(args) -> int:
    cfg = _config(args)
    try:
        rep = accounting.cost_report(cfg, args.input_size, args.convention)
    except ValueError as exc:
        raise UsageError(str(exc))
    _emit(args, rep.to_json() + "\n" if args.json else rep.to_csv())
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg_a = _config(args)
    cfg_b = _config(args, "_b", fallback=cfg_a)
    try:
        res = accounting.compare(cfg_a, cfg_b, args.input_size)
    except ValueError as exc:
        raise UsageError(str(exc))
    if args.json:
        _emit(args, _dump(res))
    else:
        a, b = res["a"], res["b"]
        _emit(args, (
            f"{'':8}{'params':>12}{'MACs':>16}\n"
            f"{a['decoder']:8}{a['params']:>12,}{a['macs']:>16,}\n"
            f"{b['decoder']:8}{b['params']:>12,}{b['macs']:>16,}\n"
            f"reduction: params {res['params_reduction_pct']:.2f}%  MACs {res['macs_reduction_pct']:.2f}%\n"
        ))
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import TrainConfig, train

    cfg = _config(args)
    data = _load_data(args, cfg)
    tcfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=_seed(args),
        lr_max=args.lr,
        lr_min=args.lr_min,
        t_max=args.t_max,
        weight_decay=args.weight_decay,
        augment=not args.no_augment,
    )
    res = train(cfg, data, tcfg, out_dir=args.out)
    summary = {"out": str(args.out), "epochs": len(res.history), "best_miou": res.best_miou,
               "best_epoch": res.best_epoch, "final": res.history[-1] if res.history else None}
    if args.json:
        sys.stdout.write(_dump(summary))
    elif res.history:
        last = res.history[-1]
        print(f"{len(res.history)} epochs: final loss {last['loss']:.4f} mIoU {last['miou']:.4f} "
              f"DSC {last['dsc']:.4f}; best mIoU {res.best_miou:.4f} at epoch {res.best_epoch}")
    else:
        print(f"no epochs run; wrote {Path(args.out) / 'history.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .trainer import evaluate, load_model

    cfg = _config(args)
    model = load_model(cfg, args.checkpoint)
    res = evaluate(model, _load_data(args, cfg))
    if args.json:
        _emit(args, _dump(res))
    else:
        _emit(args, f"mIoU {res['miou']:.4f}  DSC {res['dsc']:.4f}  loss {res['loss']:.4f}\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .trainer import gradcheck_network

    cfg = _config(args, fallback=UNetConfig(depth=2, encoder_channels=(2, 4), input_channels=1))
    size = max(args.size, 2 ** (cfg.depth - 1))
    rep = gradcheck_network(cfg, size=size, seed=_seed(args), h=args.h)
    ok = rep.max_error <= args.threshold
    if args.json:
        _emit(args, _dump({"decoder": cfg.decoder.value, "max_relative_error": rep.max_error,
                           "checked": rep.checked, "skipped_kinks": rep.skipped, "h": args.h,
                           "threshold": args.threshold, "ok": ok}))
    else:
        _emit(args, f"{cfg.decoder.value}: max relative error {rep.max_error:.3e} over {rep.checked} "
                    f"elements ({rep.skipped} kink-crossing stencils skipped)\n")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_gen_data(args) -> int:
    spec = SynthSpec(seed=_seed(args), count=args.count, size=args.size, channels=args.channels, noise=args.noise)
    data = generate_synthetic(spec)
    out = Path(args.out)
    save_dataset(data, out, threads=args.threads)
    digest = corpus_digest(data)
    if args.json:
        sys.stdout.write(_dump({"out": str(out), "count": len(data), "sha256": digest}))
    else:
        print(f"wrote {len(data)} samples to {out}  sha256 {digest}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nmseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def command(name, fn, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.set_defaults(func=fn)
        p.add_argument("--json", action="store_true", help="machine-readable output")
        p.add_argument("--threads", type=_positive_int, default=1, help="workers for independent items")
        return p

    p = command("ode-convergence", cmd_ode_convergence, "error vs step size on a linear test problem")
    p.add_argument("--method", choices=[m.value for m in Method], default="euler")
    p.add_argument("--deltas", type=_deltas, default=[0.1, 0.05, 0.025, 0.0125])
    p.add_argument("--horizon", type=float, default=1.0)
    p.add_argument("--a", type=float, default=0.5, help="slope of the linear f")
    p.add_argument("--x", type=float, default=1.0, help="constant input")
    p.add_argument("--out", help="file to write (default stdout)")

    p = command("ode-attractor", cmd_ode_attractor, "random starts converge to one equilibrium")
    p.add_argument("--trials", type=_positive_int, default=10)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--dim", type=_positive_int, default=8)
    p.add_argument("--x", type=float, default=0.0)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--horizon", type=float, default=40.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    for name, fn, help_ in (("count", cmd_count, "parameter and MAC table for one network"),
                            ("compare", cmd_compare, "reduction percentages between two networks")):
        p = command(name, fn, help_)
        _add_model_flags(p)
        if name == "compare":
            _add_model_flags(p, "-b")
        else:
            p.add_argument("--convention", choices=["MAC", "FLOP"], default="MAC")
        p.add_argument("--input-size", type=_positive_int, default=64)
        p.add_argument("--out")

    def data_flags(p):
        p.add_argument("--data", help="dataset directory (images/, masks/); default synthetic")
        p.add_argument("--count", type=_positive_int, default=200)
        p.add_argument("--size", type=_positive_int, default=64)
        p.add_argument("--data-seed", type=int, default=0)

    p = command("train", cmd_train, "train one network and write history, checkpoint and manifest")
    _add_model_flags(p)
    data_flags(p)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch-size", type=_positive_int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-min", type=float, default=1e-5)
    p.add_argument("--t-max", type=_positive_int, default=50)
    p.add_argument("--weight-decay", type=float, default=1e-2)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="runs/train", help="output directory")

    p = command("eval", cmd_eval, "mIoU / DSC of a checkpoint")
    _add_model_flags(p)
    data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = command("gradcheck", cmd_gradcheck, "finite-difference check of a small float64 network")
    _add_model_flags(p)
    p.add_argument("--size", type=_positive_int, default=8)
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--threshold", type=float, default=1e-3)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = command("gen-data", cmd_gen_data, "write a synthetic PGM/PPM corpus")
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=_positive_int, default=64)
    p.add_argument("--channels", type=int, choices=[1, 3], default=3)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"nmseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, ConvergenceError, IntegrationError, ShapeError, CheckpointError, KeyError, OSError, ValueError) as exc:
        print(f"nmseg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
