"""Command-line driver: property suite, gradient check, training and sweeps.

Exit codes: 0 success, 1 a checked property failed, 2 usage or config error.
``SUPCON_SEED`` overrides the default ``--seed``.
"""

import argparse
import os
import sys
import time

import numpy as np

from . import experiments as ex
from .grads import REL_ERR_FLOOR, fd_roundoff_estimate, gradient_check
from .verify import GRAD_TOL, random_batch_w, run_suite

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
VARIANTS = ("SelfSup", "SupOut", "SupIn")


class UsageError(Exception):
    pass


def _default_seed():
    raw = os.environ.get("SUPCON_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"SUPCON_SEED must be an integer, got {raw!r}") from None


def _positive_float(text):
    v = float(text)
    if not (v > 0 and np.isfinite(v)):
        raise argparse.ArgumentTypeError(f"must be a positive number, got {text}")
    return v


def _float_list(text):
    return [_positive_float(t) for t in text.split(",") if t]


def _k_list(text):
    out = []
    for t in text.split(","):
        if t in ("none", "all"):
            out.append(None)
        else:
            k = int(t)
            if k < 1:
                raise argparse.ArgumentTypeError(f"k must be >= 1 or 'all', got {t}")
            out.append(k)
    return out


def _int_list(text):
    return [int(t) for t in text.split(",") if t]


def _train_args(p, seed):
    p.add_argument("--loss", default="SupOut", choices=ex.LOSSES)
    p.add_argument("--tau", type=_positive_float, default=0.1)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-n", type=int, default=64, help="source samples per batch (2N views)")
    p.add_argument("--max-positives", type=int, default=None)
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--dataset", default="blobs", help=f"one of {sorted(ex.DATASETS)} or csv:PATH")
    p.add_argument("--rescale-by-tau", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--learning-rate", type=_positive_float, default=0.2)
    p.add_argument("--probe-epochs", type=int, default=50)
    p.add_argument("--severities", type=_int_list, default=[0, 1, 2, 3, 4, 5])
    p.add_argument("--base-sigma", type=float, default=0.5)
    p.add_argument("--out", default=None, help="output file (default: stdout)")


def build_parser(seed=0):
    parser = argparse.ArgumentParser(prog="supconlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the seeded property suite")
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--gradient-batches", type=int, default=100)

    p = sub.add_parser("gradcheck", help="analytical vs finite-difference gradients")
    p.add_argument("--batch-n", type=int, default=4, help="source samples (2N rows)")
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--tau", type=_positive_float, default=0.1)
    p.add_argument("--variant", default="all", choices=VARIANTS + ("all",))
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--fd-step", type=_positive_float, default=1e-6)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--precision", default="auto", choices=("auto", "longdouble", "mp"),
                   help="oracle arithmetic; auto picks mp when long-double roundoff "
                        "would exceed 1%% of the relative-error floor")

    p = sub.add_parser("train", help="stage-one training plus probe; writes a result file")
    _train_args(p, seed)

    p = sub.add_parser("sweep-positives", help="probe top-1 per positive cap k")
    _train_args(p, seed)
    p.add_argument("--k-list", type=_k_list, default=[1, 2, 5, 10, None],
                   help="comma-separated caps; 'all' means uncapped")

    p = sub.add_parser("sweep-temperature", help="probe top-1 per temperature")
    _train_args(p, seed)
    p.add_argument("--tau-list", type=_float_list, default=[0.05, 0.1, 0.5, 1.0])

    p = sub.add_parser("robustness", help="accuracy and ECE under growing input noise")
    _train_args(p, seed)
    p.add_argument("--xent-loss", default="xent", choices=ex.XENT_LOSSES)
    return parser


def _emit(text, path):
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


def _run_config(args):
    return ex.RunConfig(loss=args.loss, tau=args.tau, epochs=args.epochs, batch_n=args.batch_n,
                        max_positives=args.max_positives, seed=args.seed, dataset=args.dataset,
                        rescale_by_tau=args.rescale_by_tau, learning_rate=args.learning_rate,
                        probe_epochs=args.probe_epochs,
                        severities=tuple(args.severities), base_sigma=args.base_sigma)


def cmd_verify(args):
    results = run_suite(args.seed, args.gradient_batches)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print(f"{sum(r.passed for r in results)}/{len(results)} properties passed")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_gradcheck(args):
    if args.batch_n < 1 or args.dim < 2 or args.classes < 1:
        raise UsageError("need --batch-n >= 1, --dim >= 2, --classes >= 1")
    rng = np.random.default_rng(args.seed)
    batch, W = random_batch_w(rng, 2 * args.batch_n, args.dim, args.classes)
    variants = VARIANTS if args.variant == "all" else (args.variant,)
    worst = 0.0
    for v in variants:
        dtype = np.longdouble if args.precision == "longdouble" else "mp"
        if args.precision == "auto":
            noise = fd_roundoff_estimate(batch, args.tau, v, args.fd_step)
            dtype = "mp" if noise > 0.01 * REL_ERR_FLOOR else np.longdouble
        errs = [gradient_check(batch, args.tau, v, on=on, W=W, h=args.fd_step,
                               dtype=dtype).max_rel_err for on in ("z", "w")]
        worst = max(worst, *errs)
        print(f"{v:<8} z max_rel_err={errs[0]:.3e}  w max_rel_err={errs[1]:.3e}")
    ok = worst <= GRAD_TOL
    print(f"{'PASS' if ok else 'FAIL'}  worst={worst:.3e}  tol={GRAD_TOL:.0e}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_train(args):
    cfg = _run_config(args)
    t0 = time.perf_counter()
    result = ex.run_train(cfg)
    _emit(ex.dumps_result(result), args.out)
    # wall time goes to stderr so result files stay byte-identical across runs
    print(f"probe_top1={result['probe_top1']:.4f} ece={result['ece']:.4f} "
          f"wall_time={time.perf_counter() - t0:.2f}s", file=sys.stderr)
    return EXIT_OK


def cmd_sweep_positives(args):
    rows = ex.sweep_positives(_run_config(args), args.k_list)
    _emit(ex.format_table(ex.POSITIVES_HEADER, rows), args.out)
    return EXIT_OK


def cmd_sweep_temperature(args):
    rows = ex.sweep_temperature(_run_config(args), args.tau_list)
    _emit(ex.format_table(ex.TEMPERATURE_HEADER, rows), args.out)
    return EXIT_OK


def cmd_robustness(args):
    cfg = _run_config(args)
    if cfg.loss not in ex.CONTRASTIVE_LOSSES:
        raise UsageError("loss: robustness compares a contrastive --loss against --xent-loss")
    rows = ex.robustness(cfg, args.xent_loss)
    _emit(ex.format_table(ex.ROBUSTNESS_HEADER, rows), args.out)
    return EXIT_OK


COMMANDS = {
    "verify": cmd_verify,
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "sweep-positives": cmd_sweep_positives,
    "sweep-temperature": cmd_sweep_temperature,
    "robustness": cmd_robustness,
}


def main(argv=None):
    try:
        parser = build_parser(_default_seed())
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            return EXIT_OK if exc.code == 0 else EXIT_USAGE
        return COMMANDS[args.command](args)
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
