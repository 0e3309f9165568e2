"""Command line entry point: ``python -m pdegen <command>``.

Exit codes: 0 success, 2 bad config or input, 3 numerical failure,
4 transport failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .bench import run_scaling_sweep, speedup_summary, timing_rows_from_csv, write_timing_csv
from .config import ConfigError, load_config, validate
from .distributed.collectives import WorkerGroup
from .distributed.engine import ReplicaDivergence, run_inproc
from .distributed.sharding import PlanError
from .distributed.transport import SocketTransport, TransportError
from .formats import FIELD_MAGIC, FieldFile, FormatError, read_field, write_field
from .model import forward
from .oracle import CflError, FdmConfig, compute_norms, solve_fdm
from .pde_loss import T_END, initial_condition
from .training import load_generator, train_worker

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_TRANSPORT = 0, 2, 3, 4

log = logging.getLogger("pdegen")


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed_override is not None:
        cfg = cfg.replace(seed=args.seed_override)
    if args.out is not None:
        cfg = cfg.replace(out_dir=args.out)
    validate(cfg)
    if cfg.transport == "sockets":
        if args.rank is None:
            raise ConfigError("sockets transport needs --rank")
        if not 0 <= args.rank < cfg.workers:
            raise ConfigError(f"--rank {args.rank} outside [0, {cfg.workers})")
        group = WorkerGroup(SocketTransport(args.rank, list(cfg.addresses), cfg.timeout), cfg.timeout)
        try:
            result = train_worker(group, cfg, cfg.out_dir, args.resume)
        finally:
            group.close()
    else:
        if args.rank not in (None, 0):
            raise ConfigError("--rank is only meaningful with the sockets transport")
        result = run_inproc(cfg.workers, lambda g: train_worker(g, cfg, cfg.out_dir, args.resume), cfg.timeout)[0]
    if result.summaries:
        last = result.summaries[-1]
        log.info("epoch %d: mean loss %.6g", last.epoch, last.mean_loss)
    return EXIT_OK


def cmd_solve(args) -> int:
    u = solve_fdm(args.c, FdmConfig(nx=args.nx), args.n)
    write_field(args.out, FieldFile(u, args.c, (0.0, 1.0), (0.0, T_END)))
    return EXIT_OK


def cmd_infer(args) -> int:
    gen, _ = load_generator(args.checkpoint)
    n = gen.config.resolution
    ic = initial_condition(args.c, n, gen.dtype)[None]
    u = forward(gen, ic, "eval").data[0, 0]
    write_field(args.out, FieldFile(u.astype(np.float64), args.c, (0.0, 1.0), (0.0, T_END)))
    return EXIT_OK


def cmd_compare(args) -> int:
    a, b = Path(args.a), Path(args.b)
    if _is_field(a) and _is_field(b):
        fa, fb = read_field(a), read_field(b)
        if fa.c != fb.c:
            log.warning("fields were produced for different c (%r vs %r)", fa.c, fb.c)
        sys.stdout.write(compute_norms(fa.values, fb.values, fa.c).to_csv())
        return EXIT_OK
    if _is_field(a) or _is_field(b):
        raise FormatError("compare needs two field files or two timing CSVs")
    for path in (a, b):
        sys.stdout.write(f"# {path}\n")
        sys.stdout.write(speedup_summary(timing_rows_from_csv(path)))
    return EXIT_OK


def _is_field(path: Path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(len(FIELD_MAGIC)) == FIELD_MAGIC


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    try:
        p_list = [int(x) for x in args.p_list.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad --p-list {args.p_list!r}") from None
    rows = run_scaling_sweep(cfg, p_list, args.epochs, args.transport)
    if args.out:
        write_timing_csv(args.out, rows)
    sys.stdout.write(speedup_summary(rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pdegen", description="Train, solve, infer, compare and benchmark.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a generator")
    p.add_argument("--config", required=True)
    p.add_argument("--rank", type=int)
    p.add_argument("--out")
    p.add_argument("--seed-override", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("solve", help="finite-difference reference solution")
    p.add_argument("--c", type=float, required=True)
    p.add_argument("--n", type=int, default=128)
    p.add_argument("--nx", type=int, default=FdmConfig.nx)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("infer", help="generator forward pass for one c")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--c", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("compare", help="norms of two fields, or summaries of two timing CSVs")
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("bench", help="strong-scaling sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--p-list", default="1,2,4,8")
    p.add_argument("--epochs", type=int)
    p.add_argument("--transport", choices=("inproc", "sockets"), default="inproc")
    p.add_argument("--out", help="timing CSV to append to")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, PlanError, FormatError, OSError, ValueError) as exc:
        return _fail(exc, EXIT_CONFIG)
    except (ad.NonFiniteError, CflError, FloatingPointError, ReplicaDivergence) as exc:
        return _fail(exc, EXIT_NUMERIC)
    except TransportError as exc:
        return _fail(exc, EXIT_TRANSPORT)


def _fail(exc: BaseException, code: int) -> int:
    sys.stderr.write(f"pdegen: error: {exc}\n")
    return code
