"""Strong-scaling sweeps: the same training run at several worker counts."""
from __future__ import annotations

import logging
import os
import subprocess
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

from .config import RunConfig, validate
from .distributed.engine import run_inproc
from .distributed.transport import TransportError, free_addresses
from .formats import TIMING_FORMAT, TIMING_HEADER, read_csv_rows
from .training import TIMING_NAME, train_worker

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TimingBreakdown:
    p: int
    epoch: int
    compute_sec: float
    comm_sec: float
    wall_sec: float
    loss: float
    n: int = 0
    batch_size: int = 0

    def csv_row(self) -> str:
        return f"{self.p},{self.epoch},{self.compute_sec:.6f},{self.comm_sec:.6f},{self.wall_sec:.6f},{self.loss!r}"


def _sweep_config(cfg: RunConfig, p: int, transport: str, epochs: int | None) -> RunConfig:
    addresses = tuple(free_addresses(p)) if transport == "sockets" else ()
    run = cfg.replace(workers=p, transport=transport, addresses=addresses,
                      epochs=epochs or cfg.epochs, checkpoint_every=0)
    validate(run)
    return run


def _run_processes(cfg: RunConfig, workdir: Path) -> list[TimingBreakdown]:
    """Launch one OS process per rank over the sockets transport."""
    path = workdir / "bench.ini"
    path.write_text(cfg.to_text())
    out = workdir / "rank0"
    procs = [subprocess.Popen([sys.executable, "-m", "pdegen", "train", "--config", str(path),
                               "--rank", str(r), "--out", str(out)],
                              stdout=subprocess.DEVNULL, stderr=subprocess.PIPE)
             for r in range(cfg.workers)]
    errors = []
    for r, proc in enumerate(procs):
        _, err = proc.communicate()
        if proc.returncode:
            errors.append(f"rank {r} exited with {proc.returncode}: {err.decode().strip()}")
    if errors:
        raise TransportError("; ".join(errors))
    _, rows = read_csv_rows(out / TIMING_NAME)
    return [TimingBreakdown(int(r["p"]), int(r["epoch"]), float(r["compute_sec"]), float(r["comm_sec"]),
                            float(r["wall_sec"]), float(r["loss"]), cfg.resolution, cfg.batch_size) for r in rows]


def run_scaling_sweep(cfg: RunConfig, p_list, epochs: int | None = None, transport: str = "inproc",
                      instrument: bool = True) -> list[TimingBreakdown]:
    """Train the same configuration once per worker count and collect per-epoch timings."""
    cores = os.cpu_count() or 1
    out = []
    for p in p_list:
        if p > cores:
            log.warning("p=%d exceeds the %d available cores; timings will not show parallel speedup", p, cores)
        run = _sweep_config(cfg, p, transport, epochs)
        if transport == "sockets":
            with tempfile.TemporaryDirectory() as tmp:
                out += _run_processes(run, Path(tmp))
            continue
        results = run_inproc(p, lambda g: train_worker(g, run), run.timeout, instrument)
        for s in results[0].summaries:
            out.append(TimingBreakdown(p, s.epoch, s.compute_sec, s.comm_sec, s.wall_sec, s.mean_loss,
                                       run.resolution, run.batch_size))
    return out


def write_timing_csv(path, rows: list[TimingBreakdown]) -> None:
    """Append rows, writing the header first if the file is new."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a") as fh:
        if new:
            fh.write(f"{TIMING_FORMAT}\n{TIMING_HEADER}\n")
        for r in rows:
            fh.write(r.csv_row() + "\n")


def speedup_summary(rows: list[TimingBreakdown]) -> str:
    """Mean per-epoch times for each p and the compute speedup relative to the smallest p."""
    by_p: dict[int, list[TimingBreakdown]] = {}
    for r in rows:
        by_p.setdefault(r.p, []).append(r)
    lines = ["p,compute_sec,comm_sec,wall_sec,compute_speedup"]
    base = None
    for p in sorted(by_p):
        rs = by_p[p]
        comp = sum(r.compute_sec for r in rs) / len(rs)
        comm = sum(r.comm_sec for r in rs) / len(rs)
        wall = sum(r.wall_sec for r in rs) / len(rs)
        base = comp if base is None else base
        lines.append(f"{p},{comp:.6f},{comm:.6f},{wall:.6f},{base / comp if comp > 0 else float('inf'):.3f}")
    return "\n".join(lines) + "\n"


def timing_rows_from_csv(path) -> list[TimingBreakdown]:
    _, rows = read_csv_rows(path)
    return [TimingBreakdown(int(r["p"]), int(r["epoch"]), float(r["compute_sec"]), float(r["comm_sec"]),
                            float(r["wall_sec"]), float(r["loss"])) for r in rows]
