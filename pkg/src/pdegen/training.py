"""Full training runs: replica construction, checkpoints, and log files."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .distributed.collectives import WorkerGroup
from .distributed.engine import EpochSummary, Replica, make_samples, train_epoch
from .formats import (TIMING_FORMAT, TIMING_HEADER, TRAINLOG_FORMAT, TRAINLOG_HEADER, FormatError,
                      read_checkpoint, write_checkpoint)
from .model import Generator, GeneratorConfig, build_generator
from .optim import LbfgsState, SgdState
from .pde_loss import ic_batch

CHECKPOINT_NAME = "checkpoint.bin"
TRAINLOG_NAME = "train_log.csv"
TIMING_NAME = "timing.csv"
CONFIG_NAME = "config.effective.ini"


def make_optimizer(cfg: RunConfig) -> SgdState | LbfgsState:
    if cfg.optimizer == "sgd":
        return SgdState(cfg.lr, cfg.momentum)
    return LbfgsState(cfg.history, cfg.c1, cfg.c2, cfg.max_line_search)


def build_replica(cfg: RunConfig) -> Replica:
    return Replica(build_generator(cfg.generator_config()), make_optimizer(cfg), cfg.loss_config(), cfg.micro_batch)


def training_set(cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    """Wave numbers and initial conditions of all N_s' samples in global order."""
    plan = cfg.plan()
    cs = make_samples(plan.n_samples_adj, cfg.c_min, cfg.c_max, cfg.seed)
    return cs, ic_batch(cs, cfg.resolution, ad.dtype_for(cfg.precision))


def save_checkpoint(path, cfg: RunConfig, replica: Replica, epoch: int, wall: float = 0.0) -> None:
    gen, opt = replica.gen, replica.opt
    header = {"format": "pdegen-checkpoint", "config": cfg.to_dict(), "generator": gen.config.to_dict(),
              "epoch": epoch, "wall_time_sec": wall}
    arrays = {"params": gen.params, "bn_stats": gen.bn_stats()}
    if isinstance(opt, SgdState):
        header["optimizer"] = {"name": "sgd", "lr": opt.lr, "momentum": opt.momentum}
        if opt.velocity is not None:
            arrays["velocity"] = opt.velocity
    else:
        header["optimizer"] = {"name": "lbfgs", "history": opt.history, "c1": opt.c1, "c2": opt.c2,
                               "max_evals": opt.max_evals, "steps": opt.steps, "pairs": len(opt.pairs)}
        for k, (s, y) in enumerate(opt.pairs):
            arrays[f"s{k}"], arrays[f"y{k}"] = s, y
    write_checkpoint(path, header, arrays)


def load_generator(path) -> tuple[Generator, dict]:
    header, arrays = read_checkpoint(path)
    if header.get("format") != "pdegen-checkpoint":
        raise FormatError(f"{path}: not a training checkpoint")
    gen = Generator(GeneratorConfig(**header["generator"]), arrays["params"])
    gen.set_bn_stats(arrays["bn_stats"])
    return gen, {**header, "_arrays": arrays}


def load_replica(path, cfg: RunConfig) -> tuple[Replica, int, float]:
    """Replica and optimizer state from a checkpoint; returns (replica, epoch, wall offset)."""
    gen, header = load_generator(path)
    arrays = header.pop("_arrays")
    if gen.config != cfg.generator_config():
        raise FormatError(f"{path}: checkpoint model does not match the run config")
    o = header["optimizer"]
    if o["name"] != cfg.optimizer:
        raise FormatError(f"{path}: checkpoint optimizer {o['name']!r} differs from config {cfg.optimizer!r}")
    opt = make_optimizer(cfg)
    if isinstance(opt, SgdState):
        opt.velocity = arrays.get("velocity")
    else:
        opt.steps = o["steps"]
        for k in range(o["pairs"]):
            opt.pairs.append((arrays[f"s{k}"], arrays[f"y{k}"]))
    replica = Replica(gen, opt, cfg.loss_config(), cfg.micro_batch)
    return replica, int(header["epoch"]), float(header.get("wall_time_sec", 0.0))


@dataclass
class RunResult:
    replica: Replica
    summaries: list[EpochSummary] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [x for s in self.summaries for x in s.losses]

    @property
    def epoch_losses(self) -> list[float]:
        return [s.mean_loss for s in self.summaries]


def train_worker(group: WorkerGroup, cfg: RunConfig, out_dir=None, resume=None) -> RunResult:
    """Run ``cfg.epochs`` epochs on this rank. Rank 0 writes logs and checkpoints to ``out_dir``."""
    plan = cfg.plan()
    _, ics = training_set(cfg)
    if resume is not None:
        replica, start, wall0 = load_replica(resume, cfg)
    else:
        replica, start, wall0 = build_replica(cfg), 0, 0.0
    writer = group.rank == 0 and out_dir is not None
    if writer:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / CONFIG_NAME).write_text(cfg.effective().to_text())
        log = _open_csv(out / TRAINLOG_NAME, TRAINLOG_FORMAT, TRAINLOG_HEADER, fresh=resume is None)
        timing = _open_csv(out / TIMING_NAME, TIMING_FORMAT, TIMING_HEADER, fresh=resume is None)
    t0 = time.perf_counter() - wall0
    result = RunResult(replica)

    def on_minibatch(epoch, mb, loss):
        if writer:
            log.write(f"{time.perf_counter() - t0:.6f},{epoch},{mb},{loss!r},mb\n")

    try:
        for epoch in range(start + 1, cfg.epochs + 1):
            summary = train_epoch(group, replica, ics, plan, epoch, on_minibatch)
            result.summaries.append(summary)
            if writer:
                now = time.perf_counter() - t0
                log.write(f"{now:.6f},{epoch},,{summary.mean_loss!r},epoch\n")
                log.flush()
                timing.write(f"{plan.workers},{epoch},{summary.compute_sec:.6f},{summary.comm_sec:.6f},"
                             f"{summary.wall_sec:.6f},{summary.mean_loss!r}\n")
                timing.flush()
                if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                    save_checkpoint(out / f"checkpoint_epoch{epoch:05d}.bin", cfg, replica, epoch, now)
                if epoch == cfg.epochs:
                    save_checkpoint(out / CHECKPOINT_NAME, cfg, replica, epoch, now)
    finally:
        if writer:
            log.close()
            timing.close()
    return result


def _open_csv(path: Path, fmt: str, header: str, fresh: bool):
    if fresh or not path.exists():
        fh = open(path, "w")
        fh.write(f"{fmt}\n{header}\n")
        return fh
    return open(path, "a")
