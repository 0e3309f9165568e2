"""Data-parallel epoch loop with replicated optimizer updates.

Each rank owns a full model replica and a contiguous shard of every
mini-batch. Local shards are processed in fixed-size micro-batches; batch-norm
statistics are taken per micro-batch, so a micro-batch computes the same
numbers no matter which rank runs it. The per-micro-batch ``[gradient, loss]``
vectors of all ranks are folded in global order by one collective, which makes
the whole loss trajectory independent of the number of ranks.
"""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import autodiff as ad
from ..model import Generator, forward
from ..optim import LbfgsState, SgdState, lbfgs_step, sgd_step
from ..pde_loss import LossConfig, PhysicalDomain, ic_batch, loss_parts
from .collectives import TAG_BN_STATS, WorkerGroup, allreduce_fold, allreduce_max, allreduce_mean, allreduce_min
from .sharding import PlanError, ShardPlan, shard_indices
from .transport import InProcHub


class ReplicaDivergence(RuntimeError):
    pass


def make_samples(n: int, c_min: float, c_max: float, seed: int) -> np.ndarray:
    """``n`` wave numbers drawn uniformly from [c_min, c_max], sorted ascending."""
    if not c_min <= c_max:
        raise ValueError(f"empty c range [{c_min}, {c_max}]")
    rng = np.random.Generator(np.random.Philox(key=seed))
    return np.sort(rng.uniform(c_min, c_max, n))


def check_micro_batch(plan: ShardPlan, micro: int) -> None:
    """Every local shard must split into whole micro-batches."""
    if micro < 2:
        raise PlanError(f"micro_batch must be >= 2 for batch statistics, got {micro}")
    for mb in {0, plan.n_batches - 1}:
        size = plan.local_size(mb)
        if size % micro:
            raise PlanError(f"local batch of {size} samples (mini-batch {mb}, p={plan.workers}) "
                            f"is not a multiple of micro_batch={micro}")


@dataclass
class Replica:
    gen: Generator
    opt: SgdState | LbfgsState
    loss_cfg: LossConfig = field(default_factory=LossConfig)
    micro_batch: int = 2

    @property
    def domain(self) -> PhysicalDomain:
        return PhysicalDomain(self.gen.config.resolution)


@dataclass
class EpochSummary:
    epoch: int
    losses: list
    compute_sec: float
    comm_sec: float
    wall_sec: float
    evaluations: int = 0
    fallbacks: int = 0

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.losses))


class _Clock:
    def __init__(self, enabled: bool = True):
        self.compute = 0.0
        self.enabled = enabled

    def run(self, fn, *args, **kw):
        if not self.enabled:
            return fn(*args, **kw)
        t0 = time.perf_counter()
        try:
            return fn(*args, **kw)
        finally:
            self.compute += time.perf_counter() - t0


def local_items(replica: Replica, ics: np.ndarray, update_stats: bool = True) -> list[np.ndarray]:
    """``[gradient..., loss]`` for each micro-batch of the local shard.

    A non-finite loss does not raise here, since the other ranks would be left
    waiting; it yields a NaN vector that the collective spreads to every rank.
    """
    gen, micro = replica.gen, replica.micro_batch
    domain = replica.domain
    items = []
    for lo in range(0, ics.shape[0], micro):
        chunk = ics[lo:lo + micro]
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                params = gen.param_tensors()
                out = forward(gen, chunk, "train", params, update_stats)
                parts = loss_parts(out, chunk, replica.loss_cfg, domain)
                ad.backward(parts.total)
            item = np.append(gen.gather_grad(params), gen.dtype.type(parts.total.data))
        except (ad.NonFiniteError, FloatingPointError):
            item = np.full(gen.n_params + 1, np.nan, dtype=gen.dtype)
        items.append(item)
    return items


def global_loss_grad(group: WorkerGroup, replica: Replica, ics: np.ndarray, n_micro: int,
                     clock: _Clock, update_stats: bool = True) -> tuple[float, np.ndarray]:
    """Mini-batch mean loss and gradient, identical on every rank."""
    items = clock.run(local_items, replica, ics, update_stats)
    total = allreduce_fold(group, items)
    mean = total / total.dtype.type(n_micro)
    return float(mean[-1]), mean[:-1]


def train_epoch(group: WorkerGroup, replica: Replica, ics: np.ndarray, plan: ShardPlan, epoch: int,
                on_minibatch: Callable[[int, int, float], None] | None = None,
                sync_bn: bool = True) -> EpochSummary:
    """One pass over all mini-batches; returns max-over-ranks timings.

    ``ics`` holds the initial conditions of all N_s' samples in global order.
    """
    if ics.shape[0] != plan.n_samples_adj:
        raise PlanError(f"dataset has {ics.shape[0]} samples, plan expects {plan.n_samples_adj}")
    check_micro_batch(plan, replica.micro_batch)
    gen, opt = replica.gen, replica.opt
    clock = _Clock(group.instrument)
    comm0 = group.comm_sec
    t_start = time.perf_counter()
    losses, evals, fallbacks = [], 0, 0
    for mb in range(plan.n_batches):
        idx = shard_indices(plan, mb, group.rank)
        local = ics[idx.start:idx.stop]
        n_micro = plan.minibatch_size(mb) // replica.micro_batch
        if isinstance(opt, SgdState):
            loss, grad = global_loss_grad(group, replica, local, n_micro, clock)
            if not np.isfinite(loss):
                raise ad.NonFiniteError(f"loss is not finite at epoch {epoch}, mini-batch {mb}")
            gen.unflatten(clock.run(sgd_step, opt, gen.params, grad))
            evals += 1
        else:
            first = [True]

            def evaluate(theta):
                gen.unflatten(theta)
                out = global_loss_grad(group, replica, local, n_micro, clock, update_stats=first[0])
                first[0] = False
                return out

            t0, compute0, comm_before = time.perf_counter(), clock.compute, group.comm_sec
            new = lbfgs_step(opt, gen.flatten(), evaluate)
            if clock.enabled:
                # everything in the step that was not spent inside a collective
                clock.compute = compute0 + (time.perf_counter() - t0) - (group.comm_sec - comm_before)
            gen.unflatten(new)
            loss = opt.last_loss
            evals += opt.last_evals
            fallbacks += int(opt.last_fallback)
        losses.append(loss)
        if on_minibatch is not None:
            on_minibatch(epoch, mb, loss)
    if sync_bn:
        sync_batchnorm(group, gen)
    verify_replicas(group, gen)
    wall = time.perf_counter() - t_start
    comm = group.comm_sec - comm0
    compute, comm, wall = allreduce_max(group, [clock.compute, comm, wall])
    return EpochSummary(epoch, losses, float(compute), float(comm), float(wall), evals, fallbacks)


def sync_batchnorm(group: WorkerGroup, gen: Generator) -> None:
    """Replace every replica's running statistics by their mean over ranks."""
    stats = gen.bn_stats()
    n = float(stats.size)
    if allreduce_max(group, [n])[0] != allreduce_min(group, [n])[0]:
        raise ReplicaDivergence(f"rank {group.rank}: batch-norm layer count differs across ranks")
    if stats.size == 0:
        return
    hi = allreduce_fold(group, [stats], TAG_BN_STATS, np.maximum)
    lo = allreduce_fold(group, [stats], TAG_BN_STATS, np.minimum)
    if np.array_equal(hi, lo):
        # already synchronized: the mean of equal values is that value
        gen.set_bn_stats(hi)
        return
    gen.set_bn_stats(allreduce_mean(group, stats, TAG_BN_STATS))


def verify_replicas(group: WorkerGroup, gen: Generator) -> None:
    crc = float(gen.checksum())
    if allreduce_max(group, [crc])[0] != allreduce_min(group, [crc])[0]:
        raise ReplicaDivergence(f"rank {group.rank}: parameter checksums differ across ranks")


def run_inproc(p: int, worker: Callable[[WorkerGroup], object], timeout: float = 60.0,
               instrument: bool = True) -> list:
    """Run ``worker(group)`` on ``p`` threads joined by in-process channels.

    Returns the per-rank results; re-raises the lowest-rank failure.
    """
    hub = InProcHub(p)
    results, errors = [None] * p, [None] * p

    def body(rank):
        group = WorkerGroup(hub.endpoint(rank), timeout, instrument=instrument)
        try:
            results[rank] = worker(group)
        except BaseException as exc:  # noqa: BLE001 - surfaced below
            errors[rank] = exc

    if p == 1:
        body(0)
    else:
        threads = [threading.Thread(target=body, args=(r,), name=f"rank{r}") for r in range(p)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    for exc in errors:
        if exc is not None:
            raise exc
    return results


def dataset_ics(cs: np.ndarray, resolution: int, dtype) -> np.ndarray:
    return ic_batch(cs, resolution, dtype)
