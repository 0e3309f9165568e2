"""Blocking collectives with a fixed, worker-count independent summation order.

Reductions are chained folds: rank 0 starts an accumulator from its first
item, adds its remaining items, and passes the accumulator to rank 1, which
continues with its own items, and so on. The last rank holds the result and
broadcasts it down a binomial tree. Because every rank owns a contiguous run
of the global item sequence, the floating-point result is the serial
left-to-right sum of all items, whatever the number of ranks. Long vectors are
cut into segments so the chain pipelines.
"""
from __future__ import annotations

import time
from contextlib import contextmanager

import numpy as np

from .transport import TAG_BN_STATS, TAG_CONTROL, TAG_GRADIENT, Transport, TransportError

DEFAULT_TIMEOUT = 60.0
SEGMENT = 1 << 15


class CollectiveError(TransportError):
    pass


class WorkerGroup:
    """One rank's handle on the group: its transport plus a communication timer."""

    def __init__(self, transport: Transport, timeout: float = DEFAULT_TIMEOUT, segment: int = SEGMENT,
                 instrument: bool = True):
        self.transport = transport
        self.instrument = instrument
        self.rank, self.size = transport.rank, transport.size
        self.timeout = timeout
        self.segment = segment
        self.comm_sec = 0.0

    @contextmanager
    def timed(self, enabled: bool = True):
        if not (enabled and self.instrument):
            yield
            return
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.comm_sec += time.perf_counter() - t0

    def send(self, dst: int, tag: int, arr: np.ndarray) -> None:
        self.transport.send(dst, tag, np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())

    def recv(self, src: int, tag: int, dtype, count: int) -> np.ndarray:
        got_tag, payload = self.transport.recv(src, self.timeout)
        if got_tag != tag:
            raise CollectiveError(f"rank {self.rank}: expected tag {tag} from rank {src}, got {got_tag}; "
                                  "collectives were called out of order")
        dt = np.dtype(dtype).newbyteorder("<")
        if len(payload) != count * dt.itemsize:
            raise CollectiveError(f"rank {self.rank}: length mismatch, rank {src} sent "
                                  f"{len(payload) // dt.itemsize} values, expected {count}")
        return np.frombuffer(payload, dtype=dt).astype(dtype)

    def close(self) -> None:
        self.transport.close()


def _segments(n: int, seg: int):
    if n == 0:
        yield slice(0, 0)
    for lo in range(0, n, seg):
        yield slice(lo, min(n, lo + seg))


def broadcast(group: WorkerGroup, vec: np.ndarray | None, root: int, tag: int, count: int, dtype) -> np.ndarray:
    """Binomial-tree broadcast of ``vec`` (only meaningful on ``root``)."""
    p, rank = group.size, group.rank
    rel = (rank - root) % p
    out = np.array(vec, dtype=dtype, copy=True) if rel == 0 else np.empty(count, dtype=dtype)
    mask = 1
    while mask < p:
        if rel & mask:
            src = (rel - mask + root) % p
            for sl in _segments(count, group.segment):
                out[sl] = group.recv(src, tag, dtype, sl.stop - sl.start)
            break
        mask <<= 1
    mask >>= 1
    while mask > 0:
        if rel + mask < p:
            dst = (rel + mask + root) % p
            for sl in _segments(count, group.segment):
                group.send(dst, tag, out[sl])
        mask >>= 1
    return out


def allreduce_fold(group: WorkerGroup, items, tag: int = TAG_GRADIENT, op=np.add, timed: bool = True) -> np.ndarray:
    """Fold ``op`` over the rank-ordered concatenation of every rank's ``items``.

    Every rank must pass at least one item and all items must share one length
    and dtype. Returns the identical vector on every rank.
    """
    items = [np.asarray(v) for v in items]
    if not items:
        raise ValueError(f"rank {group.rank}: allreduce_fold needs at least one local item")
    n, dtype = items[0].shape[0], items[0].dtype
    for v in items:
        if v.ndim != 1 or v.shape[0] != n or v.dtype != dtype:
            raise ValueError(f"rank {group.rank}: local items must be 1-D {dtype} vectors of length {n}")
    p, rank = group.size, group.rank
    with group.timed(timed):
        if p == 1:
            acc = items[0].copy()
            for v in items[1:]:
                acc = op(acc, v)
            return acc
        acc = np.empty(n, dtype=dtype)
        for sl in _segments(n, group.segment):
            if rank == 0:
                part = items[0][sl].copy()
                rest = items[1:]
            else:
                part = group.recv(rank - 1, tag, dtype, sl.stop - sl.start)
                rest = items
            for v in rest:
                part = op(part, v[sl])
            if rank < p - 1:
                group.send(rank + 1, tag, part)
            acc[sl] = part
        return broadcast(group, acc if rank == p - 1 else None, p - 1, tag, n, dtype)


def allreduce_mean(group: WorkerGroup, local: np.ndarray, tag: int = TAG_GRADIENT, timed: bool = True) -> np.ndarray:
    """Rank-ordered sum of one vector per rank, divided by p."""
    local = np.asarray(local)
    total = allreduce_fold(group, [local], tag, timed=timed)
    return total / local.dtype.type(group.size)


def allreduce_max(group: WorkerGroup, local, timed: bool = False) -> np.ndarray:
    return allreduce_fold(group, [np.asarray(local, dtype=np.float64)], TAG_CONTROL, np.maximum, timed)


def allreduce_min(group: WorkerGroup, local, timed: bool = False) -> np.ndarray:
    return allreduce_fold(group, [np.asarray(local, dtype=np.float64)], TAG_CONTROL, np.minimum, timed)


def barrier(group: WorkerGroup) -> None:
    allreduce_max(group, np.zeros(1))


__all__ = ["WorkerGroup", "CollectiveError", "allreduce_fold", "allreduce_mean", "allreduce_max",
           "allreduce_min", "broadcast", "barrier", "TAG_GRADIENT", "TAG_BN_STATS", "TAG_CONTROL"]
