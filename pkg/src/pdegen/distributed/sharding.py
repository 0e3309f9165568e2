"""Worker-count independent partition of the sample pool into mini-batches."""
from __future__ import annotations

import math
from dataclasses import dataclass


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class ShardPlan:
    n_samples: int          # requested N_s
    batch_size: int         # requested b_s
    workers: int            # p
    n_samples_adj: int      # N_s' = p * ceil(N_s / p)
    batch_size_adj: int     # b_s' = p * floor(b_s / p)
    n_samples_local: int    # ceil(N_s / p)
    batch_size_local: int   # floor(b_s / p)
    n_batches: int          # ceil(N_s' / b_s')

    def minibatch_size(self, mb: int) -> int:
        """Global size of mini-batch ``mb``; only the last one can be short."""
        if not 0 <= mb < self.n_batches:
            raise PlanError(f"mini-batch index {mb} outside [0, {self.n_batches})")
        return min(self.batch_size_adj, self.n_samples_adj - mb * self.batch_size_adj)

    def local_size(self, mb: int) -> int:
        return self.minibatch_size(mb) // self.workers


def make_shard_plan(n_samples: int, batch_size: int, workers: int) -> ShardPlan:
    if n_samples < 1:
        raise PlanError(f"need at least one sample, got N_s={n_samples}")
    if workers < 1:
        raise PlanError(f"need at least one worker, got p={workers}")
    if batch_size < workers:
        raise PlanError(f"batch size b_s={batch_size} is smaller than p={workers}; local batch would be empty")
    p = workers
    ns_loc = math.ceil(n_samples / p)
    bs_loc = batch_size // p
    ns_adj, bs_adj = p * ns_loc, p * bs_loc
    return ShardPlan(n_samples, batch_size, p, ns_adj, bs_adj, ns_loc, bs_loc, math.ceil(ns_adj / bs_adj))


def shard_indices(plan: ShardPlan, mb: int, rank: int) -> range:
    """Contiguous sample range of worker ``rank`` in mini-batch ``mb``.

    Ranks take consecutive equal slices of the global mini-batch, so the union
    over ranks is exactly the single-worker mini-batch.
    """
    if not 0 <= rank < plan.workers:
        raise PlanError(f"rank {rank} outside [0, {plan.workers})")
    size = plan.local_size(mb)
    start = mb * plan.batch_size_adj + rank * size
    return range(start, start + size)
