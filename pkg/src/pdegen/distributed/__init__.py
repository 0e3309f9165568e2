"""Deterministic data-parallel training over an abstract transport."""
from .collectives import (WorkerGroup, allreduce_fold, allreduce_max, allreduce_mean, allreduce_min,
                          barrier, broadcast)
from .engine import (EpochSummary, Replica, ReplicaDivergence, check_micro_batch, make_samples,
                     run_inproc, sync_batchnorm, train_epoch, verify_replicas)
from .sharding import PlanError, ShardPlan, make_shard_plan, shard_indices
from .transport import (CollectiveTimeout, InProcHub, SocketTransport, TransportError, free_addresses)

__all__ = [
    "WorkerGroup", "allreduce_fold", "allreduce_max", "allreduce_mean", "allreduce_min", "barrier",
    "broadcast", "EpochSummary", "Replica", "ReplicaDivergence", "check_micro_batch", "make_samples",
    "run_inproc", "sync_batchnorm", "train_epoch", "verify_replicas", "PlanError", "ShardPlan",
    "make_shard_plan", "shard_indices", "CollectiveTimeout", "InProcHub", "SocketTransport",
    "TransportError", "free_addresses",
]
