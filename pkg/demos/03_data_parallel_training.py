"""
Data-parallel training that does not depend on the worker count
================================================================

Every mini-batch is split across p workers. Gradients are summed in one fixed
order, one fixed-size micro-batch at a time. So p = 1, 2 and 4 follow the
same trajectory, bit for bit.
"""
import numpy as np

from pdegen.config import RunConfig
from pdegen.distributed import make_shard_plan, run_inproc, shard_indices
from pdegen.training import train_worker

plan = make_shard_plan(100, 32, 8)
print("requested 100 samples / batch 32 on 8 workers ->", plan.n_samples_adj, "samples,",
      plan.n_batches, "mini-batches,", plan.batch_size_local, "per worker")
print("mini-batch 3 shards:", [shard_indices(plan, 3, r) for r in range(8)])

cfg = RunConfig(resolution=32, n_samples=32, batch_size=8, epochs=3, precision=64, lr=1e-4, momentum=0.9)
runs = {}
for p in (1, 2, 4):
    run = cfg.replace(workers=p)
    result = run_inproc(p, lambda g: train_worker(g, run))[0]
    runs[p] = result
    last = result.summaries[-1]
    print(f"p = {p}: epoch losses {np.round(result.epoch_losses, 4)}  "
          f"compute {last.compute_sec:.2f}s  comm {last.comm_sec:.3f}s")

print("identical loss sequences:", runs[1].losses == runs[2].losses == runs[4].losses)
print("identical parameters:", np.array_equal(runs[1].replica.gen.params, runs[4].replica.gen.params))
