"""End-to-end acceptance checks, one test per numbered criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
Criteria 6-8 share one set of N=64 training runs (about 45 minutes on one core).
"""
import os
import subprocess
import sys
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdegen import autodiff as ad
from pdegen.cli import main
from pdegen.config import RunConfig
from pdegen.distributed import (free_addresses, make_shard_plan, run_inproc, shard_indices, sync_batchnorm,
                                train_epoch)
from pdegen.formats import read_csv_rows, read_field
from pdegen.model import GeneratorConfig, build_generator, forward
from pdegen.oracle import (FdmConfig, characteristics_solution, compute_norms, march, solve_fdm,
                           steepening_time)
from pdegen.pde_loss import LossConfig, PhysicalDomain, ic_batch, initial_condition, total_loss
from pdegen.training import (CHECKPOINT_NAME, build_replica, load_generator, save_checkpoint, train_worker,
                             training_set)
from tests.conftest import ACCEPTANCE_LINES
from tests.test_autodiff import OPS, random_op_error


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# 1. worker-count independence

def test_criterion_1_loss_sequence_independent_of_p():
    cfg = RunConfig(resolution=32, n_samples=64, batch_size=16, epochs=10, precision=64, lr=1e-4, momentum=0.9)
    t0 = time.perf_counter()
    seqs = {}
    for p in (1, 2, 4, 8):
        run = cfg.replace(workers=p)
        seqs[p] = run_inproc(p, lambda g: train_worker(g, run).losses)[0]
    elapsed = time.perf_counter() - t0
    same = all(seqs[p] == seqs[1] for p in (2, 4, 8))
    record(1, same and elapsed < 300,
           f"{len(seqs[1])} mini-batch losses bit-identical for p=1,2,4,8: {same}; {elapsed:.0f}s (< 300s)")


# 2. sharding arithmetic

_sharding_failures = []


@settings(max_examples=1000, deadline=None, database=None)
@given(st.integers(1, 512), st.integers(1, 128), st.integers(1, 16))
def _check_plan(ns, bs, p):
    if bs < p:
        return
    plan = make_shard_plan(ns, bs, p)
    ok = (plan.n_samples_adj % plan.batch_size_adj) % p == 0
    for mb in range(plan.n_batches):
        shards = [shard_indices(plan, mb, r) for r in range(p)]
        union = [i for s in shards for i in s]
        lo = mb * plan.batch_size_adj
        ok &= len({len(s) for s in shards}) == 1
        ok &= len(union) == len(set(union))
        ok &= union == list(range(lo, lo + plan.minibatch_size(mb)))
    if not ok:
        _sharding_failures.append((ns, bs, p))


def test_criterion_2_sharding_arithmetic():
    _check_plan()
    plan = make_shard_plan(4096, 1024, 4)
    example = plan.batch_size_local == 256
    record(2, not _sharding_failures and example,
           f"1000 random plans, failures: {len(_sharding_failures)}; N_s=4096,b_s=1024,p=4 -> "
           f"b_s_loc={plan.batch_size_local} (want 256)")


# 3. gradients

def test_criterion_3_gradient_correctness():
    t0 = time.perf_counter()
    gen = build_generator(GeneratorConfig(resolution=8, precision=64, seed=0))
    ics = ic_batch([3.2, 4.7], 8)
    dom = PhysicalDomain(8)

    def build(t):
        return total_loss(forward(gen, ics, "train", gen.param_tensors(t), update_stats=False), ics,
                          LossConfig(), dom)

    net_err = ad.grad_check(build, gen.params)
    names = sorted(OPS)
    op_err = max(random_op_error(names[k % len(names)], k) for k in range(100))
    elapsed = time.perf_counter() - t0
    record(3, net_err < 1e-5 and op_err < 1e-5 and elapsed < 120,
           f"8x8 network+loss rel err {net_err:.2e}, worst of 100 op cases {op_err:.2e} (< 1e-5); "
           f"{elapsed:.0f}s (< 120s)")


# 4. batch-norm synchronization

def test_criterion_4_sync_batchnorm():
    cfg = RunConfig(resolution=32, n_samples=64, batch_size=16, precision=64, lr=1e-4, workers=4)
    pre, once, twice = [None] * 4, [None] * 4, [None] * 4

    def worker(g):
        rep = build_replica(cfg)
        _, ics = training_set(cfg)
        train_epoch(g, rep, ics, cfg.plan(), 1, sync_bn=False)
        pre[g.rank] = rep.gen.bn_stats()
        sync_batchnorm(g, rep.gen)
        once[g.rank] = rep.gen.bn_stats()
        sync_batchnorm(g, rep.gen)
        twice[g.rank] = rep.gen.bn_stats()

    run_inproc(4, worker)
    serial = pre[0].copy()
    for v in pre[1:]:
        serial = serial + v
    serial = serial / 4
    distinct_before = len({v.tobytes() for v in pre})
    identical = all(np.array_equal(o, once[0]) for o in once)
    is_mean = np.array_equal(once[0], serial)
    idem = all(np.array_equal(a, b) for a, b in zip(once, twice))
    record(4, identical and is_mean and idem,
           f"p=4, {distinct_before} distinct pre-sync stats; identical after sync: {identical}; "
           f"equals rank-order serial mean: {is_mean}; idempotent: {idem}")


# 5. oracle

def test_criterion_5_oracle_validity():
    t0 = time.perf_counter()
    times = np.linspace(0.0, 0.2, 201)
    mass_err = {}
    for c in (1, 2, 3):
        u = march(c, FdmConfig(nx=2048), times)
        mass_err[c] = float(np.max(np.abs(u.sum(axis=1) / 2047 - 0.5)))
    mass_ok = all(e < 1e-10 for e in mass_err.values())

    lo, hi = np.inf, -np.inf
    for c in np.arange(0.0, 6.01, 0.5):
        u = solve_fdm(float(c), FdmConfig(nx=2048), 64)
        lo, hi = min(lo, u.min()), max(hi, u.max())
    max_ok = lo >= 0 and hi <= 1

    errs = []
    for nx in (256, 512, 1024, 2048):
        f = march(1.0, FdmConfig(nx=nx), [0.1])[0]
        errs.append(float(np.max(np.abs(f - characteristics_solution(1.0, np.arange(nx) / (nx - 1), 0.1)))))
    conv_ok = errs[-1] < 2e-3 and all(a > b for a, b in zip(errs, errs[1:]))

    ts = steepening_time(3.0)
    steep_ok = abs(ts - 1 / (3 * np.pi)) < 0.1 / (3 * np.pi)
    elapsed = time.perf_counter() - t0
    record(5, mass_ok and max_ok and conv_ok and steep_ok and elapsed < 180,
           f"(a) max |mass-0.5| c=1: {mass_err[1]:.1e}, c=2: {mass_err[2]:.1e}, c=3: {mass_err[3]:.1e} (< 1e-10); "
           f"(b) range [{lo:.3g}, {hi:.6g}]; (c) L-inf errors {', '.join(f'{e:.2e}' for e in errs)}; "
           f"(d) steepening {ts:.4f} vs {1 / (3 * np.pi):.4f}; {elapsed:.0f}s")


# 6-8. training runs shared by the convergence and accuracy criteria

BASE = RunConfig(resolution=64, c_min=3.0, c_max=6.0, n_samples=256, batch_size=64)
BATCH_SIZES = (8, 16, 32, 64)
SGD_EPOCHS, LBFGS_EPOCHS, LBFGS_REACH = 150, 20, 30
CHECKPOINT_EVERY = 25


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("training")
    cache = {}

    def get(optimizer, bs, epochs):
        key = (optimizer, bs)
        if key not in cache:
            out = root / f"{optimizer}_{bs}"
            cfg = BASE.replace(optimizer=optimizer, batch_size=bs, epochs=epochs,
                               checkpoint_every=CHECKPOINT_EVERY if (optimizer, bs) == ("sgd", 64) else 0)
            res = run_inproc(1, lambda g: train_worker(g, cfg, out))[0]
            cache[key] = (cfg, out, res.epoch_losses)
        return cache[key]

    return get


def test_criterion_6_training_convergence(runs):
    cfg, out, losses = runs("sgd", 64, SGD_EPOCHS)
    first = losses[0]
    hit = next((e for e, v in enumerate(losses, 1) if v <= first / 10), None)
    if hit is None:
        longer = cfg.replace(epochs=500, checkpoint_every=0)
        more = run_inproc(1, lambda g: train_worker(g, longer, out / "continued", out / CHECKPOINT_NAME))[0]
        losses = losses + more.epoch_losses
        hit = next((e for e, v in enumerate(losses, 1) if v <= first / 10), None)
    record(6, hit is not None and hit <= 500,
           f"SGD N=64 b_s=64: epoch-1 loss {first:.4g}, reached <= {first / 10:.4g} at epoch {hit}; "
           f"min {min(losses):.4g} (within 500 epochs)")


def test_criterion_7_lbfgs_versus_sgd(runs):
    sgd_150 = {bs: runs("sgd", bs, SGD_EPOCHS)[2][SGD_EPOCHS - 1] for bs in BATCH_SIZES}
    lbfgs = {bs: runs("lbfgs", bs, LBFGS_REACH if bs == 64 else LBFGS_EPOCHS)[2] for bs in BATCH_SIZES}
    target = sgd_150[64]
    reach = next((e for e, v in enumerate(lbfgs[64], 1) if v <= target), None)
    lb_20 = {bs: lbfgs[bs][LBFGS_EPOCHS - 1] for bs in BATCH_SIZES}
    spread_lbfgs = max(lb_20.values()) - min(lb_20.values())
    spread_sgd = max(sgd_150.values()) - min(sgd_150.values())
    ok = reach is not None and reach <= LBFGS_REACH and spread_lbfgs < spread_sgd
    record(7, ok,
           f"SGD epoch-150 loss (b_s=64) {target:.6g}, L-BFGS reaches it at epoch {reach} (<= 30); "
           f"spread L-BFGS@20 {spread_lbfgs:.3g} vs SGD@150 {spread_sgd:.3g} (must be strictly smaller); "
           f"SGD@150 {', '.join(f'{b}:{v:.5g}' for b, v in sgd_150.items())}; "
           f"L-BFGS@20 {', '.join(f'{b}:{v:.5g}' for b, v in lb_20.items())}")


def test_criterion_8_accuracy_versus_oracle(runs):
    cfg, out, _ = runs("sgd", 64, SGD_EPOCHS)
    n, c = cfg.resolution, 4.0
    u_fd = solve_fdm(c, FdmConfig(), n)
    u0 = initial_condition(c, n)
    rels, ic_err = [], None
    for epoch in range(CHECKPOINT_EVERY, SGD_EPOCHS + 1, CHECKPOINT_EVERY):
        gen, _ = load_generator(out / f"checkpoint_epoch{epoch:05d}.bin")
        u = forward(gen, initial_condition(c, n, gen.dtype)[None], "eval").data[0, 0].astype(np.float64)
        rep = compute_norms(u, u_fd, c)
        rels.append(rep.norm_delta / rep.norm_fd)
        ic_err = float(np.linalg.norm(u[0] - u0) / np.linalg.norm(u0))
    mono = all(b <= a for a, b in zip(rels, rels[1:]))
    record(8, rels[-1] < 0.25 and mono and ic_err < 0.05,
           f"c=4 relative L2 error over checkpoints {', '.join(f'{r:.3f}' for r in rels)} "
           f"(final < 0.25, non-increasing: {mono}); IC row relative error {ic_err:.3f} (< 0.05)")


# 9. scaling and transports

def test_criterion_9_scaling_and_transport(tmp_path):
    cfg_text = RunConfig(resolution=32, n_samples=32, batch_size=16, epochs=2, precision=64, lr=1e-4,
                         momentum=0.9, workers=4, transport="sockets",
                         addresses=tuple(free_addresses(4)), timeout=60.0).to_text()
    (tmp_path / "sock.ini").write_text(cfg_text)
    procs = [subprocess.Popen([sys.executable, "-m", "pdegen", "train", "--config", str(tmp_path / "sock.ini"),
                               "--rank", str(r), "--out", str(tmp_path / "sock")]) for r in range(4)]
    codes = [proc.wait(timeout=600) for proc in procs]
    inproc = cfg_text.replace("transport = sockets", "transport = inproc")
    (tmp_path / "inproc.ini").write_text(inproc)
    assert main(["train", "--config", str(tmp_path / "inproc.ini"), "--out", str(tmp_path / "inproc")]) == 0

    def losses(d):
        return [r["loss"] for r in read_csv_rows(d / "train_log.csv")[1] if r["kind"] == "mb"]

    same = codes == [0] * 4 and losses(tmp_path / "sock") == losses(tmp_path / "inproc")
    cores = os.cpu_count() or 1
    if cores < 4:
        line = (f"criterion 9: SKIP  scaling needs >= 4 cores, {cores} available; "
                f"sockets (4 processes) vs in-process loss sequences identical: {same}")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert same, line
        pytest.skip(line)

    from pdegen.bench import run_scaling_sweep
    rows = run_scaling_sweep(BASE, [1, 2, 4, 8], epochs=2)
    comp = {p: np.mean([r.compute_sec for r in rows if r.p == p]) for p in (1, 2, 4, 8)}
    comm = {p: np.mean([r.comm_sec for r in rows if r.p == p]) for p in (1, 2, 4, 8)}
    speed_ok = comp[4] < 0.5 * comp[1]
    sub_ok = all(comm[p] / comm[2] < p / 2 for p in (4, 8))
    record(9, speed_ok and sub_ok and same,
           f"compute p=4/p=1 {comp[4] / comp[1]:.2f} (< 0.5); comm {', '.join(f'{p}:{v:.3f}s' for p, v in comm.items())} "
           f"sub-linear: {sub_ok}; sockets == in-process: {same}")


# 10. inference versus solve

def test_criterion_10_inference_faster_than_solve(tmp_path, capsys):
    cfg = RunConfig(resolution=128)
    save_checkpoint(tmp_path / "ck.bin", cfg, build_replica(cfg), 0)
    infer_t, solve_t = [], []
    for _ in range(3):
        t0 = time.perf_counter()
        assert main(["infer", "--checkpoint", str(tmp_path / "ck.bin"), "--c", "4", "--out",
                     str(tmp_path / "g.bin")]) == 0
        infer_t.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        assert main(["solve", "--c", "4", "--n", "128", "--out", str(tmp_path / "fd.bin")]) == 0
        solve_t.append(time.perf_counter() - t0)
    capsys.readouterr()
    code = main(["compare", str(tmp_path / "g.bin"), str(tmp_path / "fd.bin")])
    csv = capsys.readouterr().out.splitlines()
    valid = code == 0 and csv[1] == "N,c,norm_g,norm_fd,norm_delta" and csv[2].startswith("128,4.0,")
    valid &= read_field(tmp_path / "g.bin").n == read_field(tmp_path / "fd.bin").n == 128
    record(10, min(infer_t) < min(solve_t) and valid,
           f"N=128 infer {min(infer_t):.3f}s vs solve {min(solve_t):.3f}s (best of 3); compare read both: {valid}")
