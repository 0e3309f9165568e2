"""
The generator and its physics loss
==================================

A generator maps one initial-condition row to a full (t, x) field. The loss
has no solution data in it: a residual term for the PDE, computed with Sobel
stencils, plus lam times the misfit of the t=0 row.
"""
import numpy as np

from pdegen.model import GeneratorConfig, build_generator, forward
from pdegen.oracle import solve_fdm
from pdegen.pde_loss import LossConfig, PhysicalDomain, ic_batch, loss_parts

n = 64
cfg = GeneratorConfig(resolution=n, precision=64, seed=0)
gen = build_generator(cfg)
print("blocks", cfg.n_blocks, "channels", cfg.channel_schedule(), "parameters", gen.n_params)

ics = ic_batch([3.0, 4.5], n)
u = forward(gen, ics, "eval").data
print("output", u.shape, "in (0, 1):", u.min() > 0 and u.max() < 1)

# A few hand-made candidate fields for c = 4
dom = PhysicalDomain(n)
ic = ic_batch([4.0], n)
candidates = {
    "zero": np.zeros((1, 1, n, n)),
    "constant 0.5": np.full((1, 1, n, n), 0.5),
    "initial row repeated": np.tile(ic[0], (n, 1))[None, None],
    "finite-volume solution": solve_fdm(4.0, n=n)[None, None],
    "untrained generator": forward(gen, ic, "eval").data,
}
for lam in (10.0, 1000.0):
    print(f"\nlam = {lam}")
    for name, field in candidates.items():
        parts = loss_parts(field, ic, LossConfig(lam), dom)
        print(f"  {name:24s} residual {parts.residual:10.4f}  boundary {parts.boundary:.4f}  total {float(parts.total.data):10.4f}")

# The shocks in the reference field make its pointwise residual large, so on
# this grid the loss prefers smooth, nearly constant fields over the physical
# solution. That is worth keeping in mind when reading training curves.
