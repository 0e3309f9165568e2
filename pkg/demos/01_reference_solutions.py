"""
Reference solutions of the inviscid Burgers equation
====================================================

The training target is u_t + u u_x = 0 on x in [0, 1], t in [0, 0.2] with
u(x, 0) = (1 - cos(2 pi c x)) / 2 and u = 0 at both ends. This script builds
the finite-volume reference field, checks it against the smooth
characteristic solution, and looks at when shocks appear.
"""
import numpy as np

from pdegen.oracle import (FdmConfig, characteristics_solution, compute_norms, march, shock_time,
                           solve_fdm, steepening_time)

# Characteristics first cross at t* = 1 / (pi c), so only small c stay smooth
# over the whole window.
for c in (1.0, 2.0, 3.0, 6.0):
    print(f"c = {c}: shock time {shock_time(c):.4f}")

# Before t*, the Godunov solution converges to the characteristic solution at
# first order.
for nx in (256, 512, 1024, 2048):
    x = np.arange(nx) / (nx - 1)
    u = march(1.0, FdmConfig(nx=nx), [0.1])[0]
    print(f"nx = {nx:4d}: max error at t=0.1 {np.max(np.abs(u - characteristics_solution(1.0, x, 0.1))):.2e}")

# The steepest downhill slope blows up near t*, which gives an empirical
# shock time from the discrete solution alone.
print("steepening time for c=3:", steepening_time(3.0), "vs", shock_time(3.0))

# Mass only changes once a shock reaches x = 1 and leaves the domain.
times = np.linspace(0, 0.2, 5)
for c in (2.0, 3.0):
    u = march(c, FdmConfig(nx=2048), times)
    print(f"c = {c}: mass", np.round(u.sum(axis=1) / 2047, 6))

# The sampled N x N field is what a trained generator is compared against.
u_fd = solve_fdm(4.0, n=64)
print("field", u_fd.shape, "range", u_fd.min(), u_fd.max())
print(compute_norms(np.zeros_like(u_fd), u_fd, 4.0).to_csv(), end="")
