"""Reference solutions of the inviscid Burgers equation u_t + (u^2/2)_x = 0.

``solve_fdm`` is a first-order Godunov finite-volume scheme in conservation
form, so shock speeds are correct. ``characteristics_solution`` gives the
smooth solution before the first shock.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from .pde_loss import T_END, PhysicalDomain, initial_condition

NORM_FORMULA = "norm(u) = sqrt(sum_ij u_ij^2 * dx * dt), dx = 1/(N-1), dt = 0.2/(N-1)"


class CflError(RuntimeError):
    pass


@dataclass(frozen=True)
class FdmConfig:
    nx: int = 2048
    cfl: float = 0.45
    t_end: float = T_END

    def __post_init__(self):
        if not 0 < self.cfl < 1:
            raise ValueError(f"CFL number must be in (0, 1), got {self.cfl}")
        if self.nx < 16:
            raise ValueError(f"nx must be >= 16, got {self.nx}")


def godunov_flux(ul: np.ndarray, ur: np.ndarray) -> np.ndarray:
    """Exact Riemann flux for f(u) = u^2 / 2."""
    return np.maximum(0.5 * np.maximum(ul, 0.0) ** 2, 0.5 * np.minimum(ur, 0.0) ** 2)


def march(c: float, cfg: FdmConfig, times) -> np.ndarray:
    """Godunov solution on ``cfg.nx`` nodes at each requested time.

    The node grid is x_j = j / (nx - 1); ghost values u = 0 outside [0, 1]
    impose the Dirichlet data. Time steps are CFL-limited and shortened to land
    exactly on every requested time. Returns an array [len(times), nx].
    """
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1 or (np.diff(times) < 0).any() or (times < 0).any():
        raise ValueError("times must be a non-decreasing sequence of non-negative values")
    nx = cfg.nx
    dx = 1.0 / (nx - 1)
    u = initial_condition(c, nx)
    out = np.empty((times.size, nx))
    flux = np.empty(nx + 1)
    t = 0.0
    for k, t_next in enumerate(times):
        while t < t_next:
            umax = float(np.max(np.abs(u)))
            dt = cfg.cfl * dx / umax if umax > 0 else t_next - t
            last = t + dt >= t_next
            if last:
                dt = t_next - t
            if dt * umax > dx:
                raise CflError(f"CFL violated: dt={dt}, max|u|={umax}, dx={dx}")
            flux[1:-1] = godunov_flux(u[:-1], u[1:])
            flux[0] = godunov_flux(0.0, u[0])
            flux[-1] = godunov_flux(u[-1], 0.0)
            u = u - (dt / dx) * (flux[1:] - flux[:-1])
            t = t_next if last else t + dt
        out[k] = u
    return out


def solve_fdm(c: float, cfg: FdmConfig | None = None, n: int = 64) -> np.ndarray:
    """Space-time field [n, n] (axis 0 = t, axis 1 = x) sampled from a fine Godunov run."""
    cfg = cfg or FdmConfig()
    if cfg.nx < 2 * n:
        raise ValueError(f"nx={cfg.nx} must be at least twice the output resolution {n}")
    dom = PhysicalDomain(n, t_extent=(0.0, cfg.t_end))
    fine = march(c, cfg, dom.t())
    cols = np.rint(dom.x() * (cfg.nx - 1)).astype(int)
    return fine[:, cols]


def shock_time(c: float) -> float:
    """Earliest characteristic crossing, -1 / min u0'(x) = 1 / (pi c)."""
    if not c > 0:
        raise ValueError(f"shock time is defined for c > 0, got {c}")
    return 1.0 / (math.pi * c)


def characteristics_solution(c: float, x, t: float, tol: float = 1e-12) -> np.ndarray:
    """Smooth solution u = u0(x - u t) found by bisection on the characteristic foot."""
    if c > 0 and t >= shock_time(c):
        raise ValueError(f"t={t} is not before the shock time {shock_time(c)} for c={c}")
    x = np.asarray(x, dtype=np.float64)

    def u0(xi):
        return 0.5 * (1.0 - np.cos(2.0 * np.pi * c * xi))

    if t == 0:
        return u0(x)
    lo, hi = x - t, x.copy()
    # g(xi) = xi + u0(xi) t - x is increasing, g(lo) <= 0 <= g(hi)
    while np.max(hi - lo) > tol:
        mid = 0.5 * (lo + hi)
        neg = mid + u0(mid) * t - x < 0
        lo = np.where(neg, mid, lo)
        hi = np.where(neg, hi, mid)
        if np.all(mid == lo) and np.all(mid == hi):
            break
    return u0(0.5 * (lo + hi))


def total_variation(u: np.ndarray) -> np.ndarray:
    return np.abs(np.diff(u, axis=-1)).sum(axis=-1)


def steepening_time(c: float, cfg: FdmConfig | None = None, samples: int = 801, gain: float = 20.0) -> float:
    """First sampled time at which the steepest compressive slope reaches ``gain`` times its initial value.

    Before the shock the steepest slope grows like 1 / (t* - t); afterwards a
    monotone scheme caps it at a few cells per jump. The crossing time
    therefore lands just before t* * (1 - 1/gain) for smooth data and tracks
    the onset of the shock when measured on the discrete solution.
    """
    cfg = cfg or FdmConfig()
    times = np.linspace(0.0, cfg.t_end, samples)
    fine = march(c, cfg, times)
    slope = np.max(fine[:, :-1] - fine[:, 1:], axis=1) * (cfg.nx - 1)
    if slope[0] <= 0:
        return math.inf
    hit = np.nonzero(slope >= gain * slope[0])[0]
    return float(times[hit[0]]) if hit.size else math.inf


@dataclass(frozen=True)
class NormReport:
    n: int
    c: float
    norm_g: float
    norm_fd: float
    norm_delta: float

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        if header:
            buf.write(f"# {NORM_FORMULA}\n")
            buf.write("N,c,norm_g,norm_fd,norm_delta\n")
        buf.write(f"{self.n},{self.c!r},{self.norm_g!r},{self.norm_fd!r},{self.norm_delta!r}\n")
        return buf.getvalue()


def field_norm(u: np.ndarray, t_end: float = T_END) -> float:
    n_t, n_x = u.shape
    dx, dt = 1.0 / (n_x - 1), t_end / (n_t - 1)
    return float(np.sqrt(np.sum(np.square(u)) * dx * dt))


def compute_norms(u_g: np.ndarray, u_fd: np.ndarray, c: float = math.nan) -> NormReport:
    """Space-time L2 norms of both fields and of their difference."""
    u_g, u_fd = np.asarray(u_g, dtype=np.float64), np.asarray(u_fd, dtype=np.float64)
    if u_g.shape != u_fd.shape:
        raise ValueError(f"field shapes differ: {u_g.shape} vs {u_fd.shape}")
    if u_g.ndim != 2:
        raise ValueError(f"fields must be 2-D, got shape {u_g.shape}")
    return NormReport(u_g.shape[1], c, field_norm(u_g), field_norm(u_fd), field_norm(u_g - u_fd))
