"""Finite-difference stencils and the data-free Burgers training objective.

Fields are laid out as [B, 1, N, N] with axis -2 = t and axis -1 = x. Row 0 is
the initial time.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

T_END = 0.2

SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])
SOBEL_T = SOBEL_X.T.copy()
LAPLACE_5 = np.array([[0.0, 1.0, 0.0],
                      [1.0, -4.0, 1.0],
                      [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class PhysicalDomain:
    """Uniform grid on [0, 1] (x) by [0, 0.2] (t), both with N nodes."""

    resolution: int
    x_extent: tuple[float, float] = (0.0, 1.0)
    t_extent: tuple[float, float] = (0.0, T_END)

    def __post_init__(self):
        if self.resolution < 2:
            raise ValueError(f"resolution must be >= 2, got {self.resolution}")

    @property
    def dx(self) -> float:
        return (self.x_extent[1] - self.x_extent[0]) / (self.resolution - 1)

    @property
    def dt(self) -> float:
        return (self.t_extent[1] - self.t_extent[0]) / (self.resolution - 1)

    def x(self) -> np.ndarray:
        return np.linspace(*self.x_extent, self.resolution)

    def t(self) -> np.ndarray:
        return np.linspace(*self.t_extent, self.resolution)


@dataclass(frozen=True)
class LossConfig:
    lam: float = 10.0
    # also penalize u at x=0 and x=1 (target 0); off by default
    x_boundary: bool = False

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lambda must be > 0, got {self.lam}")


def initial_condition(c: float, n: int, dtype=np.float64) -> np.ndarray:
    """u(x, 0) = (1 - cos(2 pi c x)) / 2 at the n nodes x_j = j / (n - 1)."""
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    x = np.arange(n) / (n - 1)
    return (0.5 * (1.0 - np.cos(2.0 * np.pi * c * x))).astype(dtype)


def ic_batch(cs, n: int, dtype=np.float64) -> np.ndarray:
    return np.stack([initial_condition(c, n, dtype) for c in np.atleast_1d(cs)])


def _as_field(field) -> Tensor:
    f = field if isinstance(field, Tensor) else Tensor(np.asarray(field, dtype=np.float64))
    if f.data.ndim == 2:
        f = ad.reshape(f, (1, 1) + f.shape)
    if f.data.ndim != 4 or f.shape[1] != 1:
        raise ad.ShapeError(f"expected a field of shape [B,1,N,N], got {f.shape}")
    if f.shape[2] < 3 or f.shape[3] < 3:
        raise ad.ShapeError(f"field must be at least 3x3, got {f.shape[2:]}")
    return f


def _stencil(field: Tensor, kernel: np.ndarray, factor: float) -> Tensor:
    w = Tensor((kernel * factor).astype(field.dtype)[None, None])
    return ad.conv2d(field, w, "valid")


def ddx(field, domain: PhysicalDomain) -> Tensor:
    """Sobel x-derivative on the interior, shape [B,1,N-2,N-2]."""
    return _stencil(_as_field(field), SOBEL_X, 1.0 / (8.0 * domain.dx))


def ddt(field, domain: PhysicalDomain) -> Tensor:
    """Sobel t-derivative on the interior, shape [B,1,N-2,N-2]."""
    return _stencil(_as_field(field), SOBEL_T, 1.0 / (8.0 * domain.dt))


def laplacian(field, domain: PhysicalDomain) -> Tensor:
    # assumes an isotropic grid: both axes scaled by 1/dx^2
    return _stencil(_as_field(field), LAPLACE_5, 1.0 / domain.dx ** 2)


def burgers_residual(field, domain: PhysicalDomain) -> Tensor:
    """u_t + u u_x evaluated on the interior nodes."""
    f = _as_field(field)
    return ad.add(ddt(f, domain), ad.mul(ad.crop_interior(f), ddx(f, domain)))


@dataclass
class LossParts:
    total: Tensor
    residual: float
    boundary: float


def loss_parts(gen_output, ics, cfg: LossConfig, domain: PhysicalDomain) -> LossParts:
    """Composite loss ``L_p + lam * L_b`` with both components reported."""
    f = _as_field(gen_output)
    ics = ics if isinstance(ics, Tensor) else Tensor(np.asarray(ics, dtype=f.dtype))
    if ics.data.ndim != 2 or ics.shape != (f.shape[0], f.shape[3]):
        raise ad.ShapeError(f"ic batch shape {ics.shape} does not match field shape {f.shape}")
    res = burgers_residual(f, domain)
    l_p = ad.mean(ad.square(res))
    first_row = ad.reshape(ad.crop(f, (slice(None), 0, 0, slice(None))), ics.shape)
    l_b = ad.mse(first_row, ics)
    if cfg.x_boundary:
        edges = ad.crop(f, (slice(None), 0, slice(None), slice(0, None, f.shape[3] - 1)))
        l_b = ad.add(l_b, ad.mean(ad.square(edges)))
    for name, part in (("residual loss", l_p), ("boundary loss", l_b)):
        if not np.isfinite(part.data):
            raise ad.NonFiniteError(f"{name} is not finite ({float(part.data)})")
    total = ad.add(l_p, ad.scale(l_b, cfg.lam))
    return LossParts(total, float(l_p.data), float(l_b.data))


def total_loss(gen_output, ics, cfg: LossConfig, domain: PhysicalDomain) -> Tensor:
    return loss_parts(gen_output, ics, cfg, domain).total
