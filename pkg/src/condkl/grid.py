"""Uniform cell-centred grids, grid fields and their quadrature.

Fields are flat arrays of length ``nx * ny`` in x1-fastest order, i.e. node
``p = i + nx * j`` sits at ``((i + 1/2) hx, (j + 1/2) hy)``.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class StructuredGrid:
    """Cell-centred grid over ``[0, lx] x [0, ly]`` with midpoint weights."""

    nx: int
    ny: int
    lx: float = 2.0
    ly: float = 1.0

    def __post_init__(self):
        if int(self.nx) != self.nx or int(self.ny) != self.ny:
            raise ValueError("grid cell counts must be integers")
        if self.nx < 2 or self.ny < 2:
            raise ValueError(f"grid needs nx, ny >= 2, got {self.nx}x{self.ny}")
        if not (self.lx > 0 and self.ly > 0):
            raise ValueError("domain lengths must be positive")

    @property
    def n(self) -> int:
        return self.nx * self.ny

    @property
    def hx(self) -> float:
        return self.lx / self.nx

    @property
    def hy(self) -> float:
        return self.ly / self.ny

    @property
    def area(self) -> float:
        return self.lx * self.ly

    @cached_property
    def x(self) -> np.ndarray:
        return (np.arange(self.nx) + 0.5) * self.hx

    @cached_property
    def y(self) -> np.ndarray:
        return (np.arange(self.ny) + 0.5) * self.hy

    @cached_property
    def points(self) -> np.ndarray:
        """Node coordinates, shape ``(n, 2)``."""
        x1, x2 = np.meshgrid(self.x, self.y)
        return np.column_stack([x1.ravel(), x2.ravel()])

    @cached_property
    def weights(self) -> np.ndarray:
        return np.full(self.n, self.hx * self.hy)

    def reshape(self, field):
        """View a flat field as an ``(ny, nx)`` array."""
        return np.asarray(field).reshape(self.ny, self.nx)

    def contains(self, points, tol=1e-12) -> np.ndarray:
        p = np.atleast_2d(points)
        return (
            (p[:, 0] >= -tol)
            & (p[:, 0] <= self.lx + tol)
            & (p[:, 1] >= -tol)
            & (p[:, 1] <= self.ly + tol)
        )

    def nearest_node(self, points) -> np.ndarray:
        p = np.atleast_2d(points)
        i = np.clip(np.floor(p[:, 0] / self.hx), 0, self.nx - 1).astype(int)
        j = np.clip(np.floor(p[:, 1] / self.hy), 0, self.ny - 1).astype(int)
        return i + self.nx * j

    def interpolate(self, fields, points) -> np.ndarray:
        """Bilinear interpolation of grid fields at arbitrary points.

        Parameters
        ----------
        fields : array, shape (n,) or (n, k)
            One field or ``k`` fields stored as columns.
        points : array, shape (m, 2)

        Returns
        -------
        array, shape (m,) or (m, k)
            Values at ``points``. Outside the hull of cell centres the
            interpolant is extended as a constant along the normal direction.
        """
        f = np.asarray(fields, dtype=float)
        p = np.atleast_2d(np.asarray(points, dtype=float))
        fx = np.clip(p[:, 0] / self.hx - 0.5, 0.0, self.nx - 1.0)
        fy = np.clip(p[:, 1] / self.hy - 0.5, 0.0, self.ny - 1.0)
        i0 = np.minimum(np.floor(fx).astype(int), self.nx - 2)
        j0 = np.minimum(np.floor(fy).astype(int), self.ny - 2)
        tx = fx - i0
        ty = fy - j0
        p00 = i0 + self.nx * j0
        w = [(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty]
        idx = [p00, p00 + 1, p00 + self.nx, p00 + self.nx + 1]
        if f.ndim == 1:
            return sum(wk * f[ik] for wk, ik in zip(w, idx))
        return sum(wk[:, None] * f[ik] for wk, ik in zip(w, idx))


@dataclass(frozen=True, eq=False)
class MomentField:
    """Pointwise mean and standard deviation of a random field on a grid.

    ``n_clipped`` counts nodes where a quadrature variance came out negative
    and was clipped to zero.
    """

    mean: np.ndarray
    std: np.ndarray
    n_clipped: int = 0

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        std = np.asarray(self.std, dtype=float)
        if mean.shape != std.shape:
            raise ValueError("mean and std must share the grid")
        if np.any(std < 0):
            raise ValueError("standard deviation must be nonnegative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)


def field_l2_norm(field, grid: StructuredGrid) -> float:
    """Quadrature L2 norm ``sqrt(sum_i w_i f_i^2)``."""
    f = np.asarray(field, dtype=float)
    return float(np.sqrt(np.dot(grid.weights, f * f)))
