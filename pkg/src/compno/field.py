"""Periodic uniform grids, multi-channel fields and finite-difference stencils.

Arrays are laid out channel-major, ``[channel][y][x]``; the last axis is x.
Every stencil wraps periodically via ``np.roll``, so all operators here are
exactly translation-equivariant.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Grid",
    "Field",
    "ShapeError",
    "NonFiniteError",
    "ddx",
    "ddy",
    "lap5",
    "lap_wide",
    "upwind_dx",
    "upwind_dy",
    "fd_derivative",
    "laplacian",
    "gradient",
    "divergence",
    "field_norms",
]


class ShapeError(ValueError):
    """Raised when fields do not share a grid or channel layout."""


class NonFiniteError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    nx: int
    ny: int
    lx: float = 2 * np.pi
    ly: float = 2 * np.pi

    def __post_init__(self):
        for n in (self.nx, self.ny):
            if int(n) != n or n < 4 or n % 2:
                raise ValueError(f"grid sizes must be even integers >= 4, got {self.nx}x{self.ny}")
        if not (self.lx > 0 and self.ly > 0):
            raise ValueError("domain extents must be positive")

    @property
    def dx(self) -> float:
        return self.lx / self.nx

    @property
    def dy(self) -> float:
        return self.ly / self.ny

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell-vertex coordinates ``(X, Y)``, each of shape ``(ny, nx)``."""
        x = np.arange(self.nx) * self.dx
        y = np.arange(self.ny) * self.dy
        return np.meshgrid(x, y)


class Field:
    """A stack of real scalar fields living on one periodic grid.

    ``data`` has shape ``(channels, ny, nx)``. A 2D array is promoted to a
    single channel.
    """

    __slots__ = ("grid", "data")

    def __init__(self, grid: Grid, data):
        data = np.asarray(data, dtype=float)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or data.shape[1:] != grid.shape or data.shape[0] < 1:
            raise ShapeError(f"data shape {data.shape} does not fit grid {grid.shape}")
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("field values must be finite")
        self.grid = grid
        self.data = data

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    def channel(self, i: int) -> "Field":
        return Field(self.grid, self.data[i : i + 1])

    def with_data(self, data) -> "Field":
        return Field(self.grid, data)

    def __repr__(self):
        return f"Field(channels={self.channels}, grid={self.grid.ny}x{self.grid.nx})"

    def __eq__(self, other):
        if not isinstance(other, Field):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.data, other.data)

    __hash__ = None


# -- array-level stencils (last two axes are y, x) ---------------------------

def ddx(a: np.ndarray, dx: float) -> np.ndarray:
    return (np.roll(a, -1, axis=-1) - np.roll(a, 1, axis=-1)) / (2 * dx)


def ddy(a: np.ndarray, dy: float) -> np.ndarray:
    return (np.roll(a, -1, axis=-2) - np.roll(a, 1, axis=-2)) / (2 * dy)


def lap5(a: np.ndarray, dx: float, dy: float) -> np.ndarray:
    return (
        (np.roll(a, -1, axis=-1) - 2 * a + np.roll(a, 1, axis=-1)) / dx**2
        + (np.roll(a, -1, axis=-2) - 2 * a + np.roll(a, 1, axis=-2)) / dy**2
    )


def lap_wide(a: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Laplacian on the 2h stencil; equals ``ddx(ddx) + ddy(ddy)`` exactly."""
    return (
        (np.roll(a, -2, axis=-1) - 2 * a + np.roll(a, 2, axis=-1)) / (4 * dx**2)
        + (np.roll(a, -2, axis=-2) - 2 * a + np.roll(a, 2, axis=-2)) / (4 * dy**2)
    )


def _upwind(a, vel, h, axis):
    back = (a - np.roll(a, 1, axis=axis)) / h
    fwd = (np.roll(a, -1, axis=axis) - a) / h
    # zero velocity takes the backward stencil
    return np.where(vel >= 0, back, fwd)


def upwind_dx(a: np.ndarray, vel, dx: float) -> np.ndarray:
    return _upwind(a, vel, dx, -1)


def upwind_dy(a: np.ndarray, vel, dy: float) -> np.ndarray:
    return _upwind(a, vel, dy, -2)


# -- Field-level operations ---------------------------------------------------

def _check_same(f: Field, g: Field):
    if f.grid != g.grid:
        raise ShapeError("fields live on different grids")
    if f.data.shape != g.data.shape:
        raise ShapeError(f"shape mismatch {f.data.shape} vs {g.data.shape}")


def _check_scalar(f: Field, name: str):
    if f.channels != 1:
        raise ShapeError(f"{name} expects a single-channel field, got {f.channels} channels")


def fd_derivative(f: Field, axis: str, scheme: str = "central", advect: Field | None = None) -> Field:
    """First derivative of every channel of ``f`` along ``axis``.

    ``scheme="upwind"`` needs ``advect``, the local advecting velocity (one
    channel, or one per channel of ``f``); its sign picks the one-sided stencil.
    """
    if axis not in ("x", "y"):
        raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")
    g = f.grid
    h = g.dx if axis == "x" else g.dy
    if scheme == "central":
        out = ddx(f.data, h) if axis == "x" else ddy(f.data, h)
    elif scheme == "upwind":
        if advect is None:
            raise ValueError("upwind scheme needs an advecting velocity field")
        if advect.grid != g or advect.channels not in (1, f.channels):
            raise ShapeError("advecting field does not match the differentiated field")
        fn = upwind_dx if axis == "x" else upwind_dy
        out = fn(f.data, advect.data, h)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    return Field(g, out)


def laplacian(f: Field, stencil: str = "compact") -> Field:
    """Channel-wise periodic Laplacian.

    ``"compact"`` is the 5-point stencil; ``"wide"`` is the composition of the
    central gradient and central divergence (stencil reach 2 cells).
    """
    g = f.grid
    if stencil == "compact":
        return Field(g, lap5(f.data, g.dx, g.dy))
    if stencil == "wide":
        return Field(g, lap_wide(f.data, g.dx, g.dy))
    raise ValueError(f"unknown stencil {stencil!r}")


def gradient(p: Field) -> tuple[Field, Field]:
    _check_scalar(p, "gradient")
    g = p.grid
    return Field(g, ddx(p.data, g.dx)), Field(g, ddy(p.data, g.dy))


def divergence(u: Field, v: Field) -> Field:
    _check_scalar(u, "divergence")
    _check_scalar(v, "divergence")
    _check_same(u, v)
    g = u.grid
    return Field(g, ddx(u.data, g.dx) + ddy(v.data, g.dy))


def field_norms(f: Field, g: Field) -> dict[str, float]:
    """Mean absolute error, max abs difference and relative L2 of ``f`` against ``g``."""
    _check_same(f, g)
    diff = f.data - g.data
    ref = np.linalg.norm(g.data)
    err = np.linalg.norm(diff)
    if ref == 0.0:
        rel = 0.0 if err == 0.0 else float("inf")
    else:
        rel = float(err / ref)
    return {
        "mae": float(np.mean(np.abs(diff))),
        "max_abs_diff": float(np.max(np.abs(diff))),
        "rel_l2": rel,
    }
