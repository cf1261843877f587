"""Classical periodic solvers that generate ground-truth trajectories.

Explicit terms use upwind (or optionally central) finite differences, implicit
diffusion is Crank-Nicolson diagonalised in Fourier space, and pressure is
obtained with an exact spectral inverse of the discrete Poisson operator.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field, replace
from typing import Callable

import numpy as np
import scipy.fft as sfft

from .field import (
    Field,
    Grid,
    NonFiniteError,
    ShapeError,
    ddx,
    ddy,
    upwind_dx,
    upwind_dy,
)

__all__ = [
    "VARIANTS",
    "PdeParams",
    "Trajectory",
    "CflError",
    "InstabilityError",
    "DivergenceError",
    "laplacian_symbol",
    "ic_taylor_green",
    "ic_shear_layer",
    "ic_isotropic",
    "step_linear_convection",
    "step_diffusion_cn",
    "step_inviscid_burgers",
    "step_convdiff_imex",
    "step_burgers_imexrk3",
    "step_ins_projection",
    "solve_poisson",
    "cfl_dt",
    "stepper_for",
    "integrate",
]

# Order fixes the on-disk task enum.
VARIANTS = (
    "linconv",
    "diffusion",
    "nlconv",
    "poisson",
    "convdiff",
    "burgers_scalar",
    "burgers_vec",
    "ins",
    "diffusion_vec",
    "nlconv_vec",
)


class CflError(ValueError):
    def __init__(self, cfl: float, limit: float = 1.0):
        super().__init__(f"CFL number {cfl:.4g} exceeds limit {limit:g}")
        self.cfl = cfl


class InstabilityError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    """Non-finite state met during integration; carries the partial trajectory."""

    def __init__(self, step: int, trajectory: "Trajectory"):
        super().__init__(f"non-finite values at step {step}")
        self.step = step
        self.trajectory = trajectory


@dataclass(frozen=True)
class PdeParams:
    variant: str = "diffusion"
    beta: float = 0.0
    nu: float = 0.0
    rho: float = 1.0
    dt: float = 0.01

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.nu < 0:
            raise ValueError("nu must be non-negative")
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    def peclet(self, length: float) -> float:
        return self.beta * length / self.nu

    def reynolds(self, velocity: float, length: float) -> float:
        return velocity * length / self.nu

    def vector(self) -> np.ndarray:
        return np.array([self.beta, self.nu, self.rho], dtype=float)

    def with_dt(self, dt: float) -> "PdeParams":
        return replace(self, dt=dt)


@dataclass
class Trajectory:
    """Time-ordered frames ``data[t, channel, y, x]`` on one grid."""

    grid: Grid
    data: np.ndarray
    params: PdeParams
    split: str = "train"
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4 or self.data.shape[2:] != self.grid.shape:
            raise ShapeError(f"trajectory data shape {self.data.shape} does not fit grid {self.grid.shape}")

    @property
    def dt(self) -> float:
        return self.params.dt

    @property
    def n_time(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def fields(self) -> list[Field]:
        return [Field(self.grid, frame) for frame in self.data]


# -- spectral symbols -----------------------------------------------------------

def _angles(grid: Grid):
    ty = 2 * np.pi * sfft.fftfreq(grid.ny)[:, None]
    tx = 2 * np.pi * sfft.rfftfreq(grid.nx)[None, :]
    return tx, ty


def laplacian_symbol(grid: Grid, stencil: str = "compact") -> np.ndarray:
    """Eigenvalues of the discrete Laplacian on the rfft2 layout ``(ny, nx//2+1)``."""
    tx, ty = _angles(grid)
    if stencil == "compact":
        return -(4 / grid.dx**2) * np.sin(tx / 2) ** 2 - (4 / grid.dy**2) * np.sin(ty / 2) ** 2
    if stencil == "wide":
        return -np.sin(tx) ** 2 / grid.dx**2 - np.sin(ty) ** 2 / grid.dy**2
    raise ValueError(f"unknown stencil {stencil!r}")


def _rfft(a):
    return sfft.rfft2(a, axes=(-2, -1))


def _irfft(a, grid):
    return sfft.irfft2(a, s=grid.shape, axes=(-2, -1))


# -- initial conditions ------------------------------------------------------------

def ic_taylor_green(grid: Grid, amplitude: float = 1.0, rho: float = 1.0, k: int = 1):
    """Taylor-Green vortex ``(u, v, p)``; divergence-free for central stencils."""
    X, Y = grid.coords()
    kx, ky = 2 * np.pi * k / grid.lx, 2 * np.pi * k / grid.ly
    u = amplitude * np.sin(kx * X) * np.cos(ky * Y)
    v = -amplitude * np.cos(kx * X) * np.sin(ky * Y)
    p = rho * amplitude**2 / 4 * (np.cos(2 * kx * X) + np.cos(2 * ky * Y))
    return Field(grid, u), Field(grid, v), Field(grid, p)


def ic_shear_layer(grid: Grid, thickness: float = 0.1, perturb_amp: float = 0.05, seed: int = 0):
    """Periodic double shear layer with a sinusoidal cross-stream perturbation."""
    if thickness <= 0:
        raise ValueError("thickness must be positive")
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * np.pi)
    X, Y = grid.coords()
    ly = grid.ly
    thick = thickness * ly / (2 * np.pi)
    u = np.where(Y <= ly / 2, np.tanh((Y - ly / 4) / thick), np.tanh((3 * ly / 4 - Y) / thick))
    v = perturb_amp * np.sin(2 * np.pi * X / grid.lx + phase)
    return Field(grid, u), Field(grid, v)


def ic_isotropic(grid: Grid, seed: int = 0, peak_wavenumber: float = 3.0, components: int = 1,
                 band: float = 2.0):
    """Random-phase field with energy on the shell ``|k - peak| <= band``.

    ``components=1`` gives one zero-mean, unit-RMS scalar field.
    ``components=2`` derives ``(u, v)`` from a random stream function with
    central differences, so the discrete divergence vanishes.
    """
    if peak_wavenumber >= min(grid.nx, grid.ny) / 4:
        raise ValueError(f"peak wavenumber {peak_wavenumber} must stay below nx/4 = {min(grid.nx, grid.ny) / 4}")
    if components not in (1, 2):
        raise ValueError("components must be 1 or 2")
    rng = np.random.default_rng(seed)
    ky = sfft.fftfreq(grid.ny, 1.0 / grid.ny)[:, None] * (2 * np.pi / grid.ly)
    kx = sfft.fftfreq(grid.nx, 1.0 / grid.nx)[None, :] * (2 * np.pi / grid.lx)
    kmag = np.sqrt(kx**2 + ky**2)
    mask = (np.abs(kmag - peak_wavenumber) <= band) & (kmag > 0)
    amp = np.where(mask, np.exp(-0.5 * (kmag - peak_wavenumber) ** 2), 0.0)
    phase = rng.uniform(0, 2 * np.pi, size=amp.shape)
    spec = amp * np.exp(1j * phase)
    psi = np.real(sfft.ifft2(spec))
    if components == 1:
        f = psi - psi.mean()
        f /= np.sqrt(np.mean(f**2))
        return Field(grid, f)
    u = ddy(psi, grid.dy)
    v = -ddx(psi, grid.dx)
    scale = np.sqrt(0.5 * np.mean(u**2 + v**2))
    return Field(grid, u / scale), Field(grid, v / scale)


# -- stability -------------------------------------------------------------------

def cfl_dt(variant: str, data: np.ndarray, grid: Grid, beta: float = 0.0) -> float:
    """Largest stable explicit step (CFL = 1) for ``variant`` on state ``data``."""
    if variant in ("diffusion", "diffusion_vec", "poisson"):
        return np.inf
    if variant in ("linconv", "convdiff"):
        speed = abs(beta) * (1 / grid.dx + 1 / grid.dy)
    elif variant in ("nlconv", "burgers_scalar"):
        speed = np.max(np.abs(data)) * (1 / grid.dx + 1 / grid.dy)
    else:
        speed = np.max(np.abs(data[0])) / grid.dx + np.max(np.abs(data[1])) / grid.dy
    return np.inf if speed == 0 else 1.0 / speed


def _check_cfl(cfl: float):
    if cfl > 1.0 + 1e-12:
        raise CflError(cfl)


# -- explicit tendencies (arrays, shape (C, ny, nx)) -----------------------------

def _conv_linear(a, beta, grid):
    return beta * (upwind_dx(a, beta, grid.dx) + upwind_dy(a, beta, grid.dy))


def _conv_scalar(a, grid, scheme):
    if scheme == "upwind":
        return a * (upwind_dx(a, a, grid.dx) + upwind_dy(a, a, grid.dy))
    return a * (ddx(a, grid.dx) + ddy(a, grid.dy))


def _conv_vector(a, grid, scheme):
    u, v = a[0], a[1]
    if scheme == "upwind":
        return np.stack([u * upwind_dx(w, u, grid.dx) + v * upwind_dy(w, v, grid.dy) for w in (u, v)])
    return np.stack([u * ddx(w, grid.dx) + v * ddy(w, grid.dy) for w in (u, v)])


def _cn(a, grid, nu, dt):
    if nu == 0:
        return a
    half = 0.5 * nu * dt * laplacian_symbol(grid)
    return _irfft(_rfft(a) * ((1 + half) / (1 - half)), grid)


# -- Field-level steppers ----------------------------------------------------------

def step_linear_convection(f: Field, params: PdeParams) -> Field:
    g = f.grid
    _check_cfl(abs(params.beta) * params.dt * (1 / g.dx + 1 / g.dy))
    if params.beta == 0:
        return f
    return Field(g, f.data - params.dt * _conv_linear(f.data, params.beta, g))


def step_diffusion_cn(f: Field, params: PdeParams) -> Field:
    return Field(f.grid, _cn(f.data, f.grid, params.nu, params.dt))


def _euler_conv(a, grid, dt, vectorial, scheme):
    if vectorial:
        return a - dt * _conv_vector(a, grid, scheme)
    return a - dt * _conv_scalar(a, grid, scheme)


def _check_nl_cfl(a, grid, dt, vectorial):
    variant = "nlconv_vec" if vectorial else "nlconv"
    _check_cfl(dt / cfl_dt(variant, a, grid))


def _check_vectorial(f: Field, vectorial: bool):
    if vectorial and f.channels != 2:
        raise ShapeError("vectorial Burgers needs a two-channel (u, v) field")


def step_inviscid_burgers(fields: Field, params: PdeParams, vectorial: bool = False,
                          convection: str = "upwind") -> Field:
    """One explicit Euler step of pure self-advection."""
    _check_vectorial(fields, vectorial)
    g = fields.grid
    _check_nl_cfl(fields.data, g, params.dt, vectorial)
    return Field(g, _euler_conv(fields.data, g, params.dt, vectorial, convection))


def step_convdiff_imex(f: Field, params: PdeParams) -> Field:
    """Explicit upwind convection followed by an implicit CN diffusion solve."""
    return step_diffusion_cn(step_linear_convection(f, params), params)


def _ssprk3(a, grid, dt, vectorial, scheme):
    def euler(x):
        return _euler_conv(x, grid, dt, vectorial, scheme)

    a1 = euler(a)
    a2 = 0.75 * a + 0.25 * euler(a1)
    return a / 3.0 + (2.0 / 3.0) * euler(a2)


def _imexrk3(a, grid, params, vectorial, scheme):
    # CN half step, explicit SSP-RK3 convection, CN half step. Putting a full CN
    # solve inside each Shu-Osher stage is only first order in the stiff limit.
    half = 0.5 * params.dt
    a = _cn(a, grid, params.nu, half)
    a = _ssprk3(a, grid, params.dt, vectorial, scheme)
    return _cn(a, grid, params.nu, half)


def step_burgers_imexrk3(fields: Field, params: PdeParams, vectorial: bool = False,
                         convection: str = "upwind") -> Field:
    """Viscous Burgers step: Shu-Osher SSP-RK3 convection wrapped in two CN half steps."""
    _check_vectorial(fields, vectorial)
    g = fields.grid
    _check_nl_cfl(fields.data, g, params.dt, vectorial)
    return Field(g, _imexrk3(fields.data, g, params, vectorial, convection))


def solve_poisson(f: Field, stencil: str = "compact") -> Field:
    """Spectral inverse of the discrete Laplacian.

    The source mean (and any other component in the operator's null space) is
    discarded and the returned solution has zero mean.
    """
    if f.channels != 1:
        raise ShapeError("solve_poisson expects a single-channel source")
    g = f.grid
    lam = laplacian_symbol(g, stencil)
    fh = _rfft(f.data)
    null = np.abs(lam) < 1e-12 * np.max(np.abs(lam))
    ph = np.where(null, 0.0, fh / np.where(null, 1.0, lam))
    return Field(g, _irfft(ph, g))


def _project(ustar, grid, dt, rho):
    div = ddx(ustar[0], grid.dx) + ddy(ustar[1], grid.dy)
    p = solve_poisson(Field(grid, (rho / dt) * div), stencil="wide").data[0]
    u = ustar[0] - (dt / rho) * ddx(p, grid.dx)
    v = ustar[1] - (dt / rho) * ddy(p, grid.dy)
    return np.stack([u, v]), p


def step_ins_projection(u: Field, v: Field, p_prev: Field | None, params: PdeParams,
                        convection: str = "central", div_tol: float = 1e-8,
                        input_div_tol: float | None = 1e-3):
    """Chorin projection step returning ``(u, v, p)`` at ``t + dt``.

    The tentative velocity is one IMEX-RK3 step of viscous vector Burgers. The
    pressure equation uses the wide Laplacian ``div(grad)``, which makes the
    corrected velocity divergence-free to rounding under central stencils.
    ``p_prev`` is not needed by this non-incremental scheme and is only
    shape-checked.
    """
    g = u.grid
    if u.channels != 1 or v.channels != 1 or v.grid != g:
        raise ShapeError("u and v must be single-channel fields on one grid")
    if p_prev is not None and (p_prev.grid != g or p_prev.channels != 1):
        raise ShapeError("p_prev must be a single-channel field on the velocity grid")
    vel = np.concatenate([u.data, v.data])
    if input_div_tol is not None:
        d0 = np.max(np.abs(ddx(vel[0], g.dx) + ddy(vel[1], g.dy)))
        if d0 > input_div_tol:
            raise ValueError(f"input velocity divergence {d0:.3g} exceeds {input_div_tol:g}")
    _check_nl_cfl(vel, g, params.dt, True)
    ustar = _imexrk3(vel, g, params, True, convection)
    new, p = _project(ustar, g, params.dt, params.rho)
    div = np.max(np.abs(ddx(new[0], g.dx) + ddy(new[1], g.dy)))
    if not np.isfinite(div) or div > div_tol:
        raise InstabilityError(f"projected divergence {div:.3g} above tolerance {div_tol:g}")
    return Field(g, new[0]), Field(g, new[1]), Field(g, p)


# -- integration ---------------------------------------------------------------------

def _ins_stepper(state: Field, params: PdeParams, **kw) -> Field:
    u, v, p = step_ins_projection(state.channel(0), state.channel(1), state.channel(2), params, **kw)
    return Field(state.grid, np.concatenate([u.data, v.data, p.data]))


def stepper_for(variant: str, **kw) -> Callable[[Field, PdeParams], Field]:
    """Map a variant name to a ``(Field, PdeParams) -> Field`` stepper."""
    table = {
        "linconv": step_linear_convection,
        "diffusion": step_diffusion_cn,
        "diffusion_vec": step_diffusion_cn,
        "convdiff": step_convdiff_imex,
        "nlconv": lambda f, p: step_inviscid_burgers(f, p, False, **kw),
        "nlconv_vec": lambda f, p: step_inviscid_burgers(f, p, True, **kw),
        "burgers_scalar": lambda f, p: step_burgers_imexrk3(f, p, False, **kw),
        "burgers_vec": lambda f, p: step_burgers_imexrk3(f, p, True, **kw),
        "ins": lambda f, p: _ins_stepper(f, p, **kw),
    }
    if variant not in table:
        raise ValueError(f"variant {variant!r} has no time stepper")
    return table[variant]


def integrate(ic: Field, params: PdeParams, n_steps: int, stepper=None) -> Trajectory:
    """Run ``n_steps`` steps from ``ic``; the returned trajectory includes ``ic``.

    Raises :class:`DivergenceError` carrying the finite prefix if the state
    stops being finite.
    """
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    step = stepper or stepper_for(params.variant)
    frames = [ic.data]
    state = ic
    for i in range(n_steps):
        try:
            with np.errstate(all="ignore"):
                state = step(state, params)
        except (NonFiniteError, InstabilityError) as exc:
            raise DivergenceError(i + 1, Trajectory(ic.grid, np.stack(frames), params)) from exc
        frames.append(state.data)
    return Trajectory(ic.grid, np.stack(frames), params)
