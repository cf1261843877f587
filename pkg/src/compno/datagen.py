"""Dataset assembly, splitting and the CNO2 binary format.

A dataset holds raw states ``u_t`` for one task; increments are derived by
the training code.  Generation is deterministic: every trajectory draws its
initial condition from a seed derived from ``(config.seed, index)``.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .binio import FormatError, Reader, VersionError, array_bytes, pack
from .field import Field, Grid
from .solvers import (
    VARIANTS,
    CflError,
    DivergenceError,
    PdeParams,
    Trajectory,
    cfl_dt,
    ic_isotropic,
    ic_shear_layer,
    ic_taylor_green,
    integrate,
    solve_poisson,
    stepper_for,
)

__all__ = [
    "DatagenConfig",
    "Dataset",
    "generate",
    "write_dataset",
    "read_dataset",
    "dataset_bytes",
    "parse_dataset",
    "n_state_channels",
]

log = logging.getLogger(__name__)

MAGIC = b"CNO2"
VERSION = 1
SPLITS = ("train", "test")
_BETA_TASKS = {"linconv", "convdiff"}
_NU_TASKS = {"diffusion", "diffusion_vec", "convdiff", "burgers_scalar", "burgers_vec", "ins"}
_VECTOR_TASKS = {"diffusion_vec", "nlconv_vec", "burgers_vec"}
_NONLINEAR = {"nlconv", "nlconv_vec", "burgers_scalar", "burgers_vec", "ins"}


def n_state_channels(task: str) -> int:
    if task == "ins":
        return 3
    return 2 if task in _VECTOR_TASKS else 1


@dataclass
class DatagenConfig:
    """Everything that determines a generated dataset.

    Parameter grids only apply to tasks that use them: ``betas`` for linear
    convection and convection-diffusion, ``nus`` for anything viscous.  Each
    parameter combination is paired with ``n_ic`` initial conditions.
    """

    task: str = "diffusion"
    n_ic: int = 2
    betas: tuple[float, ...] = (0.5, 1.0, 1.5, 2.0, 2.5)
    nus: tuple[float, ...] = (1.0, 0.1, 0.01, 0.001)
    rho: float = 1.0
    dt: float = 0.01
    n_steps: int = 20
    nx: int = 128
    fine_nx: int = 256
    fine_fraction: float = 0.2
    test_fraction: float = 0.0
    length: float = 2 * np.pi
    ic: str = "isotropic"
    amplitude: float = 1.0
    peak_wavenumber: float = 3.0
    on_cfl: str = "skip"
    cfl_safety: float = 0.9
    seed: int = 0
    convection: str = ""  # "", "upwind" or "central"; empty keeps each solver's default

    def __post_init__(self):
        if self.task not in VARIANTS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.n_ic < 0 or self.n_steps < 0:
            raise ValueError("n_ic and n_steps must be non-negative")
        if not 0 <= self.fine_fraction <= 1 or not 0 <= self.test_fraction <= 1:
            raise ValueError("fractions must lie in [0, 1]")
        if self.on_cfl not in ("skip", "reduce"):
            raise ValueError("on_cfl must be 'skip' or 'reduce'")
        if self.convection not in ("", "upwind", "central"):
            raise ValueError(f"unknown convection scheme {self.convection!r}")
        if self.convection and self.task not in _NONLINEAR:
            raise ValueError(f"task {self.task!r} has no convection scheme choice")
        if self.ic not in ("isotropic", "taylor_green", "shear"):
            raise ValueError(f"unknown ic {self.ic!r}")
        self.betas = tuple(float(b) for b in self.betas)
        self.nus = tuple(float(n) for n in self.nus)

    def combos(self) -> list[tuple[float, float]]:
        """(beta, nu) pairs this task is generated over."""
        betas = self.betas if self.task in _BETA_TASKS else (0.0,)
        nus = self.nus if self.task in _NU_TASKS else (0.0,)
        return list(itertools.product(betas, nus))


@dataclass
class Dataset:
    task: str
    trajectories: list[Trajectory] = dc_field(default_factory=list)
    skipped: list[dict] = dc_field(default_factory=list)

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __eq__(self, other):
        if not isinstance(other, Dataset) or self.task != other.task or len(self) != len(other):
            return NotImplemented if not isinstance(other, Dataset) else False
        return all(_same_traj(a, b) for a, b in zip(self.trajectories, other.trajectories))

    def split(self, tag: str) -> "Dataset":
        return Dataset(self.task, [t for t in self.trajectories if t.split == tag])

    def at_resolution(self, shape: tuple[int, int]) -> "Dataset":
        return Dataset(self.task, [t for t in self.trajectories if t.grid.shape == shape])

    def resolutions(self) -> dict[tuple[int, int], int]:
        out: dict[tuple[int, int], int] = {}
        for t in self.trajectories:
            out[t.grid.shape] = out.get(t.grid.shape, 0) + 1
        return out


def _same_traj(a: Trajectory, b: Trajectory) -> bool:
    return (
        a.grid == b.grid
        and a.split == b.split
        and a.params == b.params
        and a.data.dtype == b.data.dtype
        and np.array_equal(a.data, b.data)
    )


def _traj_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _initial_state(cfg: DatagenConfig, grid: Grid, seed: int) -> Field:
    ch = n_state_channels(cfg.task)
    a = cfg.amplitude
    if cfg.ic == "taylor_green":
        if ch == 1:
            raise ValueError("taylor_green needs a vector task")
        u, v, p = ic_taylor_green(grid, amplitude=a, rho=cfg.rho)
        comps = [u.data, v.data, p.data][:ch]
        return Field(grid, np.concatenate(comps))
    if cfg.ic == "shear":
        if ch == 1:
            raise ValueError("shear needs a vector task")
        u, v = ic_shear_layer(grid, seed=seed)
        comps = [a * u.data, a * v.data, np.zeros_like(u.data)][:ch]
        return Field(grid, np.concatenate(comps))
    if ch == 1:
        return Field(grid, a * ic_isotropic(grid, seed, cfg.peak_wavenumber).data)
    u, v = ic_isotropic(grid, seed, cfg.peak_wavenumber, components=2)
    comps = [a * u.data, a * v.data, np.zeros_like(u.data)][:ch]
    return Field(grid, np.concatenate(comps))


def _poisson_pair(cfg: DatagenConfig, grid: Grid, seed: int) -> np.ndarray:
    f = ic_isotropic(grid, seed, cfg.peak_wavenumber)
    f = f.with_data(cfg.amplitude * f.data)
    p = solve_poisson(f, stencil="wide")
    return np.stack([f.data, p.data])


def _assign(n: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    k = int(round(fraction * n))
    if k:
        mask[rng.permutation(n)[:k]] = True
    return mask


def generate(cfg: DatagenConfig) -> Dataset:
    """Build the dataset described by ``cfg``.

    Combinations that violate the explicit CFL limit are skipped (and listed
    in ``Dataset.skipped``) or run with a reduced step, per ``cfg.on_cfl``.
    INS trajectories take one discarded projection step first, so frame 0
    already carries a consistent pressure.
    """
    plan = [(b, nu, i) for b, nu in cfg.combos() for i in range(cfg.n_ic)]
    rng = np.random.default_rng(cfg.seed)
    fine = _assign(len(plan), cfg.fine_fraction, rng)
    test = _assign(len(plan), cfg.test_fraction, rng)
    coarse_grid = Grid(cfg.nx, cfg.nx, cfg.length, cfg.length)
    fine_grid = Grid(cfg.fine_nx, cfg.fine_nx, cfg.length, cfg.length) if fine.any() else None
    ds = Dataset(cfg.task)
    for k, (beta, nu, _) in enumerate(plan):
        grid = fine_grid if fine[k] else coarse_grid
        seed = _traj_seed(cfg.seed, k)
        params = PdeParams(cfg.task, beta=beta, nu=nu, rho=cfg.rho, dt=cfg.dt)
        split = "test" if test[k] else "train"
        if cfg.task == "poisson":
            data = _poisson_pair(cfg, grid, seed)
            ds.trajectories.append(Trajectory(grid, data.astype(np.float32), params, split))
            continue
        ic = _initial_state(cfg, grid, seed)
        limit = cfl_dt(cfg.task, ic.data, grid, beta)
        if params.dt > limit:
            info = {"index": k, "beta": beta, "nu": nu, "nx": grid.nx, "dt": params.dt, "dt_max": limit}
            if cfg.on_cfl == "skip":
                log.warning("skipping beta=%g nu=%g nx=%d: dt=%g exceeds CFL limit %g",
                            beta, nu, grid.nx, params.dt, limit)
                ds.skipped.append(info | {"reason": "cfl"})
                continue
            params = params.with_dt(cfg.cfl_safety * limit)
            log.info("reduced dt to %g for beta=%g nu=%g nx=%d", params.dt, beta, nu, grid.nx)
        spin = 1 if cfg.task == "ins" else 0
        try:
            kw = {"convection": cfg.convection} if cfg.convection else {}
            traj = integrate(ic, params, cfg.n_steps + spin, stepper_for(cfg.task, **kw))
        except (DivergenceError, CflError) as exc:
            log.warning("trajectory %d failed: %s", k, exc)
            ds.skipped.append({"index": k, "beta": beta, "nu": nu, "nx": grid.nx, "reason": str(exc)})
            continue
        data = traj.data[spin:].astype(np.float32)
        ds.trajectories.append(Trajectory(grid, data, params, split, {"seed": seed}))
    return ds


# -- CNO2 format -------------------------------------------------------------------

def dataset_bytes(ds: Dataset) -> bytes:
    if ds.task not in VARIANTS:
        raise ValueError(f"unknown task {ds.task!r}")
    out = [MAGIC, pack("III", VERSION, VARIANTS.index(ds.task), len(ds))]
    for t in ds.trajectories:
        if t.params.variant != ds.task:
            raise ValueError(f"trajectory variant {t.params.variant!r} differs from dataset task {ds.task!r}")
        nt, nc, ny, nx = t.data.shape
        vec = t.params.vector()
        out.append(pack("IIIIddd", nt, nc, ny, nx, t.grid.lx, t.grid.ly, t.params.dt))
        out.append(pack("I", len(vec)) + array_bytes(vec, "f8"))
        out.append(pack("B", SPLITS.index(t.split)) + bytes(7))
        out.append(array_bytes(t.data, "f4"))
    return b"".join(out)


def parse_dataset(buf: bytes) -> Dataset:
    r = Reader(buf)
    r.expect_magic(MAGIC)
    version = r.u32()
    if version != VERSION:
        raise VersionError(f"dataset version {version} not supported (expected {VERSION})")
    code, n_traj = r.u32(), r.u32()
    if code >= len(VARIANTS):
        raise FormatError(f"unknown task code {code}")
    task = VARIANTS[code]
    trajs = []
    for _ in range(n_traj):
        nt, nc, ny, nx, lx, ly, dt = r.unpack("IIIIddd")
        n_params = r.u32()
        vec = r.array("f8", (n_params,))
        split_code = r.u8()
        r.take(7)
        data = r.array("f4", (nt, nc, ny, nx))
        if split_code >= len(SPLITS):
            raise FormatError(f"bad split code {split_code}")
        if n_params != 3:
            raise FormatError(f"expected 3 parameters, found {n_params}")
        try:
            grid = Grid(nx, ny, lx, ly)
            params = PdeParams(task, beta=vec[0], nu=vec[1], rho=vec[2], dt=dt)
        except ValueError as exc:
            raise FormatError(f"invalid trajectory header: {exc}") from exc
        trajs.append(Trajectory(grid, data, params, SPLITS[split_code]))
    if r.remaining:
        raise FormatError(f"{r.remaining} trailing bytes after last trajectory")
    return Dataset(task, trajs)


def write_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    path.write_bytes(dataset_bytes(ds))
    return path


def read_dataset(path) -> Dataset:
    return parse_dataset(Path(path).read_bytes())
