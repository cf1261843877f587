"""Composition of frozen foundation blocks through a trainable aggregator.

The aggregator is a pointwise MLP over the concatenated block embeddings.  It
is trained on a data term (increment MAE) plus a physics term, the mean
absolute residual of the discretised target PDE along short predicted
rollouts.  For incompressible flow the Poisson block supplies pressure and
the x/y gradients of its embedding; the aggregator emits a stream function
whose discrete curl is the velocity increment, which keeps predictions
divergence-free under the central stencils.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .datagen import Dataset
from .field import Field, Grid, ddx, ddy, lap5
from .neuralop import FnoBlock, load_block, save_block
from .solvers import (
    CflError,
    PdeParams,
    Trajectory,
    solve_poisson,
    step_diffusion_cn,
    step_inviscid_burgers,
    step_linear_convection,
)

__all__ = [
    "ROUTING",
    "AGGREGATOR_WIDTHS",
    "RoutingError",
    "FrozenWeightsModified",
    "TargetPde",
    "Aggregator",
    "CompNoModel",
    "BlockStepper",
    "AggregatorTrainConfig",
    "TrainResult",
    "aggregate_step",
    "physics_residual",
    "residual_tensor",
    "closure_residual_convdiff",
    "closure_residual_burgers",
    "train_aggregator",
    "rollout",
    "RolloutResult",
    "evaluate",
    "foundation_residual",
    "benchmark_inference",
    "save_model",
    "load_model",
]

log = logging.getLogger(__name__)

# Which foundation blocks each target may compose, in feature order.
ROUTING = {
    "convdiff": ("linconv", "diffusion"),
    "burgers_scalar": ("nlconv_scalar", "diffusion"),
    "burgers_vec": ("nlconv_vec", "diffusion_vec"),
    "ins": ("nlconv_vec", "diffusion_vec", "poisson"),
}
# Hidden widths of the depth-3 aggregator that land on the 41K/75K/75K/140K budgets
# with 128-channel embeddings (INS uses the one-channel stream-function head).
AGGREGATOR_WIDTHS = {"convdiff": 111, "burgers_scalar": 173, "burgers_vec": 173, "ins": 172}


class RoutingError(ValueError):
    pass


class FrozenWeightsModified(RuntimeError):
    pass


@dataclass(frozen=True)
class TargetPde:
    variant: str
    rho: float = 1.0

    def __post_init__(self):
        if self.variant not in ROUTING:
            raise RoutingError(f"no composition is defined for {self.variant!r}")

    @property
    def routing(self) -> tuple[str, ...]:
        return ROUTING[self.variant]

    @property
    def state_channels(self) -> int:
        return {"convdiff": 1, "burgers_scalar": 1, "burgers_vec": 2, "ins": 3}[self.variant]

    @property
    def velocity_channels(self) -> int:
        return 2 if self.variant == "ins" else self.state_channels


# -- aggregator --------------------------------------------------------------------------

@dataclass
class Aggregator:
    """Depth-3 pointwise MLP ``in -> width -> width -> out`` with GELU."""

    weights: dict[str, np.ndarray]
    stats: dict[str, np.ndarray]
    _tensors: dict = dc_field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def create(cls, in_channels: int, out_channels: int, width: int, seed: int = 0,
               dtype=np.float32) -> "Aggregator":
        rng = np.random.default_rng(seed)
        w = {}
        for i, (o, n) in enumerate([(width, in_channels), (width, width)]):
            bound = 1 / math.sqrt(n)
            w[f"l{i}.w"] = rng.uniform(-bound, bound, (o, n))
            w[f"l{i}.b"] = rng.uniform(-bound, bound, o)
        w["l2.w"] = np.zeros((out_channels, width))
        w["l2.b"] = np.zeros(out_channels)
        stats = {"feat_mean": np.zeros(in_channels), "feat_std": np.ones(in_channels),
                 "out_std": np.ones(out_channels)}
        return cls({k: v.astype(dtype) for k, v in w.items()}, stats)

    @property
    def in_channels(self) -> int:
        return self.weights["l0.w"].shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights["l2.w"].shape[0]

    @property
    def width(self) -> int:
        return self.weights["l0.w"].shape[0]

    @property
    def dtype(self):
        return self.weights["l0.w"].dtype

    def count_params(self) -> int:
        return sum(a.size for a in self.weights.values())

    def tensors(self) -> dict[str, ad.Tensor]:
        if not self._tensors or any(t.value is not self.weights[n] for n, t in self._tensors.items()):
            self._tensors = {n: ad.Tensor(a, requires_grad=True) for n, a in self.weights.items()}
        return self._tensors

    def normalize(self, feats):
        feats = ad.as_tensor(feats)
        dt = feats.value.dtype
        mean = np.broadcast_to(self.stats["feat_mean"].astype(dt)[None, :, None, None], feats.shape)
        inv = np.broadcast_to((1 / self.stats["feat_std"]).astype(dt)[None, :, None, None], feats.shape)
        return ad.mul(ad.sub(feats, ad.Tensor(mean)), ad.Tensor(inv))

    def core(self, normed, weights=None):
        """MLP on already-normalised features, rescaled to physical output units."""
        w = weights or self.tensors()
        h = ad.gelu(ad.channel_linear(normed, w["l0.w"], w["l0.b"]))
        h = ad.gelu(ad.channel_linear(h, w["l1.w"], w["l1.b"]))
        y = ad.channel_linear(h, w["l2.w"], w["l2.b"])
        scale = np.broadcast_to(self.stats["out_std"].astype(y.value.dtype)[None, :, None, None], y.shape)
        return ad.mul(y, ad.Tensor(scale))

    def forward(self, feats, weights=None):
        return self.core(self.normalize(feats), weights)


# -- the composed model ------------------------------------------------------------------

def _weights_hash(weights: dict[str, np.ndarray]) -> str:
    return hashlib.sha256(ad.checkpoint_bytes(weights)).hexdigest()


def _const(values: np.ndarray, shape, dtype) -> ad.Tensor:
    """Per-sample scalars broadcast over ``[B, C, H, W]``."""
    return ad.Tensor(np.broadcast_to(np.asarray(values, dtype=dtype)[:, None, None, None], shape))


@dataclass
class CompNoModel:
    blocks: list[FnoBlock]
    aggregator: Aggregator
    target: TargetPde
    lambda_data: float = 1.0
    lambda_physics: float = 0.1
    include_state: bool = False
    head: str = "stream"
    block_skip: bool = False

    @classmethod
    def build(cls, blocks: Sequence[FnoBlock], target: TargetPde | str, width: int | None = None,
              seed: int = 0, include_state: bool = False, head: str = "stream",
              lambda_data: float = 1.0, lambda_physics: float = 0.1,
              block_skip: bool | None = None) -> "CompNoModel":
        """Validate the routing, freeze the blocks and create a fresh aggregator.

        With ``block_skip`` (the default) the step adds the frozen blocks' own
        increments and the MLP learns only the correction on top of their sum.
        For INS that sum ``w`` is made divergence-free first: the Poisson block
        turns ``-curl(w)`` into a stream function, whose central-difference
        curl is the skip increment.
        """
        target = TargetPde(target) if isinstance(target, str) else target
        ops = tuple(b.config.operator_id for b in blocks)
        if ops != target.routing:
            raise RoutingError(f"{target.variant} composes {target.routing}, got {ops}")
        if len({b.config.width for b in blocks}) != 1:
            raise RoutingError("all routed blocks must share one embedding width")
        if head not in ("stream", "direct"):
            raise ValueError("head must be 'stream' or 'direct'")
        if block_skip is None:
            block_skip = True
        if block_skip and target.variant == "ins" and head != "stream":
            raise ValueError("the ins block skip needs the stream head")
        for b in blocks:
            b.freeze()
        d = blocks[0].config.width
        n_in = d * len(blocks) + (2 * d if target.variant == "ins" else 0)
        if include_state:
            n_in += target.velocity_channels
        n_out = 1 if target.variant == "ins" and head == "stream" else target.velocity_channels
        width = width or AGGREGATOR_WIDTHS[target.variant]
        agg = Aggregator.create(n_in, n_out, width, seed, dtype=blocks[0].dtype)
        return cls(list(blocks), agg, target, lambda_data, lambda_physics, include_state, head, block_skip)

    @property
    def dtype(self):
        return self.aggregator.dtype

    def count_params(self) -> int:
        return self.aggregator.count_params() + sum(
            0 if b.frozen else sum(a.size for a in b.weights.values()) for b in self.blocks)

    def block_hashes(self) -> list[str]:
        return [b.weight_hash() for b in self.blocks]

    def check_state(self, shape):
        if len(shape) != 4 or shape[1] != self.target.state_channels:
            raise ValueError(f"{self.target.variant} state needs {self.target.state_channels} channels, "
                             f"got shape {tuple(shape)}")

    def features(self, states, params: Sequence[PdeParams], grid: Grid):
        """Concatenated embeddings ``[B, F, H, W]``, the INS block pressure and the skip increment.

        The last two are ``None`` when they do not apply.
        """
        states = ad.as_tensor(states)
        self.check_state(states.shape)
        nv = self.target.velocity_channels
        vel = ad.slice_channels(states, 0, nv) if states.shape[1] != nv else states
        embs, pressure, base = [], None, None
        if self.target.variant == "ins":
            conv, diff, pois = self.blocks
            hc, sc = conv.hidden(vel, _gammas(conv, params), grid)
            hd, sd = diff.hidden(vel, _gammas(diff, params), grid)
            w = ad.add(conv.project(hc, sc), diff.project(hd, sd))
            tilde = ad.add(vel, w)
            u, v = ad.slice_channels(tilde, 0, 1), ad.slice_channels(tilde, 1, 2)
            div = ad.add(ad.stencil_apply(u, "dx", grid.dx, grid.dy), ad.stencil_apply(v, "dy", grid.dx, grid.dy))
            coef = np.array([p.rho / p.dt for p in params])
            source = ad.mul(div, _const(coef, div.shape, div.value.dtype))
            hp, sp = pois.hidden(source, None, grid)
            pressure = pois.project(hp, sp)
            embs = [hc, hd, hp, ad.stencil_apply(hp, "dx", grid.dx, grid.dy),
                    ad.stencil_apply(hp, "dy", grid.dx, grid.dy)]
            if self.block_skip:
                wu, wv = ad.slice_channels(w, 0, 1), ad.slice_channels(w, 1, 2)
                neg_curl = ad.sub(ad.stencil_apply(wu, "dy", grid.dx, grid.dy),
                                  ad.stencil_apply(wv, "dx", grid.dx, grid.dy))
                psi = pois.forward(neg_curl, None, grid)
                base = self._curl(psi, grid)
        else:
            for b in self.blocks:
                h, sc = b.hidden(vel, _gammas(b, params), grid)
                embs.append(h)
                if self.block_skip:
                    inc = b.project(h, sc)
                    base = inc if base is None else ad.add(base, inc)
        if self.include_state:
            embs.append(vel)
        return ad.concat_channels(embs), pressure, base

    @staticmethod
    def _curl(psi, grid: Grid):
        du = ad.stencil_apply(psi, "dy", grid.dx, grid.dy)
        dv = ad.scalar_mul(ad.stencil_apply(psi, "dx", grid.dx, grid.dy), -1.0)
        return ad.concat_channels([du, dv])

    def increment(self, out, grid: Grid, base=None):
        """Map aggregator output (plus the skip increment, if any) to a velocity increment."""
        if self.target.variant == "ins" and self.head == "stream":
            out = self._curl(out, grid)
        return out if base is None else ad.add(out, ad.as_tensor(base))

    def step(self, states, params: Sequence[PdeParams], grid: Grid, weights=None):
        """One step ``u_{t+1} = u_t + A(eps)``; returns ``(next_state, increment, pressure)``."""
        states = ad.as_tensor(states)
        feats, pressure, base = self.features(states, params, grid)
        delta = self.increment(self.aggregator.forward(feats, weights), grid, base)
        nv = self.target.velocity_channels
        if self.target.variant == "ins":
            vel = ad.add(ad.slice_channels(states, 0, nv), delta)
            nxt = ad.concat_channels([vel, pressure])
        else:
            nxt = ad.add(states, delta)
        return nxt, delta, pressure


def _gammas(block: FnoBlock, params: Sequence[PdeParams]) -> np.ndarray:
    return np.stack([block.gamma_vector(p) for p in params]).reshape(len(params), -1)


class BlockStepper:
    """Adapter so a single (monolithic) block can be rolled out like a model."""

    def __init__(self, block: FnoBlock):
        self.block = block

    @property
    def dtype(self):
        return self.block.dtype

    def check_state(self, shape):
        if shape[1] != self.block.config.channels:
            raise ValueError(f"block takes {self.block.config.channels} channels")

    def step(self, states, params, grid, weights=None):
        states = ad.as_tensor(states)
        delta = self.block.forward(states, _gammas(self.block, params), grid, weights)
        return ad.add(states, delta), delta, None


def aggregate_step(model: CompNoModel, state: Field, params: PdeParams):
    """Increment for one state; for INS also the pressure from the Poisson block."""
    x = state.data[None].astype(model.dtype)
    _, delta, pressure = model.step(x, [params], state.grid)
    p = None if pressure is None else Field(state.grid, pressure.value[0].astype(float))
    return Field(state.grid, delta.value[0].astype(float)), p


# -- physics residual --------------------------------------------------------------------

def _grad_sum(a, grid):
    return ad.add(ad.stencil_apply(a, "dx", grid.dx, grid.dy), ad.stencil_apply(a, "dy", grid.dx, grid.dy))


def _advect(a, b, grid):
    """``(a . grad) b`` with central stencils; scalars use ``a (b_x + b_y)``."""
    C = a.shape[1]
    if C == 1:
        return ad.mul(a, _grad_sum(b, grid))
    ax, ay = ad.slice_channels(a, 0, 1), ad.slice_channels(a, 1, 2)
    parts = []
    for c in range(C):
        bc = ad.slice_channels(b, c, c + 1)
        parts.append(ad.add(ad.mul(ax, ad.stencil_apply(bc, "dx", grid.dx, grid.dy)),
                            ad.mul(ay, ad.stencil_apply(bc, "dy", grid.dx, grid.dy))))
    return ad.concat_channels(parts)


def residual_tensor(frames: Sequence, params: Sequence[PdeParams], target: TargetPde, grid: Grid):
    """Differentiable mean |residual| over a window of frames ``[B, C, H, W]``.

    Each consecutive pair contributes ``(u_{t+1} - u_t)/dt + N(u_t) - nu lap(u_t)``
    with central first derivatives and the 5-point Laplacian; INS adds
    ``grad(p_{t+1})/rho`` and the mean |div u| of the later frames.
    """
    if len(frames) < 2:
        raise ValueError("the physics residual needs at least two frames")
    frames = [ad.as_tensor(f) for f in frames]
    shape = frames[0].shape
    dtype = frames[0].value.dtype
    nv = target.velocity_channels
    inv_dt = np.array([1 / p.dt for p in params])
    total = None
    n_terms = 0
    for prev, nxt in zip(frames[:-1], frames[1:]):
        u0 = ad.slice_channels(prev, 0, nv) if shape[1] != nv else prev
        u1 = ad.slice_channels(nxt, 0, nv) if shape[1] != nv else nxt
        vshape = u0.shape
        r = ad.mul(ad.sub(u1, u0), _const(inv_dt, vshape, dtype))
        nu = np.array([p.nu for p in params])
        lap = ad.mul(ad.stencil_apply(u0, "lap", grid.dx, grid.dy), _const(nu, vshape, dtype))
        if target.variant == "convdiff":
            beta = np.array([p.beta for p in params])
            r = ad.add(r, ad.mul(_grad_sum(u0, grid), _const(beta, vshape, dtype)))
        else:
            r = ad.add(r, _advect(u0, u0, grid))
        r = ad.sub(r, lap)
        if target.variant == "ins":
            p1 = ad.slice_channels(nxt, nv, nv + 1)
            inv_rho = np.array([1 / p.rho for p in params])
            gp = ad.concat_channels([ad.stencil_apply(p1, "dx", grid.dx, grid.dy),
                                     ad.stencil_apply(p1, "dy", grid.dx, grid.dy)])
            r = ad.add(r, ad.mul(gp, _const(inv_rho, vshape, dtype)))
        term = ad.mean_abs(r)
        if target.variant == "ins":
            ux, uy = ad.slice_channels(u1, 0, 1), ad.slice_channels(u1, 1, 2)
            div = ad.add(ad.stencil_apply(ux, "dx", grid.dx, grid.dy), ad.stencil_apply(uy, "dy", grid.dx, grid.dy))
            term = ad.add(term, ad.mean_abs(div))
        total = term if total is None else ad.add(total, term)
        n_terms += 1
    return ad.scalar_mul(total, 1.0 / n_terms)


def physics_residual(trajectory: Trajectory, target: TargetPde | str) -> float:
    """Mean absolute discretised residual of ``target`` along a trajectory."""
    target = TargetPde(target) if isinstance(target, str) else target
    data = np.asarray(trajectory.data, dtype=float)
    if not np.all(np.isfinite(data)):
        raise ValueError("trajectory contains non-finite values")
    frames = [ad.Tensor(f[None]) for f in data]
    return float(residual_tensor(frames, [trajectory.params], target, trajectory.grid).value)


# -- closure diagnostics -----------------------------------------------------------------

def _check_pair(u: Field, v: Field, channels: tuple[int, ...]):
    if u.grid != v.grid or u.data.shape != v.data.shape:
        raise ValueError(f"fields differ: {u.data.shape} on {u.grid} vs {v.data.shape} on {v.grid}")
    if u.channels not in channels:
        raise ValueError(f"expected {channels} channels, got {u.channels}")


def _advect_np(a, b, g):
    if a.shape[0] == 1:
        return a * (ddx(b, g.dx) + ddy(b, g.dy))
    return np.concatenate([a[:1] * ddx(b[c : c + 1], g.dx) + a[1:2] * ddy(b[c : c + 1], g.dy)
                           for c in range(b.shape[0])])


def closure_residual_convdiff(u_conv: Field, v_diff: Field, alpha1: float, alpha2: float,
                              params: PdeParams) -> Field:
    """Cross term ``alpha2 beta grad(v) - alpha1 nu lap(u)`` with grad = d/dx + d/dy."""
    _check_pair(u_conv, v_diff, (1,))
    g = u_conv.grid
    v, u = v_diff.data, u_conv.data
    out = alpha2 * params.beta * (ddx(v, g.dx) + ddy(v, g.dy)) - alpha1 * params.nu * lap5(u, g.dx, g.dy)
    return Field(g, out)


def closure_residual_burgers(u: Field, v: Field, alpha1: float, alpha2: float, params: PdeParams) -> Field:
    """``a1^2 u.grad u + a2^2 v.grad v + a1 a2 (v.grad u + u.grad v) - a1 nu lap u``."""
    _check_pair(u, v, (1, 2))
    g = u.grid
    a, b = u.data, v.data
    out = (alpha1**2 * _advect_np(a, a, g) + alpha2**2 * _advect_np(b, b, g)
           + alpha1 * alpha2 * (_advect_np(b, a, g) + _advect_np(a, b, g))
           - alpha1 * params.nu * lap5(a, g.dx, g.dy))
    return Field(g, out)


def foundation_residual(model: CompNoModel, state: Field, params: PdeParams) -> dict[str, float]:
    """Monitor for the foundation term: MAE of each frozen block against its classical step.

    Not optimised; a large value flags that a block is being used outside the
    regime it was pretrained on.
    """
    out = {}
    nv = model.target.velocity_channels
    vel = Field(state.grid, state.data[:nv])
    for b in model.blocks:
        op = b.config.operator_id
        bp = PdeParams(b.config.task, beta=params.beta, nu=params.nu, rho=params.rho, dt=params.dt)
        try:
            if op == "poisson":
                src = Field(state.grid, (params.rho / params.dt) * (ddx(vel.data[0], vel.grid.dx)
                                                                   + ddy(vel.data[1], vel.grid.dy)))
                ref = solve_poisson(src, stencil="wide").data
                pred = b.forward(src.data[None].astype(b.dtype), None, state.grid).value[0]
            else:
                ref_step = {
                    "linconv": step_linear_convection,
                    "diffusion": step_diffusion_cn,
                    "diffusion_vec": step_diffusion_cn,
                    "nlconv_scalar": lambda f, p: step_inviscid_burgers(f, p, False),
                    "nlconv_vec": lambda f, p: step_inviscid_burgers(f, p, True),
                }[op]
                ref = ref_step(vel, bp).data - vel.data
                pred = b.forward(vel.data[None].astype(b.dtype), b.gamma_vector(bp)[None], state.grid).value[0]
            out[op] = float(np.mean(np.abs(pred - ref)))
        except CflError:
            out[op] = float("nan")
    return out


# -- training ----------------------------------------------------------------------------

@dataclass(frozen=True)
class AggregatorTrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    lr_min: float = 1e-5
    physics_window: int = 4
    physics_batch_size: int = 2
    physics_every: int = 1
    report_windows: int = 4
    chunk: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.physics_window < 1 or self.physics_every < 1:
            raise ValueError("invalid aggregator training configuration")


@dataclass
class TrainResult:
    model: CompNoModel
    curves: dict[str, list[float]]


def _samples(ds: Dataset, split: str = "train"):
    return [(t, s) for t in ds.trajectories if t.split == split for s in range(t.n_time - 1)]


def _cache_features(model: CompNoModel, samples, chunk: int):
    """Embeddings and targets of every teacher-forced pair, grouped by grid."""
    groups: dict[Grid, dict] = {}
    nv = model.target.velocity_channels
    for t, s in samples:
        groups.setdefault(t.grid, {"items": []})["items"].append((t, s))
    for grid, g in groups.items():
        items = g["items"]
        feats, incs, press, bases = [], [], [], []
        for i in range(0, len(items), chunk):
            part = items[i : i + chunk]
            x = np.stack([t.data[s] for t, s in part]).astype(model.dtype)
            f, p, b = model.features(x, [t.params for t, _ in part], grid)
            feats.append(f.value)
            if b is not None:
                bases.append(b.value)
            incs.append(np.stack([t.data[s + 1, :nv] - t.data[s, :nv] for t, s in part]))
            if p is not None:
                press.append(p.value)
        g["feats"] = np.concatenate(feats)
        g["targets"] = np.concatenate(incs).astype(model.dtype)
        g["params"] = [t.params for t, _ in items]
        g["pressure"] = np.concatenate(press) if press else None
        g["base"] = np.concatenate(bases) if bases else None
    return groups


def _fit_aggregator_stats(model: CompNoModel, groups):
    n_f = model.aggregator.in_channels
    s1, s2, n = np.zeros(n_f), np.zeros(n_f), 0
    for g in groups.values():
        feats = g["feats"]
        for i in range(0, len(feats), 16):  # chunked: the INS cache is about a gigabyte in float32
            f = feats[i : i + 16].astype(float)
            s1 += f.sum(axis=(0, 2, 3))
            s2 += (f**2).sum(axis=(0, 2, 3))
            n += f.shape[0] * f.shape[2] * f.shape[3]
    mean = s1 / n
    std = np.sqrt(np.maximum(s2 / n - mean**2, 0))
    model.aggregator.stats["feat_mean"] = mean
    model.aggregator.stats["feat_std"] = np.where(std > 1e-12, std, 1.0)
    targets = np.concatenate([g["targets"] if g["base"] is None else g["targets"] - g["base"]
                              for g in groups.values()]).astype(float)
    if model.target.variant == "ins" and model.head == "stream":
        grid = next(iter(groups))
        curl = ddy(targets[:, 0], grid.dy) - ddx(targets[:, 1], grid.dx)
        psi = np.stack([solve_poisson(Field(grid, c), stencil="wide").data[0] for c in curl])
        model.aggregator.stats["out_std"] = np.array([max(psi.std(), 1e-12)])
    else:
        model.aggregator.stats["out_std"] = np.maximum(targets.std(axis=(0, 2, 3)), 1e-12)
    for g in groups.values():
        g["feats"] -= mean.astype(g["feats"].dtype)[None, :, None, None]
        g["feats"] /= model.aggregator.stats["feat_std"].astype(g["feats"].dtype)[None, :, None, None]


def _window_residual(model: CompNoModel, windows, length: int, weights=None):
    """Physics residual of rollouts of ``length`` steps from true states."""
    grid = windows[0][0].grid
    windows = [(t, s) for t, s in windows if t.grid == grid]
    state = ad.Tensor(np.stack([t.data[s] for t, s in windows]).astype(model.dtype))
    params = [t.params for t, _ in windows]
    frames = [state]
    for _ in range(length):
        state, _, _ = model.step(state, params, grid, weights)
        frames.append(state)
    return residual_tensor(frames, params, model.target, grid)


def train_aggregator(model: CompNoModel, ds: Dataset, cfg: AggregatorTrainConfig = AggregatorTrainConfig(),
                     progress: Callable | None = None) -> TrainResult:
    """Fit the aggregator with ``lambda_data * L_data + lambda_physics * R``.

    ``L_data`` is the teacher-forced increment MAE over cached embeddings; ``R``
    is the physics residual of rollouts ``physics_window`` steps long started
    from training states.  Per-epoch curves of both are returned (``R`` on a
    fixed set of report windows).  Raises :class:`FrozenWeightsModified` if
    any foundation weight changed.
    """
    if ds.task != model.target.variant:
        raise ValueError(f"dataset task {ds.task!r} does not match target {model.target.variant!r}")
    if not all(b.frozen for b in model.blocks):
        raise ValueError("routed blocks must be frozen")
    before = model.block_hashes()
    samples = _samples(ds)
    if not samples:
        raise ValueError("aggregator training needs at least one training pair")
    groups = _cache_features(model, samples, cfg.chunk)
    _fit_aggregator_stats(model, groups)
    agg = model.aggregator
    params = agg.tensors()
    state = ad.AdamState()
    data_rng = np.random.default_rng(cfg.seed)
    phys_rng = np.random.default_rng([cfg.seed, 1])
    L = cfg.physics_window
    windows = [(t, s) for t in ds.trajectories if t.split == "train" for s in range(t.n_time - L)]
    report_rng = np.random.default_rng([cfg.seed, 2])
    report = [windows[i] for i in report_rng.permutation(len(windows))[: cfg.report_windows]] if windows else []
    curves = {"L_data": [], "R": [], "loss": []}
    step_count = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_min + (cfg.lr - cfg.lr_min) * 0.5 * (1 + math.cos(math.pi * epoch / max(cfg.epochs - 1, 1)))
        batches = []
        for grid, g in groups.items():
            order = data_rng.permutation(len(g["feats"]))
            batches += [(grid, order[i : i + cfg.batch_size]) for i in range(0, len(order), cfg.batch_size)]
        batches = [batches[i] for i in data_rng.permutation(len(batches))]
        tot_data, tot_loss, count = 0.0, 0.0, 0
        for grid, idx in batches:
            g = groups[grid]
            out = agg.core(ad.Tensor(g["feats"][idx]))
            delta = model.increment(out, grid, None if g["base"] is None else g["base"][idx])
            l_data = ad.mean_abs(ad.sub(delta, ad.Tensor(g["targets"][idx])))
            loss = ad.scalar_mul(l_data, model.lambda_data)
            use_phys = model.lambda_physics > 0 and windows and step_count % cfg.physics_every == 0
            if use_phys:
                pick = phys_rng.permutation(len(windows))[: cfg.physics_batch_size]
                r = _window_residual(model, [windows[i] for i in pick], L)
                loss = ad.add(loss, ad.scalar_mul(r, model.lambda_physics))
            step_count += 1
            grads = ad.backward(loss, params)
            ad.adam_step(params, grads, state, lr=lr)
            tot_data += float(l_data.value) * len(idx)
            tot_loss += float(loss.value) * len(idx)
            count += len(idx)
        curves["L_data"].append(tot_data / count)
        curves["loss"].append(tot_loss / count)
        curves["R"].append(float(_window_residual(model, report, L).value) if report else float("nan"))
        if progress is not None:
            progress(epoch, {k: v[-1] for k, v in curves.items()})
        if not math.isfinite(curves["loss"][-1]):
            raise FloatingPointError(f"aggregator loss became non-finite in epoch {epoch}")
    after = model.block_hashes()
    if after != before:
        changed = [b.config.operator_id for b, h0, h1 in zip(model.blocks, before, after) if h0 != h1]
        raise FrozenWeightsModified(f"frozen foundation weights changed: {changed}")
    agg._tensors = {}
    return TrainResult(model, curves)


# -- rollout and evaluation ---------------------------------------------------------------

@dataclass
class RolloutResult:
    trajectory: Trajectory
    step_mae: list[float]
    pressure_mae: list[float]
    divergence: list[float]
    failed_step: int | None = None


def _velocity_channels(model) -> int:
    return model.target.velocity_channels if isinstance(model, CompNoModel) else model.block.config.channels


def rollout(model, warmup: np.ndarray, params: PdeParams, T: int, grid: Grid,
            truth: np.ndarray | None = None) -> RolloutResult:
    """Autoregressive rollout of ``T`` steps after ``warmup`` frames ``[T0, C, H, W]``.

    The returned trajectory contains the warmup frames followed by the
    predictions.  With ``truth`` (aligned with the warmup, ``>= T0 + T``
    frames) per-step velocity MAE and pressure MAE are recorded.  A
    non-finite prediction truncates the rollout and sets ``failed_step``.
    """
    warmup = np.asarray(warmup)
    if warmup.ndim != 4 or len(warmup) < 1:
        raise ValueError("warmup must hold at least one frame [T0, C, H, W]")
    model.check_state((1,) + warmup.shape[1:])
    T0 = len(warmup)
    nv = _velocity_channels(model)
    frames = [f.astype(float) for f in warmup]
    state = warmup[-1:].astype(model.dtype)
    maes, pmaes, divs = [], [], []
    failed = None
    for k in range(T):
        nxt, _, _ = model.step(state, [params], grid)
        state = nxt.value
        if not np.all(np.isfinite(state)):
            failed = k + 1
            break
        frame = state[0].astype(float)
        frames.append(frame)
        divs.append(float(np.mean(np.abs(ddx(frame[0], grid.dx) + ddy(frame[1], grid.dy))))
                    if nv == 2 else float("nan"))
        if truth is not None and T0 + k < len(truth):
            ref = truth[T0 + k].astype(float)
            maes.append(float(np.mean(np.abs(frame[:nv] - ref[:nv]))))
            if frame.shape[0] > nv:
                pmaes.append(float(np.mean(np.abs(frame[nv:] - ref[nv:]))))
    traj = Trajectory(grid, np.stack(frames), params)
    return RolloutResult(traj, maes, pmaes, divs, failed)


def evaluate(model, ds: Dataset, T0: int, T: int, split: str = "test",
             target: TargetPde | None = None) -> dict:
    """Rollout metrics averaged over the trajectories of ``split``."""
    trajs = [t for t in ds.trajectories if t.split == split]
    if not trajs:
        raise ValueError(f"dataset has no {split!r} trajectories")
    target = target or getattr(model, "target", None) or TargetPde(ds.task)
    curves, pcurves, dcurves, gt_div, resid = [], [], [], [], []
    for t in trajs:
        if t.n_time < T0 + T:
            raise ValueError(f"trajectory has {t.n_time} frames, protocol needs {T0 + T}")
        res = rollout(model, t.data[:T0], t.params, T, t.grid, truth=t.data)
        if res.failed_step is not None:
            raise FloatingPointError(f"rollout diverged at step {res.failed_step}")
        curves.append(res.step_mae)
        if res.pressure_mae:
            pcurves.append(res.pressure_mae)
        dcurves.append(res.divergence)
        pred = Trajectory(t.grid, res.trajectory.data[T0 - 1 :], t.params)
        resid.append(physics_residual(pred, target))
        if t.channels >= 2:
            d = t.data[T0 : T0 + T].astype(float)
            gt_div.append([float(np.mean(np.abs(ddx(f[0], t.grid.dx) + ddy(f[1], t.grid.dy)))) for f in d])
    step_mae = np.mean(curves, axis=0)
    out = {
        "step_mae": step_mae.tolist(),
        "final_mae": float(step_mae[-1]),
        "mean_mae": float(step_mae.mean()),
        "physics_residual": float(np.mean(resid)),
    }
    if pcurves:
        out["pressure_mae"] = np.mean(pcurves, axis=0).tolist()
    if gt_div:
        out["divergence"] = np.mean(dcurves, axis=0).tolist()
        out["gt_divergence"] = np.mean(gt_div, axis=0).tolist()
    return out


def benchmark_inference(model, solver_step: Callable[[Field, PdeParams], Field], grid: Grid,
                        params: PdeParams, n_steps: int = 5, state: np.ndarray | None = None) -> dict:
    """Median per-step wall time of the model and the classical solver on one state."""
    if state is None:
        rng = np.random.default_rng(0)
        state = rng.normal(size=(model.target.state_channels,) + grid.shape) * 0.1
    x = state[None].astype(model.dtype)
    model.step(x, [params], grid)  # warm-up, discarded
    t_model = []
    for _ in range(n_steps):
        t0 = time.perf_counter()
        model.step(x, [params], grid)
        t_model.append(time.perf_counter() - t0)
    f = Field(grid, state)
    solver_step(f, params)
    t_solver = []
    for _ in range(n_steps):
        t0 = time.perf_counter()
        solver_step(f, params)
        t_solver.append(time.perf_counter() - t0)
    tm, ts = float(np.median(t_model)), float(np.median(t_solver))
    return {"t_model": tm, "t_solver": ts, "speedup": ts / tm}


# -- model bundle -------------------------------------------------------------------------

def save_model(model: CompNoModel, directory, extra_meta: dict | None = None) -> Path:
    """Write block checkpoints, the aggregator checkpoint and ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for i, b in enumerate(model.blocks):
        name = f"block{i}_{b.config.operator_id}.cnow"
        save_block(b, d / name, extra_meta)
        names.append(name)
    tensors = dict(model.aggregator.weights)
    tensors.update({f"stats.{k}": np.asarray(v, dtype=float) for k, v in model.aggregator.stats.items()})
    ad.save_checkpoint(d / "aggregator.cnow", tensors, {"kind": "aggregator"} | (extra_meta or {}))
    manifest = {
        "target": model.target.variant,
        "rho": model.target.rho,
        "routing": list(model.target.routing),
        "blocks": names,
        "block_hashes": model.block_hashes(),
        "lambda_data": model.lambda_data,
        "lambda_physics": model.lambda_physics,
        "include_state": model.include_state,
        "head": model.head,
        "block_skip": model.block_skip,
        "normalization": "stats.* tensors inside each checkpoint",
    } | (extra_meta or {})
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_model(directory) -> CompNoModel:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    blocks = [load_block(d / n).freeze() for n in manifest["blocks"]]
    tensors, meta = ad.load_checkpoint(d / "aggregator.cnow")
    if meta.get("kind") != "aggregator":
        raise ValueError("aggregator.cnow is not an aggregator checkpoint")
    stats = {k[6:]: v for k, v in tensors.items() if k.startswith("stats.")}
    weights = {k: v for k, v in tensors.items() if not k.startswith("stats.")}
    target = TargetPde(manifest["target"], manifest.get("rho", 1.0))
    model = CompNoModel(blocks, Aggregator(weights, stats), target, manifest["lambda_data"],
                        manifest["lambda_physics"], manifest["include_state"], manifest["head"],
                        manifest.get("block_skip", False))
    if model.block_hashes() != manifest["block_hashes"]:
        raise FrozenWeightsModified("block checkpoints do not match the manifest hashes")
    return model
