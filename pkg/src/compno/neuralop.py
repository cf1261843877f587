"""Fourier neural operator blocks: the pretrained foundation library.

A block lifts ``[state, x/lx, y/ly, gamma]`` to ``width`` channels, applies
``n_layers`` Fourier layers ``h <- gelu(W h + b + irfft2(R . rfft2(h)))`` and
projects back with a two-stage pointwise map.  The hidden state after the last
layer is the block's embedding.  Blocks predict increments ``u_{t+1} - u_t``
except the Poisson block, which maps a source directly to a pressure.
"""
from __future__ import annotations

import copy
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .datagen import Dataset, n_state_channels
from .field import Field, Grid

__all__ = [
    "OPERATORS",
    "FnoConfig",
    "FnoBlock",
    "PretrainConfig",
    "PretrainResult",
    "TrainingDiverged",
    "fno_forward",
    "embed",
    "pretrain",
    "count_params",
    "monolithic_config",
    "fourier_resample",
    "increment_pairs",
    "save_block",
    "load_block",
]

log = logging.getLogger(__name__)

# operator id -> (dataset task, state channels, conditioning parameters)
OPERATORS = {
    "linconv": ("linconv", 1, ("beta",)),
    "diffusion": ("diffusion", 1, ("nu",)),
    "nlconv_scalar": ("nlconv", 1, ()),
    "nlconv_vec": ("nlconv_vec", 2, ()),
    "diffusion_vec": ("diffusion_vec", 2, ("nu",)),
    "poisson": ("poisson", 1, ()),
}
_PARAM_INDEX = {"beta": 0, "nu": 1, "rho": 2}


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; ``block`` holds the last finite-loss weights."""

    def __init__(self, epoch: int, block: "FnoBlock", curve: list[float]):
        super().__init__(f"training loss became non-finite in epoch {epoch}")
        self.epoch = epoch
        self.block = block
        self.curve = curve


@dataclass(frozen=True)
class FnoConfig:
    operator_id: str = "diffusion"
    width: int = 128
    modes: int = 12
    n_layers: int = 4
    proj_hidden: int = 128
    task: str = ""
    channels: int = 0
    param_names: tuple[str, ...] | None = None
    out_channels: int = 0
    amplitude_norm: bool | None = None

    def __post_init__(self):
        if self.operator_id in OPERATORS:
            task, ch, names = OPERATORS[self.operator_id]
            object.__setattr__(self, "task", self.task or task)
            object.__setattr__(self, "channels", self.channels or ch)
            if self.param_names is None:
                object.__setattr__(self, "param_names", names)
        elif not self.task or not self.channels:
            raise ValueError(f"operator {self.operator_id!r} needs explicit task and channels")
        if self.param_names is None:
            object.__setattr__(self, "param_names", ())
        object.__setattr__(self, "param_names", tuple(self.param_names))
        if any(n not in _PARAM_INDEX for n in self.param_names):
            raise ValueError(f"unknown conditioning parameter in {self.param_names}")
        if not self.out_channels:
            object.__setattr__(self, "out_channels", self.channels)
        if self.amplitude_norm is None:
            object.__setattr__(self, "amplitude_norm", self.operator_id == "poisson")
        if min(self.width, self.modes, self.n_layers, self.proj_hidden) < 1:
            raise ValueError("width, modes, n_layers and proj_hidden must be positive")

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    @property
    def in_channels(self) -> int:
        return self.channels + 2 + self.n_params

    @property
    def predicts_increment(self) -> bool:
        return self.task != "poisson"

    def param_count(self) -> int:
        """Closed-form trainable count of a block with this configuration."""
        d, k = self.width, self.modes
        lift = self.in_channels * d + d
        layer = 2 * (2 * k) * k * d * d + d * d + d
        proj = d * self.proj_hidden + self.proj_hidden + self.proj_hidden * self.out_channels + self.out_channels
        return lift + self.n_layers * layer + proj


def _init_weights(cfg: FnoConfig, seed: int, dtype) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    d, k = cfg.width, cfg.modes

    def dense(o, i):
        bound = 1.0 / math.sqrt(i)
        return rng.uniform(-bound, bound, (o, i)), rng.uniform(-bound, bound, o)

    w = {}
    w["lift.w"], w["lift.b"] = dense(d, cfg.in_channels)
    for layer in range(cfg.n_layers):
        w[f"layer{layer}.R"] = rng.uniform(0, 1, (2 * k, k, d, d, 2)) / (d * d)
        w[f"layer{layer}.W"], w[f"layer{layer}.b"] = dense(d, d)
    w["proj1.w"], w["proj1.b"] = dense(cfg.proj_hidden, d)
    # zero last stage: an untrained block predicts no change
    w["proj2.w"] = np.zeros((cfg.out_channels, cfg.proj_hidden))
    w["proj2.b"] = np.zeros(cfg.out_channels)
    return {n: a.astype(dtype) for n, a in w.items()}


@dataclass
class FnoBlock:
    config: FnoConfig
    weights: dict[str, np.ndarray]
    stats: dict[str, np.ndarray]
    frozen: bool = False
    _tensors: dict = dc_field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def create(cls, config: FnoConfig, seed: int = 0, dtype=np.float64) -> "FnoBlock":
        stats = {
            "state_mean": np.zeros(config.channels),
            "state_std": np.ones(config.channels),
            "gamma_mean": np.zeros(config.n_params),
            "gamma_std": np.ones(config.n_params),
            "out_std": np.ones(config.out_channels),
        }
        return cls(config, _init_weights(config, seed, dtype), stats)

    @property
    def dtype(self):
        return self.weights["lift.w"].dtype

    def astype(self, dtype) -> "FnoBlock":
        return FnoBlock(self.config, {n: a.astype(dtype) for n, a in self.weights.items()},
                        dict(self.stats), self.frozen)

    def freeze(self) -> "FnoBlock":
        self.frozen = True
        self._tensors = {}
        return self

    def tensors(self) -> dict[str, ad.Tensor]:
        """Weight leaves; they require gradients unless the block is frozen."""
        if not self._tensors or any(t.value is not self.weights[n] for n, t in self._tensors.items()):
            self._tensors = {n: ad.Tensor(a, requires_grad=not self.frozen) for n, a in self.weights.items()}
        return self._tensors

    def weight_hash(self) -> str:
        return hashlib.sha256(ad.checkpoint_bytes(self.weights)).hexdigest()

    def gamma_vector(self, params) -> np.ndarray:
        """Pick this block's conditioning values out of a ``PdeParams``."""
        vec = params.vector()
        return np.array([vec[_PARAM_INDEX[n]] for n in self.config.param_names])

    # -- forward pieces on batches ``[B, C, H, W]`` --------------------------------------

    def _inputs(self, states, gammas, grid: Grid):
        cfg = self.config
        x = ad.as_tensor(states)
        B, C, H, W = x.shape
        if C != cfg.channels:
            raise ValueError(f"{cfg.operator_id} block takes {cfg.channels} state channels, got {C}")
        if (H, W) != grid.shape:
            raise ValueError(f"state {x.shape} does not match grid {grid.shape}")
        if cfg.modes > H // 2 or cfg.modes > W // 2:
            raise ValueError(f"grid {H}x{W} too small for {cfg.modes} modes")
        g = np.zeros((B, 0)) if gammas is None else np.asarray(gammas, dtype=float).reshape(B, -1)
        if g.shape[1] != cfg.n_params:
            raise ValueError(f"{cfg.operator_id} block takes {cfg.n_params} parameters, got {g.shape[1]}")
        dt = self.dtype
        scale = None
        if cfg.amplitude_norm:
            # linear target: normalise each sample by its rms, restore after projection
            rms = np.sqrt(np.mean(np.square(x.value, dtype=float), axis=(1, 2, 3)))
            scale = np.where(rms > 0, rms, 1.0)
            x = ad.mul(x, ad.Tensor(np.broadcast_to((1 / scale)[:, None, None, None], x.shape).astype(dt)))
        mean = self.stats["state_mean"][None, :, None, None]
        std = self.stats["state_std"][None, :, None, None]
        xn = ad.mul(ad.sub(x, ad.Tensor(np.broadcast_to(mean, x.shape).astype(dt))),
                    ad.Tensor(np.broadcast_to(1 / std, x.shape).astype(dt)))
        X, Y = grid.coords()
        extra = [np.broadcast_to(X / grid.lx, (B, 1, H, W)), np.broadcast_to(Y / grid.ly, (B, 1, H, W))]
        gn = (g - self.stats["gamma_mean"]) / self.stats["gamma_std"]
        extra += [np.broadcast_to(gn[:, i, None, None, None], (B, 1, H, W)) for i in range(cfg.n_params)]
        const = ad.Tensor(np.concatenate(extra, axis=1).astype(dt))
        return ad.concat_channels([xn, const]), scale

    def hidden(self, states, gammas, grid: Grid, weights=None):
        """Embedding tensor ``[B, width, H, W]`` plus the per-sample amplitude scale."""
        w = weights or self.tensors()
        h, scale = self._inputs(states, gammas, grid)
        h = ad.channel_linear(h, w["lift.w"], w["lift.b"])
        k = self.config.modes
        for i in range(self.config.n_layers):
            spec = ad.irfft2(ad.spectral_multiply(ad.rfft2(h), w[f"layer{i}.R"], k), grid.shape)
            h = ad.gelu(ad.add(ad.channel_linear(h, w[f"layer{i}.W"], w[f"layer{i}.b"]), spec))
        return h, scale

    def project(self, h, scale=None, weights=None):
        w = weights or self.tensors()
        y = ad.gelu(ad.channel_linear(h, w["proj1.w"], w["proj1.b"]))
        y = ad.channel_linear(y, w["proj2.w"], w["proj2.b"])
        out = self.stats["out_std"][None, :, None, None]
        if scale is not None:
            out = out * scale[:, None, None, None]
        return ad.mul(y, ad.Tensor(np.broadcast_to(out, y.shape).astype(y.value.dtype)))

    def forward(self, states, gammas, grid: Grid, weights=None):
        h, scale = self.hidden(states, gammas, grid, weights)
        return self.project(h, scale, weights)

    # -- normalisation ---------------------------------------------------------------------

    def fit_stats(self, inputs: np.ndarray, gammas: np.ndarray, targets: np.ndarray):
        """Per-channel statistics from training arrays ``[N, C, H, W]``."""
        if self.config.amplitude_norm:
            rms = np.sqrt(np.mean(inputs.astype(float) ** 2, axis=(1, 2, 3)))
            rms = np.where(rms > 0, rms, 1.0)[:, None, None, None]
            inputs, targets = inputs / rms, targets / rms
        self.stats["state_mean"] = inputs.mean(axis=(0, 2, 3)).astype(float)
        self.stats["state_std"] = np.maximum(inputs.std(axis=(0, 2, 3)), 1e-12).astype(float)
        if self.config.n_params:
            self.stats["gamma_mean"] = gammas.mean(axis=0).astype(float)
            self.stats["gamma_std"] = np.maximum(gammas.std(axis=0), 1e-12).astype(float)
        self.stats["out_std"] = np.maximum(targets.std(axis=(0, 2, 3)), 1e-12).astype(float)


# -- single-field API ------------------------------------------------------------------

def _gamma_array(block: FnoBlock, gamma) -> np.ndarray | None:
    if gamma is None:
        return np.zeros((1, 0))
    if hasattr(gamma, "vector"):
        gamma = block.gamma_vector(gamma)
    return np.atleast_1d(np.asarray(gamma, dtype=float))[None, :]


def fno_forward(block: FnoBlock, state: Field, gamma=None) -> Field:
    """Predicted increment (pressure for the Poisson block) for one state."""
    out = block.forward(state.data[None].astype(block.dtype), _gamma_array(block, gamma), state.grid)
    return Field(state.grid, out.value[0].astype(float))


def embed(block: FnoBlock, state: Field, gamma=None) -> np.ndarray:
    """Hidden representation ``[width, ny, nx]`` just before the projection."""
    h, _ = block.hidden(state.data[None].astype(block.dtype), _gamma_array(block, gamma), state.grid)
    return h.value[0]


def count_params(obj) -> int:
    """Trainable scalar count; frozen blocks contribute nothing."""
    if isinstance(obj, FnoBlock):
        return 0 if obj.frozen else sum(a.size for a in obj.weights.values())
    if hasattr(obj, "count_params"):
        return obj.count_params()
    raise TypeError(f"cannot count parameters of {type(obj).__name__}")


def monolithic_config(task: str = "convdiff", channels: int = 1, param_names=("beta", "nu"),
                      width: int = 24, modes: int = 7, n_layers: int = 4, proj_hidden: int = 384) -> FnoConfig:
    """Single parametric FNO trained directly on a coupled task (the baseline)."""
    return FnoConfig("monolithic", width=width, modes=modes, n_layers=n_layers, proj_hidden=proj_hidden,
                     task=task, channels=channels, param_names=param_names)


def fourier_resample(a: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Band-limited interpolation of the last two axes onto ``shape``.

    Nyquist rows/columns are dropped so the map is exact between grids that
    both resolve the retained modes.
    """
    H, W = a.shape[-2:]
    H2, W2 = shape
    F = np.fft.fft2(a, axes=(-2, -1))
    ky = np.fft.fftfreq(H, 1 / H).astype(int)
    kx = np.fft.fftfreq(W, 1 / W).astype(int)
    lim_y, lim_x = min(H, H2) // 2, min(W, W2) // 2
    out = np.zeros(a.shape[:-2] + (H2, W2), dtype=complex)
    for iy, qy in enumerate(ky):
        if abs(qy) >= lim_y:
            continue
        for ix, qx in enumerate(kx):
            if abs(qx) < lim_x:
                out[..., qy % H2, qx % W2] = F[..., iy, ix]
    return np.real(np.fft.ifft2(out, axes=(-2, -1))) * (H2 * W2) / (H * W)


# -- training data ---------------------------------------------------------------------

def increment_pairs(ds: Dataset, block_cfg: FnoConfig, split: str | None = "train"):
    """Stack ``(u_t, gamma, target, grid)`` groups per resolution.

    Targets are increments ``u_{t+1} - u_t``; for the Poisson task the pair is
    ``(source, pressure)``.
    """
    if ds.task != block_cfg.task:
        raise ValueError(f"dataset task {ds.task!r} does not match block task {block_cfg.task!r}")
    trajs = [t for t in ds.trajectories if split is None or t.split == split]
    groups: dict[Grid, list] = {}
    for t in trajs:
        if t.channels != block_cfg.channels:
            raise ValueError(f"trajectory has {t.channels} channels, block expects {block_cfg.channels}")
        data = t.data
        if block_cfg.predicts_increment:
            inputs, targets = data[:-1], np.diff(data, axis=0)
        else:
            inputs, targets = data[:1], data[1:2]
        vec = t.params.vector()
        gam = np.array([vec[_PARAM_INDEX[n]] for n in block_cfg.param_names])
        groups.setdefault(t.grid, []).append((inputs, np.repeat(gam[None], len(inputs), axis=0), targets, t))
    out = []
    for grid, items in groups.items():
        out.append({
            "grid": grid,
            "inputs": np.concatenate([i[0] for i in items]),
            "gammas": np.concatenate([i[1] for i in items]),
            "targets": np.concatenate([i[2] for i in items]),
            "trajectories": [i[3] for i in items],
        })
    return out


# -- pretraining -----------------------------------------------------------------------

@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-3
    lr_min: float = 1e-5
    rollout_horizon: int = 1
    ar_fraction: float = 0.0
    target_mae: float | None = None
    patience: int = 10
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.rollout_horizon < 1:
            raise ValueError("epochs >= 0, batch_size >= 1, rollout_horizon >= 1 required")
        if not 0 <= self.ar_fraction <= 1:
            raise ValueError("ar_fraction must lie in [0, 1]")


@dataclass
class PretrainResult:
    block: FnoBlock
    curve: list[float]
    epochs_run: int


def _lr_at(cfg: PretrainConfig, epoch: int) -> float:
    if cfg.epochs <= 1:
        return cfg.lr
    c = 0.5 * (1 + math.cos(math.pi * epoch / (cfg.epochs - 1)))
    return cfg.lr_min + (cfg.lr - cfg.lr_min) * c


def _windows(ds: Dataset, split: str, horizon: int):
    """``(trajectory, start)`` pairs for every rollout window of ``horizon`` steps."""
    out = []
    for t in ds.trajectories:
        if t.split != split:
            continue
        for s in range(0, t.n_time - horizon):
            out.append((t, s))
    return out


def pretrain(block: FnoBlock, ds: Dataset, cfg: PretrainConfig = PretrainConfig(),
             progress=None) -> PretrainResult:
    """Fit ``block`` on teacher-forced increments, optionally mixed with rollout windows.

    The curve holds the mean training MAE per epoch in physical units.
    Training stops early once ``target_mae`` has been met for ``patience``
    consecutive epochs.  Raises :class:`TrainingDiverged` on a non-finite loss.
    """
    if block.frozen:
        raise ValueError("cannot pretrain a frozen block")
    groups = increment_pairs(ds, block.config)
    if not groups or sum(len(g["inputs"]) for g in groups) == 0:
        raise ValueError("pretraining needs at least one training trajectory")
    if cfg.rollout_horizon > 1:
        short = [t for t in ds.trajectories if t.split == "train" and t.n_time < cfg.rollout_horizon + 1]
        if short:
            raise ValueError(f"{len(short)} trajectories are shorter than rollout_horizon + 1 frames")
    dtype = np.dtype(cfg.dtype)
    block = block.astype(dtype)
    block.fit_stats(np.concatenate([g["inputs"] for g in groups]).astype(float),
                    np.concatenate([g["gammas"] for g in groups]),
                    np.concatenate([g["targets"] for g in groups]).astype(float))
    rng = np.random.default_rng(cfg.seed)
    state = ad.AdamState()
    params = block.tensors()
    windows = _windows(ds, "train", cfg.rollout_horizon) if cfg.rollout_horizon > 1 else []
    curve: list[float] = []
    good = copy.deepcopy(block.weights)
    hits = 0
    for epoch in range(cfg.epochs):
        lr = _lr_at(cfg, epoch)
        batches = []
        for gi, g in enumerate(groups):
            order = rng.permutation(len(g["inputs"]))
            batches += [("tf", gi, order[i : i + cfg.batch_size]) for i in range(0, len(order), cfg.batch_size)]
        if windows and cfg.ar_fraction > 0:
            n_ar = max(1, int(round(cfg.ar_fraction * len(batches))))
            picks = rng.permutation(len(windows))
            per = max(1, cfg.batch_size // cfg.rollout_horizon)
            for j in range(n_ar):
                sel = picks[(j * per) % len(windows) : (j * per) % len(windows) + per]
                batches.append(("ar", None, sel))
        batches = [batches[i] for i in rng.permutation(len(batches))]
        total, count = 0.0, 0
        for kind, gi, idx in batches:
            if kind == "tf":
                g = groups[gi]
                pred = block.forward(g["inputs"][idx].astype(dtype), g["gammas"][idx], g["grid"])
                loss = ad.mean_abs(ad.sub(pred, ad.Tensor(g["targets"][idx].astype(dtype))))
            else:
                loss = _rollout_loss(block, [windows[i] for i in idx], cfg.rollout_horizon, dtype)
            value = float(loss.value)
            if not math.isfinite(value):
                block.weights = good
                block._tensors = {}
                raise TrainingDiverged(epoch, block, curve)
            grads = ad.backward(loss, params)
            ad.adam_step(params, grads, state, lr=lr)
            n = len(idx)
            total += value * n
            count += n
        mae = total / count
        curve.append(mae)
        good = copy.deepcopy(block.weights)
        if progress is not None:
            progress(epoch, mae)
        if cfg.target_mae is not None:
            hits = hits + 1 if mae <= cfg.target_mae else 0
            if hits >= cfg.patience:
                break
    block._tensors = {}
    return PretrainResult(block, curve, len(curve))


def _rollout_loss(block: FnoBlock, windows, horizon: int, dtype):
    """Mean increment MAE along short rollouts from true starting states."""
    grid = windows[0][0].grid
    same = [(t, s) for t, s in windows if t.grid == grid]
    frames = np.stack([t.data[s : s + horizon + 1] for t, s in same]).astype(dtype)  # [B, h+1, C, H, W]
    gam = np.stack([block.gamma_vector(t.params) for t, _ in same])
    state = ad.Tensor(frames[:, 0])
    losses = []
    for k in range(horizon):
        inc = block.forward(state, gam, grid)
        true_inc = frames[:, k + 1] - frames[:, k]
        losses.append(ad.mean_abs(ad.sub(inc, ad.Tensor(true_inc))))
        state = ad.add(state, inc)
    loss = losses[0]
    for extra in losses[1:]:
        loss = ad.add(loss, extra)
    return ad.scalar_mul(loss, 1.0 / horizon)


# -- checkpoints -----------------------------------------------------------------------

def _meta(block: FnoBlock) -> dict:
    cfg = asdict(block.config)
    cfg["param_names"] = list(block.config.param_names)
    return {"kind": "fno_block", "config": cfg, "frozen": block.frozen,
            "operator_id": block.config.operator_id, "modes": block.config.modes,
            "width": block.config.width}


def save_block(block: FnoBlock, path, extra_meta: dict | None = None) -> Path:
    tensors = dict(block.weights)
    tensors.update({f"stats.{k}": np.asarray(v, dtype=float) for k, v in block.stats.items()})
    meta = _meta(block) | (extra_meta or {})
    path = Path(path)
    ad.save_checkpoint(path, tensors, meta)
    return path


def load_block(path) -> FnoBlock:
    tensors, meta = ad.load_checkpoint(path)
    if meta.get("kind") != "fno_block":
        raise ValueError(f"{path} is not an FNO block checkpoint")
    cfg = dict(meta["config"])
    cfg["param_names"] = tuple(cfg["param_names"])
    config = FnoConfig(**cfg)
    stats = {k[6:]: v for k, v in tensors.items() if k.startswith("stats.")}
    weights = {k: v for k, v in tensors.items() if not k.startswith("stats.")}
    block = FnoBlock(config, weights, stats, frozen=bool(meta.get("frozen", False)))
    return block

