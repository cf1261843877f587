"""Command-line front end: ``cno <command> [--config run.ini] [--seed N] ...``.

Commands: ``datagen``, ``pretrain``, ``train``, ``evaluate``, ``bench`` and
``inspect``.  Progress goes to stderr; stdout only lists the artifact paths
written (``inspect`` prints its dump instead).  Exit codes: 2 for a bad
config, 3 for bad or missing data, 4 for numerical divergence.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import __version__

log = logging.getLogger("compno")

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 2, 3, 4

# section -> key -> (default, description).  ``None`` means "no value".
DEFAULTS: dict[str, dict[str, tuple[str, str]]] = {
    "grid": {
        "nx": ("32", "coarse grid points per side"),
        "fine_nx": ("64", "fine grid points per side"),
        "fine_fraction": ("0.0", "share of trajectories on the fine grid"),
        "length": ("6.283185307179586", "periodic domain side length"),
    },
    "task": {
        "task": ("diffusion", "PDE variant of the dataset"),
        "betas": ("0.5,1.0,1.5,2.0,2.5", "convection speeds (comma separated)"),
        "nus": ("1.0,0.1,0.01,0.001", "viscosities (comma separated)"),
        "rho": ("1.0", "density (INS)"),
        "dt": ("0.01", "time step"),
        "n_steps": ("20", "steps per trajectory"),
        "on_cfl": ("skip", "skip or reduce when dt breaks the CFL limit"),
        "convection": ("", "upwind or central for nonlinear tasks (empty: solver default)"),
        "test_fraction": ("0.0", "share of trajectories held out for testing"),
        "seed": (None, "master seed, mandatory (or pass --seed)"),
    },
    "ic": {
        "kind": ("isotropic", "isotropic, taylor_green or shear"),
        "n_ic": ("2", "initial conditions per parameter combination"),
        "amplitude": ("1.0", "initial condition amplitude"),
        "peak_wavenumber": ("3.0", "spectral peak of isotropic fields"),
    },
    "train": {
        "epochs": ("200", "training epochs"),
        "batch_size": ("16", "mini-batch size"),
        "lr": ("1e-3", "peak learning rate (cosine schedule)"),
        "lr_min": ("1e-5", "final learning rate"),
        "rollout_horizon": ("1", "autoregressive window for block pretraining"),
        "ar_fraction": ("0.0", "share of pretraining batches on rollout windows"),
        "target_mae": ("", "early-stop threshold on train MAE (empty: off)"),
        "patience": ("10", "epochs at or below target_mae before stopping"),
        "dtype": ("float32", "float32 or float64"),
    },
    "model": {
        "operator": ("diffusion", "block to pretrain, or monolithic"),
        "width": ("128", "embedding width d"),
        "modes": ("12", "retained Fourier modes per axis"),
        "n_layers": ("4", "Fourier layers"),
        "proj_hidden": ("128", "projection hidden width"),
        "target": ("convdiff", "composed target PDE"),
        "agg_width": ("0", "aggregator hidden width (0: documented default)"),
        "include_state": ("false", "feed the raw state to the aggregator too"),
        "head": ("stream", "INS velocity head: stream or direct"),
        "block_skip": ("auto", "add the blocks' own increments (auto: all targets but ins)"),
    },
    "loss": {
        "lambda_data": ("1.0", "weight of the increment MAE"),
        "lambda_physics": ("0.1", "weight of the physics residual"),
        "physics_window": ("4", "rollout steps per physics window"),
        "physics_batch_size": ("2", "windows per physics evaluation"),
        "physics_every": ("1", "evaluate the physics term every n batches"),
    },
    "eval": {
        "warmup": ("1", "ground-truth warmup frames T0"),
        "horizon": ("30", "rollout steps T"),
        "split": ("test", "dataset split to evaluate"),
        "bench_nx": ("128", "grid side for timing"),
        "bench_steps": ("5", "timed steps (median reported)"),
    },
    "io": {
        "log_level": ("INFO", "stderr logging level"),
    },
}


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class RunConfig:
    values: dict[str, dict[str, str]]

    @classmethod
    def load(cls, path: str | None, seed: int | None = None) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        if path is not None:
            try:
                text = Path(path).read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            try:
                parser.read_string(text, source=str(path))
            except configparser.Error as exc:
                raise ConfigError(str(exc)) from exc
        values = {s: {k: d for k, (d, _) in keys.items()} for s, keys in DEFAULTS.items()}
        for section in parser.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"unknown section [{section}]")
            for key, value in parser.items(section):
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                values[section][key] = value
        if seed is not None:
            values["task"]["seed"] = str(seed)
        if values["task"]["seed"] is None:
            raise ConfigError("a seed is required: set [task] seed or pass --seed")
        cfg = cls(values)
        cfg.int("task", "seed")
        return cfg

    def get(self, section: str, key: str) -> str:
        return self.values[section][key]

    def _conv(self, section, key, fn, what):
        raw = self.get(section, key)
        try:
            return fn(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {key} = {raw!r} is not {what}") from exc

    def int(self, section, key) -> int:
        return self._conv(section, key, int, "an integer")

    def float(self, section, key) -> float:
        return self._conv(section, key, float, "a number")

    def floats(self, section, key) -> tuple[float, ...]:
        return self._conv(section, key, lambda s: tuple(float(x) for x in s.split(",") if x.strip()),
                          "a list of numbers")

    def bool(self, section, key) -> bool:
        raw = self.get(section, key).strip().lower()
        if raw in ("1", "true", "yes", "on"):
            return True
        if raw in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a boolean")

    @property
    def seed(self) -> int:
        return self.int("task", "seed")

    def canonical(self) -> str:
        return json.dumps(self.values, sort_keys=True)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def provenance(self) -> dict:
        return {"config_hash": self.hash, "version": __version__}


# -- builders -------------------------------------------------------------------------

def datagen_config(cfg: RunConfig):
    from .datagen import DatagenConfig

    try:
        return DatagenConfig(
            task=cfg.get("task", "task"), n_ic=cfg.int("ic", "n_ic"), betas=cfg.floats("task", "betas"),
            nus=cfg.floats("task", "nus"), rho=cfg.float("task", "rho"), dt=cfg.float("task", "dt"),
            n_steps=cfg.int("task", "n_steps"), nx=cfg.int("grid", "nx"), fine_nx=cfg.int("grid", "fine_nx"),
            fine_fraction=cfg.float("grid", "fine_fraction"), test_fraction=cfg.float("task", "test_fraction"),
            length=cfg.float("grid", "length"), ic=cfg.get("ic", "kind"), amplitude=cfg.float("ic", "amplitude"),
            peak_wavenumber=cfg.float("ic", "peak_wavenumber"), on_cfl=cfg.get("task", "on_cfl"), seed=cfg.seed,
            convection=cfg.get("task", "convection").strip(),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _dtype(cfg: RunConfig) -> str:
    dt = cfg.get("train", "dtype")
    if dt not in ("float32", "float64"):
        raise ConfigError(f"[train] dtype must be float32 or float64, got {dt!r}")
    return dt


def pretrain_config(cfg: RunConfig):
    from .neuralop import PretrainConfig

    raw = cfg.get("train", "target_mae").strip()
    try:
        return PretrainConfig(
            epochs=cfg.int("train", "epochs"), batch_size=cfg.int("train", "batch_size"),
            lr=cfg.float("train", "lr"), lr_min=cfg.float("train", "lr_min"),
            rollout_horizon=cfg.int("train", "rollout_horizon"), ar_fraction=cfg.float("train", "ar_fraction"),
            target_mae=float(raw) if raw else None, patience=cfg.int("train", "patience"), seed=cfg.seed,
            dtype=_dtype(cfg),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def aggregator_config(cfg: RunConfig):
    from .model import AggregatorTrainConfig

    try:
        return AggregatorTrainConfig(
            epochs=cfg.int("train", "epochs"), batch_size=cfg.int("train", "batch_size"),
            lr=cfg.float("train", "lr"), lr_min=cfg.float("train", "lr_min"),
            physics_window=cfg.int("loss", "physics_window"),
            physics_batch_size=cfg.int("loss", "physics_batch_size"),
            physics_every=cfg.int("loss", "physics_every"), seed=cfg.seed,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def block_config(cfg: RunConfig, task: str, channels: int):
    from .neuralop import FnoConfig, monolithic_config

    op = cfg.get("model", "operator")
    shape = dict(width=cfg.int("model", "width"), modes=cfg.int("model", "modes"),
                 n_layers=cfg.int("model", "n_layers"), proj_hidden=cfg.int("model", "proj_hidden"))
    try:
        if op == "monolithic":
            names = ("beta", "nu") if task == "convdiff" else ("nu",)
            return monolithic_config(task, channels, names, **shape)
        return FnoConfig(op, **shape)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad [model] block settings: {exc}") from exc


# -- outputs -------------------------------------------------------------------------------

def write_csv(path: Path, rows, cfg: RunConfig) -> Path:
    """Metrics CSV: a provenance comment line, then ``metric,step_or_epoch,value`` rows."""
    buf = io.StringIO()
    buf.write(f"# config_hash={cfg.hash} version={__version__}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "step_or_epoch", "value"])
    for metric, step, value in rows:
        w.writerow([metric, step, repr(float(value))])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())
    return path


def _read_dataset(path):
    from .binio import FormatError
    from .datagen import read_dataset

    try:
        return read_dataset(path)
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    except FormatError as exc:
        raise DataError(f"{path}: {exc}") from exc


def _emit(*paths):
    for p in paths:
        print(p)


# -- commands ------------------------------------------------------------------------------

def cmd_datagen(cfg: RunConfig, out: Path) -> list[Path]:
    from .datagen import generate, write_dataset

    ds = generate(datagen_config(cfg))
    log.info("generated %d trajectories (%d skipped)", len(ds), len(ds.skipped))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, out)
    side = out.with_name(out.name + ".json")
    info = cfg.provenance() | {"task": ds.task, "n_traj": len(ds), "skipped": ds.skipped,
                               "resolutions": {f"{h}x{w}": n for (h, w), n in ds.resolutions().items()}}
    side.write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return [out, side]


def cmd_pretrain(cfg: RunConfig, dataset: Path, out_dir: Path) -> list[Path]:
    from .neuralop import FnoBlock, save_block, pretrain
    from .datagen import n_state_channels

    ds = _read_dataset(dataset)
    if not len(ds):
        raise DataError(f"{dataset} holds no trajectories")
    bcfg = block_config(cfg, ds.task, n_state_channels(ds.task))
    if bcfg.task != ds.task:
        raise DataError(f"operator {bcfg.operator_id!r} trains on {bcfg.task!r} data, dataset is {ds.task!r}")
    pcfg = pretrain_config(cfg)
    block = FnoBlock.create(bcfg, seed=cfg.seed, dtype=pcfg.dtype)
    res = pretrain(block, ds, pcfg, progress=lambda e, m: log.info("epoch %d train_mae %.4g", e, m))
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = save_block(res.block, out_dir / f"block_{bcfg.operator_id}.cnow", cfg.provenance())
    curve = write_csv(out_dir / f"pretrain_{bcfg.operator_id}.csv",
                      [("train_mae", i, v) for i, v in enumerate(res.curve)], cfg)
    return [ckpt, curve]


def _find_blocks(blocks_dir: Path, routing) -> list:
    from .neuralop import load_block

    found = {}
    for p in sorted(blocks_dir.glob("*.cnow")):
        try:
            b = load_block(p)
        except ValueError:
            continue
        found.setdefault(b.config.operator_id, b)
    missing = [op for op in routing if op not in found]
    if missing:
        raise DataError(f"{blocks_dir} lacks pretrained blocks for {missing}")
    return [found[op] for op in routing]


def cmd_train(cfg: RunConfig, dataset: Path, blocks_dir: Path, out_dir: Path) -> list[Path]:
    from .model import CompNoModel, TargetPde, RoutingError, save_model, train_aggregator

    target_name = cfg.get("model", "target")
    try:
        target = TargetPde(target_name, cfg.float("task", "rho"))
    except RoutingError as exc:
        raise ConfigError(str(exc)) from exc
    ds = _read_dataset(dataset)
    if ds.task != target.variant:
        raise DataError(f"dataset task {ds.task!r} does not match target {target.variant!r}")
    blocks = _find_blocks(blocks_dir, target.routing)
    head = cfg.get("model", "head")
    if head not in ("stream", "direct"):
        raise ConfigError("[model] head must be stream or direct")
    skip = None if cfg.get("model", "block_skip").strip().lower() == "auto" else cfg.bool("model", "block_skip")
    try:
        model = CompNoModel.build(blocks, target, width=cfg.int("model", "agg_width") or None, seed=cfg.seed,
                                  include_state=cfg.bool("model", "include_state"), head=head,
                                  lambda_data=cfg.float("loss", "lambda_data"),
                                  lambda_physics=cfg.float("loss", "lambda_physics"), block_skip=skip)
    except RoutingError as exc:
        raise DataError(str(exc)) from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    res = train_aggregator(model, ds, aggregator_config(cfg),
                           progress=lambda e, m: log.info("epoch %d L_data %.4g R %.4g", e, m["L_data"], m["R"]))
    bundle = save_model(model, out_dir, cfg.provenance())
    rows = [(name, i, v) for name in ("L_data", "R", "loss") for i, v in enumerate(res.curves[name])]
    curves = write_csv(out_dir / "train_curves.csv", rows, cfg)
    return [bundle, curves]


def _load_any_model(path: Path):
    from .model import BlockStepper, load_model
    from .neuralop import load_block

    try:
        if path.is_dir():
            return load_model(path)
        return BlockStepper(load_block(path))
    except OSError as exc:
        raise DataError(f"cannot load model {path}: {exc}") from exc
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def cmd_evaluate(cfg: RunConfig, model_dir: Path, dataset: Path, out: Path) -> list[Path]:
    from .model import TargetPde, evaluate

    model = _load_any_model(model_dir)
    ds = _read_dataset(dataset)
    try:
        target = getattr(model, "target", None) or TargetPde(ds.task, cfg.float("task", "rho"))
    except ValueError as exc:
        raise DataError(f"cannot evaluate on {ds.task!r} data: {exc}") from exc
    if ds.task != target.variant:
        raise DataError(f"dataset task {ds.task!r} does not match model target {target.variant!r}")
    T0, T = cfg.int("eval", "warmup"), cfg.int("eval", "horizon")
    try:
        m = evaluate(model, ds, T0, T, split=cfg.get("eval", "split"), target=target)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    rows = [("step_mae", T0 + i, v) for i, v in enumerate(m["step_mae"])]
    for key in ("pressure_mae", "divergence", "gt_divergence"):
        rows += [(key, T0 + i, v) for i, v in enumerate(m.get(key, []))]
    rows += [("final_mae", T0 + T - 1, m["final_mae"]), ("mean_mae", T0 + T - 1, m["mean_mae"]),
             ("physics_residual", T0 + T - 1, m["physics_residual"])]
    return [write_csv(out, rows, cfg)]


def cmd_bench(cfg: RunConfig, model_dir: Path, out: Path) -> list[Path]:
    import numpy as np

    from .field import Grid
    from .model import benchmark_inference
    from .solvers import PdeParams, cfl_dt, ic_isotropic, stepper_for

    model = _load_any_model(model_dir)
    if not hasattr(model, "target"):
        raise DataError("bench needs a composed model directory")
    n = cfg.int("eval", "bench_nx")
    grid = Grid(n, n, cfg.float("grid", "length"), cfg.float("grid", "length"))
    variant = model.target.variant
    params = PdeParams(variant, beta=cfg.floats("task", "betas")[0], nu=cfg.floats("task", "nus")[0],
                       rho=model.target.rho, dt=cfg.float("task", "dt"))
    amp = cfg.float("ic", "amplitude")
    if model.target.velocity_channels == 2:
        u, v = ic_isotropic(grid, cfg.seed, cfg.float("ic", "peak_wavenumber"), components=2)
        state = amp * np.concatenate([u.data, v.data] + ([np.zeros_like(u.data)] if variant == "ins" else []))
    else:
        state = amp * ic_isotropic(grid, cfg.seed, cfg.float("ic", "peak_wavenumber")).data
    limit = 0.9 * cfl_dt(variant, state, grid, params.beta)
    if params.dt > limit:
        # finer benchmark grids tighten the explicit limit; both steppers get the same dt
        log.warning("bench: dt %g exceeds the CFL limit on %dx%d, using %g", params.dt, n, n, limit)
        params = params.with_dt(limit)
    r = benchmark_inference(model, stepper_for(variant), grid, params, cfg.int("eval", "bench_steps"), state)
    log.info("model %.4g s/step, solver %.4g s/step, speedup %.3g", r["t_model"], r["t_solver"], r["speedup"])
    rows = [(k, n, r[k]) for k in ("t_model", "t_solver", "speedup")]
    return [write_csv(out, rows, cfg)]


def inspect_text(path: Path) -> str:
    """Human-readable summary of a dataset, checkpoint or model directory."""
    from .binio import FormatError
    from . import autodiff as ad
    from .datagen import parse_dataset

    if path.is_dir():
        manifest = path / "manifest.json"
        if not manifest.exists():
            raise DataError(f"{path} has no manifest.json")
        return manifest.read_text()
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    lines = [f"file: {path}"]
    try:
        if raw[:4] == b"CNO2":
            ds = parse_dataset(raw)
            lines += ["format: CNO2 dataset", f"task: {ds.task}", f"n_traj: {len(ds)}"]
            for (h, w), k in sorted(ds.resolutions().items()):
                lines.append(f"grid: {w}x{h} ({k} trajectories)")
            for i, t in enumerate(ds.trajectories):
                p = t.params
                lines.append(f"[{i}] {t.split} frames={t.n_time} channels={t.channels} grid={t.grid.nx}x{t.grid.ny} "
                             f"beta={p.beta:g} nu={p.nu:g} rho={p.rho:g} dt={p.dt:g}")
        elif raw[:4] == ad.CKPT_MAGIC:
            tensors, meta = ad.parse_checkpoint(raw)
            lines += ["format: CNOW checkpoint", "meta: " + json.dumps(meta, sort_keys=True)]
            total = 0
            for name, a in sorted(tensors.items()):
                lines.append(f"{name}: {a.dtype} {list(a.shape)}")
                if not name.startswith("stats."):
                    total += a.size
            lines.append(f"weights: {total}")
        else:
            raise DataError(f"{path}: unrecognised file format")
    except FormatError as exc:
        raise DataError(f"{path}: {exc}") from exc
    return "\n".join(lines) + "\n"


# -- entry point ---------------------------------------------------------------------------

def _set_threads(n: int | None):
    if n is None:
        env = os.environ.get("CNO_THREADS")
        n = int(env) if env and env.isdigit() else None
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--seed", type=int, help="overrides [task] seed")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--threads", type=int, help="worker threads (fallback: CNO_THREADS)")
    parser = argparse.ArgumentParser(prog="cno", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("datagen", parents=[common], help="generate a dataset")
    p = sub.add_parser("pretrain", parents=[common], help="pretrain one foundation block")
    p.add_argument("dataset")
    p = sub.add_parser("train", parents=[common], help="train an aggregator over frozen blocks")
    p.add_argument("dataset")
    p.add_argument("blocks_dir")
    p = sub.add_parser("evaluate", parents=[common], help="rollout metrics on a dataset")
    p.add_argument("model")
    p.add_argument("dataset")
    p = sub.add_parser("bench", parents=[common], help="time model and solver steps")
    p.add_argument("model")
    p = sub.add_parser("inspect", help="dump a dataset, checkpoint or model header")
    p.add_argument("path")
    return parser


_DEFAULT_OUT = {"datagen": "dataset.cno", "pretrain": "blocks", "train": "model",
                "evaluate": "metrics.csv", "bench": "timing.csv"}


def run(args) -> list:
    if args.command == "inspect":
        sys.stdout.write(inspect_text(Path(args.path)))
        return []
    cfg = RunConfig.load(args.config, args.seed)
    level = cfg.get("io", "log_level").upper()
    if level not in logging._nameToLevel:
        raise ConfigError(f"[io] log_level {level!r} is not a logging level")
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s", force=True)
    out = Path(args.out or _DEFAULT_OUT[args.command])
    log.info("config hash %s", cfg.hash)
    if args.command == "datagen":
        return cmd_datagen(cfg, out)
    if args.command == "pretrain":
        return cmd_pretrain(cfg, Path(args.dataset), out)
    if args.command == "train":
        return cmd_train(cfg, Path(args.dataset), Path(args.blocks_dir), out)
    if args.command == "evaluate":
        return cmd_evaluate(cfg, Path(args.model), Path(args.dataset), out)
    return cmd_bench(cfg, Path(args.model), out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _set_threads(getattr(args, "threads", None))
    from .neuralop import TrainingDiverged
    from .solvers import DivergenceError

    try:
        _emit(*run(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, DivergenceError, FloatingPointError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return 0


if __name__ == "__main__":
    sys.exit(main())
