"""Experiment driver: configs, datasets, base training and transfer sweeps.

Config files are INI (``configparser``) with fixed, typed sections; unknown
keys are rejected so typos fail loudly. See ``docs/config.md`` for the full
grammar. List values are comma separated; a grid may also be written as
``logspace <start> <stop> <count>``.
"""

import configparser
import csv
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from sklearn.model_selection import train_test_split

from .checkpoint import Checkpoint, make_meta
from .emit import write_csv, write_json
from .exceptions import ConfigError, CsvFormatError, CsvValueError, InvalidParameterError
from .linalg import STREAM_DATA, STREAM_INIT, STREAM_ORDER, gauss_mat, make_rng
from .model import MlpModel, MlpSpec, forward
from .mup import BaseConstants, init_weights, resolve_hparams
from .optim import UpdateRule
from .training import BatchStream, Trainer, evaluate_loss
from .upscale import UpscaleConfig, train_upscaled, upscale

# -- config ------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple = (32, 32)
    activation: str = "relu"
    readout: str = "mean"
    bias: bool = False

    def spec(self, d_in, d_out, hidden=None):
        hidden = self.hidden if hidden is None else hidden
        return MlpSpec((d_in, *hidden, d_out), self.activation, self.readout, bias=self.bias)


@dataclass(frozen=True)
class OptimConfig:
    rule: str = "sgd"
    decay_mode: str = "vanilla"
    beta: float = 0.9
    tau: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999

    def update_rule(self):
        return UpdateRule.parse(
            self.rule, decay_mode=self.decay_mode, beta=self.beta, tau=self.tau, beta1=self.beta1, beta2=self.beta2
        )


@dataclass(frozen=True)
class DataConfig:
    source: str = "teacher"
    d_in: int = 8
    d_out: int = 1
    samples: int = 512
    teacher_hidden: tuple = (64,)
    noise: float = 0.0
    seed: int = 0
    path: str = None
    target: str = None
    task: str = "regression"
    binary: str = "auto"
    normalize: bool = True
    val_fraction: float = 0.2


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 100
    batch_size: int = 64
    seeds: tuple = (0,)


@dataclass(frozen=True)
class SweepConfig:
    base_widths: tuple = (32,)
    k: int = 2
    lr_grid: tuple = ()
    noise_grid: tuple = ()
    fixed_lr: float = None
    fixed_noise: float = None
    grid: str = "axes"
    steps_before: int = 100
    steps_after: int = 100
    metric: str = "train_loss"
    workers: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    base: BaseConstants = field(default_factory=BaseConstants)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    infwidth: dict = field(default_factory=dict)

    @classmethod
    def from_string(cls, text):
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        cp.optionxform = str  # keys are case sensitive (noise_A vs noise_a)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unparsable config: {exc}") from None
        return cls.from_parser(cp)

    @classmethod
    def from_file(cls, path):
        try:
            with open(path) as f:
                return cls.from_string(f.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None

    @classmethod
    def from_parser(cls, cp):
        unknown = set(cp.sections()) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        parts = {}
        for section, (attr, typ) in _SECTIONS.items():
            values = dict(cp[section]) if cp.has_section(section) else {}
            parts[attr] = _build(typ, section, values)
        parts["sweep"] = _snap_fixed(parts["sweep"])
        cfg = cls(**parts)
        cfg.validate()
        return cfg

    def validate(self):
        try:
            self.optim.update_rule()
            self.model.spec(self.data.d_in, self.data.d_out)
        except InvalidParameterError as exc:
            raise ConfigError(str(exc)) from None
        if self.data.source not in ("teacher", "csv"):
            raise ConfigError(f"[data] source must be teacher or csv, got {self.data.source!r}")
        if self.data.source == "csv" and (not self.data.path or not self.data.target):
            raise ConfigError("[data] csv source needs path and target")
        if not self.train.seeds:
            raise ConfigError("[train] seeds must be nonempty")
        if self.sweep.grid not in ("axes", "product"):
            raise ConfigError("[sweep] grid must be axes or product")
        if self.sweep.metric not in ("train_loss", "val_loss"):
            raise ConfigError("[sweep] metric must be train_loss or val_loss")

    def validate_sweep(self):
        s = self.sweep
        if not s.base_widths or not s.lr_grid or not s.noise_grid:
            raise ConfigError("[sweep] base_widths, lr_grid and noise_grid must be nonempty")
        if s.grid == "axes":
            if s.fixed_lr is None or s.fixed_noise is None:
                raise ConfigError("[sweep] grid=axes needs fixed_lr and fixed_noise")
            if s.fixed_lr not in s.lr_grid or s.fixed_noise not in s.noise_grid:
                raise ConfigError("[sweep] fixed_lr / fixed_noise must be members of their grids")


def _snap_fixed(s):
    """Replace fixed_lr / fixed_noise by the grid entry they match to 1e-9 relative."""

    def snap(v, grid):
        if v is None:
            return v
        for g in grid:
            if math.isclose(v, g, rel_tol=1e-9):
                return g
        return v

    return replace(s, fixed_lr=snap(s.fixed_lr, s.lr_grid), fixed_noise=snap(s.fixed_noise, s.noise_grid))


def _parse_list(text, conv):
    text = text.strip()
    if text.startswith("logspace"):
        parts = text.split()
        if len(parts) != 4:
            raise ValueError("logspace needs <start> <stop> <count>")
        a, b, n = float(parts[1]), float(parts[2]), int(parts[3])
        return tuple(float(v) for v in np.geomspace(a, b, n))
    return tuple(conv(v.strip()) for v in text.split(",") if v.strip())


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_opt_float(text):
    return None if text.strip().lower() in ("", "none") else float(text)


_FIELD_PARSERS = {
    "hidden": lambda s: _parse_list(s, int),
    "teacher_hidden": lambda s: _parse_list(s, int),
    "seeds": lambda s: _parse_list(s, int),
    "base_widths": lambda s: _parse_list(s, int),
    "lr_grid": lambda s: _parse_list(s, float),
    "noise_grid": lambda s: _parse_list(s, float),
    "fixed_lr": _parse_opt_float,
    "fixed_noise": _parse_opt_float,
}


def _build(typ, section, values):
    if typ is dict:
        return dict(values)
    defaults = typ()
    kwargs = {}
    for key, raw in values.items():
        if key not in typ.__dataclass_fields__:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        default = getattr(defaults, key)
        try:
            if key in _FIELD_PARSERS:
                kwargs[key] = _FIELD_PARSERS[key](raw)
            elif isinstance(default, bool):
                kwargs[key] = _parse_bool(raw)
            elif isinstance(default, int):
                kwargs[key] = int(raw)
            elif isinstance(default, float):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = raw.strip()
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from None
    try:
        return typ(**kwargs)
    except (InvalidParameterError, TypeError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


_SECTIONS = {
    "model": ("model", ModelConfig),
    "optimizer": ("optim", OptimConfig),
    "base": ("base", BaseConstants),
    "data": ("data", DataConfig),
    "train": ("train", TrainConfig),
    "sweep": ("sweep", SweepConfig),
    "infwidth": ("infwidth", dict),
}


# -- datasets ----------------------------------------------------------------


@dataclass
class Dataset:
    """Features, targets, a disjoint train/val split and the normalization applied."""

    X: np.ndarray
    Y: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    task: str = "regression"
    columns: list = None
    mean: np.ndarray = None
    std: np.ndarray = None
    classes: np.ndarray = None
    binary: list = None
    teacher: object = None

    @property
    def X_train(self):
        return self.X[self.train_idx]

    @property
    def Y_train(self):
        return self.Y[self.train_idx]

    @property
    def X_val(self):
        return self.X[self.val_idx]

    @property
    def Y_val(self):
        return self.Y[self.val_idx]

    @property
    def d_in(self):
        return self.X.shape[1]

    @property
    def d_out(self):
        return len(self.classes) if self.task == "classification" else self.Y.shape[1]

    @property
    def loss(self):
        return "cross_entropy" if self.task == "classification" else "mse"


def _split(n, val_fraction, seed, stratify=None):
    idx = np.arange(n)
    if val_fraction <= 0:
        return idx, np.arange(0)
    tr, va = train_test_split(idx, test_size=val_fraction, random_state=int(seed), stratify=stratify)
    return np.sort(tr), np.sort(va)


def teacher_model(rng, d_in, d_out, hidden):
    """Random ReLU teacher with fan-in scaled weights and sum readout (O(1) outputs)."""
    spec = MlpSpec((d_in, *hidden, d_out), "relu", "sum")
    params = [gauss_mat(rng, *s, 1.0 / math.sqrt(s[1])) for s in spec.param_shapes()]
    return MlpModel(spec, params)


def gen_teacher_data(rng, d_in, d_out, samples, teacher_hidden=(64,), noise=0.0, val_fraction=0.2, split_seed=0):
    """Inputs ``N(0, I)``, labels = teacher(x) + ``noise`` * N(0, I)."""
    if samples < 1:
        raise InvalidParameterError("samples must be >= 1")
    if noise < 0:
        raise InvalidParameterError("noise must be >= 0")
    teacher = teacher_model(rng, d_in, d_out, teacher_hidden)
    X = rng.standard_normal((samples, d_in))
    Y = forward(teacher, X)[0] + noise * rng.standard_normal((samples, d_out))
    tr, va = _split(samples, val_fraction if samples > 1 else 0.0, split_seed)
    return Dataset(X, Y, tr, va, "regression", teacher=teacher)


def _read_numeric_csv(path):
    try:
        f = open(path, newline="")
    except OSError as exc:
        raise CsvFormatError(f"cannot open {path}: {exc}") from None
    with f:
        reader = csv.reader(f)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CsvFormatError("file is empty", 1) from None
        if not header or any(h == "" for h in header):
            raise CsvFormatError("header has empty column names", 1)
        if len(set(header)) != len(header):
            raise CsvFormatError("duplicate column names in header", 1)
        rows = []
        for line, rec in enumerate(reader, start=2):
            if not rec or all(c.strip() == "" for c in rec):
                continue
            if len(rec) != len(header):
                raise CsvFormatError(f"expected {len(header)} fields, got {len(rec)}", line)
            values = []
            for col, cell in zip(header, rec):
                try:
                    v = float(cell)
                except ValueError:
                    raise CsvValueError(f"non-numeric value {cell!r} in column {col!r}", line, col) from None
                if not math.isfinite(v):
                    raise CsvValueError(f"non-finite value {cell!r} in column {col!r}", line, col)
                values.append(v)
            rows.append(values)
    if not rows:
        raise CsvFormatError("no data rows", 2)
    return header, np.array(rows, dtype=np.float64)


def load_csv(path, target, task="regression", binary="auto", normalize=True, val_fraction=0.2, seed=0):
    """Numeric CSV with a header row -> ``Dataset``.

    Continuous features are standardized with train-split statistics; binary
    (0/1) features are left unchanged. ``binary`` is ``"auto"`` (detect 0/1
    columns), ``"none"`` or a comma-separated list of column names.
    Classification uses a stratified split and integer class labels.
    """
    header, data = _read_numeric_csv(path)
    if target not in header:
        raise CsvFormatError(f"target column {target!r} not in header", 1)
    t = header.index(target)
    features = [h for h in header if h != target]
    X = np.delete(data, t, axis=1)
    y = data[:, t]
    if task == "classification":
        classes, labels = np.unique(y, return_inverse=True)
        Y = labels.astype(np.int64)
        counts = np.bincount(Y)
        strat = Y if val_fraction > 0 and counts.min() >= 2 else None
    elif task == "regression":
        classes, Y, strat = None, y[:, None], None
    else:
        raise InvalidParameterError(f"task must be regression or classification, got {task!r}")
    tr, va = _split(len(X), val_fraction if len(X) > 1 else 0.0, seed, strat)

    if binary == "auto":
        is_bin = [bool(np.all((X[:, j] == 0) | (X[:, j] == 1))) for j in range(X.shape[1])]
    elif binary in ("none", "", None):
        is_bin = [False] * X.shape[1]
    else:
        names = [b.strip() for b in binary.split(",")] if isinstance(binary, str) else list(binary)
        missing = set(names) - set(features)
        if missing:
            raise CsvFormatError(f"binary columns not in header: {sorted(missing)}", 1)
        is_bin = [h in names for h in features]

    mean = np.zeros(X.shape[1])
    std = np.ones(X.shape[1])
    if normalize:
        for j, b in enumerate(is_bin):
            if b:
                continue
            col = X[tr, j]
            mean[j] = col.mean()
            s = col.std()
            std[j] = s if s > 0 else 1.0
        X = (X - mean) / std
    return Dataset(X, Y, tr, va, task, features, mean, std, classes, is_bin)


def make_dataset(dcfg):
    if dcfg.source == "teacher":
        rng = make_rng(dcfg.seed, STREAM_DATA)
        return gen_teacher_data(
            rng, dcfg.d_in, dcfg.d_out, dcfg.samples, dcfg.teacher_hidden, dcfg.noise, dcfg.val_fraction, dcfg.seed
        )
    return load_csv(dcfg.path, dcfg.target, dcfg.task, dcfg.binary, dcfg.normalize, dcfg.val_fraction, dcfg.seed)


# -- training ----------------------------------------------------------------


def batch_stream(ds, batch_size, seed, phase=0):
    """Minibatches over the train split; ``phase`` separates pre/post-upscale order."""
    return BatchStream(ds.X_train, ds.Y_train, batch_size, make_rng(seed, STREAM_ORDER, phase))


def train_checkpoint(spec, base, rule, ds, steps, batch_size, seed, data_meta=None):
    """Fresh μP model trained for ``steps``; returns (checkpoint, per-step losses)."""
    model = init_weights(MlpModel.zeros(spec), base, make_rng(seed, STREAM_INIT), m=rule.m)
    hp = resolve_hparams(spec, base, rule.m, rule.decay_mode)
    trainer = Trainer(model, rule, hp, ds.loss)
    stream = batch_stream(ds, batch_size, seed)
    losses = [trainer.step(*stream.next()) for _ in range(steps)]
    meta = make_meta(base, rule.m, [{"op": "init", "seed": int(seed)}], data_meta, rule=rule.to_dict())
    return Checkpoint(model, trainer.state, hp, meta), losses


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)
    trajectories: list = field(default_factory=list)
    timings: list = field(default_factory=list)
    config: dict = None

    ROW_COLUMNS = (
        "base_width",
        "width",
        "lr",
        "noise",
        "seed",
        "steps_completed",
        "diverged",
        "final_train_loss",
        "final_val_loss",
    )
    TRAJ_COLUMNS = ("base_width", "lr", "noise", "seed", "step", "train_loss")

    def argmins(self, metric="train_loss", fixed_lr=None, fixed_noise=None):
        """Per base width, the lr minimizing the seed-mean metric at ``fixed_noise``
        and the noise minimizing it at ``fixed_lr``. Diverged cells count as +inf;
        ties go to the smaller value.
        """
        out = {}
        for bw, mean in self.cell_means(metric).items():
            entry = {}
            if fixed_noise is not None:
                lrs = sorted(c[0] for c in mean if c[1] == fixed_noise)
                entry["lr"] = min(lrs, key=lambda lr: (mean[(lr, fixed_noise)], lr)) if lrs else None
                entry["lr_index"] = lrs.index(entry["lr"]) if lrs else None
            if fixed_lr is not None:
                ns = sorted(c[1] for c in mean if c[0] == fixed_lr)
                entry["noise"] = min(ns, key=lambda s: (mean[(fixed_lr, s)], s)) if ns else None
                entry["noise_index"] = ns.index(entry["noise"]) if ns else None
            out[bw] = entry
        return out

    def cell_means(self, metric="train_loss"):
        """{base_width: {(lr, noise): seed-mean metric}} with diverged cells as +inf."""
        key = "final_" + metric
        out = {}
        for r in self.rows:
            v = r[key]
            v = math.inf if v is None or not math.isfinite(v) else v
            out.setdefault(r["base_width"], {}).setdefault((r["lr"], r["noise"]), []).append(v)
        return {bw: {c: float(np.mean(v)) for c, v in cells.items()} for bw, cells in sorted(out.items())}

    def argmin_cells(self, metric="train_loss"):
        """Per base width, the (lr, noise) cell with the smallest seed-mean metric
        and its grid indices; ties go to the smaller lr, then the smaller noise.
        """
        out = {}
        for bw, mean in self.cell_means(metric).items():
            lr, noise = min(mean, key=lambda c: (mean[c], c))
            lrs = sorted({c[0] for c in mean})
            noises = sorted({c[1] for c in mean})
            out[bw] = {"lr": lr, "noise": noise, "lr_index": lrs.index(lr), "noise_index": noises.index(noise)}
        return out


def _sweep_cells(s):
    if s.grid == "product":
        return [(lr, noise) for lr in s.lr_grid for noise in s.noise_grid]
    cells = [(lr, s.fixed_noise) for lr in s.lr_grid]
    cells += [(s.fixed_lr, noise) for noise in s.noise_grid if (s.fixed_lr, noise) not in cells]
    return cells


SWEEP_PROBE = 8


def _run_cell(args):
    cfg, ds, ckpt_bytes, base_width, seed, lr, noise = args
    start = time.perf_counter()
    ckpt = Checkpoint.from_bytes(ckpt_bytes)
    s = cfg.sweep
    up = upscale(ckpt, UpscaleConfig(k=s.k, noise_std=noise, lr=lr, seed=seed))
    probe = (ds.X_train[:SWEEP_PROBE], ds.Y_train[:SWEEP_PROBE])  # per-step log only; finals use the full split
    traj = train_upscaled(up.model, up.state, up.hp, s.steps_after, batch_stream(ds, cfg.train.batch_size, seed, 1), probe, ds.loss)
    if traj.diverged:
        final_train = final_val = math.nan
    else:
        final_train = evaluate_loss(up.model, ds.X_train, ds.Y_train, ds.loss)
        final_val = evaluate_loss(up.model, ds.X_val, ds.Y_val, ds.loss) if len(ds.val_idx) else math.nan
    row = {
        "base_width": base_width,
        "width": base_width * s.k,
        "lr": lr,
        "noise": noise,
        "seed": seed,
        "steps_completed": len(traj.rows) - 1,
        "diverged": traj.diverged,
        "final_train_loss": final_train,
        "final_val_loss": final_val,
    }
    steps = [
        {"base_width": base_width, "lr": lr, "noise": noise, "seed": seed, "step": r["step"], "train_loss": r["train_loss"]}
        for r in traj.rows[1:]
    ]
    return row, steps, time.perf_counter() - start


def run_transfer_sweep(cfg, ds=None):
    """Pretrain at each base width, then upscale by k and train every grid cell.

    Cells are independent and may run in worker processes; results are merged
    in grid order, so output does not depend on the worker count.
    """
    cfg.validate_sweep()
    s = cfg.sweep
    ds = make_dataset(cfg.data) if ds is None else ds
    rule = cfg.optim.update_rule()
    depth = len(cfg.model.hidden)
    jobs = []
    for bw in s.base_widths:
        spec = cfg.model.spec(ds.d_in, ds.d_out, (bw,) * depth)
        for seed in cfg.train.seeds:
            ckpt, _ = train_checkpoint(spec, cfg.base, rule, ds, s.steps_before, cfg.train.batch_size, seed)
            blob = ckpt.to_bytes()
            jobs += [(cfg, ds, blob, bw, seed, lr, noise) for lr, noise in _sweep_cells(s)]
    if s.workers > 1:
        with ProcessPoolExecutor(max_workers=s.workers) as ex:
            outputs = list(ex.map(_run_cell, jobs))
    else:
        outputs = [_run_cell(j) for j in jobs]
    result = SweepResult(config=config_dict(cfg))
    for (row, steps, wall), job in zip(outputs, jobs):
        result.rows.append(row)
        result.trajectories += steps
        result.timings.append({"base_width": job[3], "seed": job[4], "lr": job[5], "noise": job[6], "seconds": wall})
    return result


def config_dict(cfg):
    return asdict(cfg)


def emit_results(result, out_dir, formats=("csv", "json"), prefix="sweep", timing=False):
    """Write the sweep as CSV and/or JSON; returns the written paths.

    Wall times go to a separate ``<prefix>_timing.json`` (only when asked) so
    the result files stay byte-identical across reruns.
    """
    unknown = set(formats) - {"csv", "json"}
    if unknown:
        raise InvalidParameterError(f"unknown output format(s): {sorted(unknown)}")
    paths = []
    s = (result.config or {}).get("sweep", {})
    argmins = result.argmins(s.get("metric", "train_loss"), s.get("fixed_lr"), s.get("fixed_noise")) if result.rows else {}
    if "csv" in formats:
        p = os.path.join(out_dir, f"{prefix}.csv")
        write_csv(p, result.ROW_COLUMNS, result.rows)
        q = os.path.join(out_dir, f"{prefix}_trajectories.csv")
        write_csv(q, result.TRAJ_COLUMNS, result.trajectories)
        paths += [p, q]
    if "json" in formats:
        p = os.path.join(out_dir, f"{prefix}.json")
        payload = {
            "columns": list(result.ROW_COLUMNS),
            "rows": result.rows,
            "trajectories": result.trajectories,
            "argmins": {str(k): v for k, v in argmins.items()},
            "argmin_cells": {str(k): v for k, v in (result.argmin_cells(s.get("metric", "train_loss")) if result.rows else {}).items()},
            "config": result.config,
        }
        write_json(p, payload)
        paths.append(p)
    if timing:
        p = os.path.join(out_dir, f"{prefix}_timing.json")
        write_json(p, result.timings)
        paths.append(p)
    return paths

