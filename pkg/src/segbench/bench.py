"""Experiment configs, runs, sweeps and persisted reports.

A run writes, into its output directory::

    config_echo.json  metrics.csv  losses.csv  roc.csv  roc_folds.csv
    summary.md  loss_curves.svg  roc.svg  fold<k>.ckpt
    pred_<i>_input.pgm  pred_<i>_target.pgm  pred_<i>_output.pgm

Every file carries the format version and the base seed.
"""
import copy
import csv
import inspect
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field, replace

import numpy as np

from .data import GENERATORS, load_samples, make_folds, save_samples, to_uint8, with_noise, write_pgm
from .errors import ConfigError, FormatError, OutputExists
from .models import ARCHS, ModelConfig, build_model, save_checkpoint
from .plots import render_loss_curves, render_plots, render_roc, summary_row, write_summary
from .training import TrainConfig, cross_validate

FORMAT_VERSION = 1
METRICS_COLUMNS = ("fold", "arch", "auc", "accuracy", "sensitivity", "specificity", "params", "train_seconds")
LOSSES_COLUMNS = ("fold", "epoch", "split", "loss")
ROC_COLUMNS = ("threshold", "fpr", "tpr")
SWEEP_COLUMNS = ("axis", "value") + METRICS_COLUMNS[1:]
N_PREDICTIONS = 3


@dataclass
class DatasetConfig:
    kind: str = "airy"
    n_images: int = 10
    size: int = 64
    snr: "float | None" = 10.0
    path: "str | None" = None
    params: dict = field(default_factory=dict)


@dataclass
class SweepConfig:
    axis: str
    values: list


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig
    model: ModelConfig
    train: TrainConfig
    sweep: "SweepConfig | None" = None
    out_dir: "str | None" = None
    base_seed: int = 0
    folds: int = 5
    format_version: int = FORMAT_VERSION


# --- parsing -----------------------------------------------------------------------

_INT, _FLOAT, _STR, _OPT_FLOAT, _OPT_STR = "int", "float", "str", "float|null", "str|null"

_DATASET_FIELDS = {"kind": _STR, "n_images": _INT, "size": _INT, "snr": _OPT_FLOAT, "path": _OPT_STR, "params": "object"}
_MODEL_FIELDS = {
    "arch": _STR,
    "in_channels": _INT,
    "features": _INT,
    "depth": _INT,
    "patch": _INT,
    "heads": _INT,
    "state_dim": _INT,
    "pad_mode": _STR,
}
_TRAIN_FIELDS = {
    "epochs": _INT,
    "lr": _FLOAT,
    "batch": _INT,
    "beta1": _FLOAT,
    "beta2": _FLOAT,
    "eps": _FLOAT,
    "seed": _INT,
    "crop": _INT,
    "crops_per_image": _INT,
    "threshold": _FLOAT,
}
_TOP_FIELDS = {
    "format_version": _INT,
    "base_seed": _INT,
    "folds": _INT,
    "out_dir": _OPT_STR,
    "dataset": "object",
    "model": "object",
    "train": "object",
    "sweep": "object|null",
}


def _typed(value, kind, path):
    ok = {
        _INT: isinstance(value, int) and not isinstance(value, bool),
        _FLOAT: isinstance(value, (int, float)) and not isinstance(value, bool),
        _STR: isinstance(value, str),
        _OPT_FLOAT: value is None or (isinstance(value, (int, float)) and not isinstance(value, bool)),
        _OPT_STR: value is None or isinstance(value, str),
        "object": isinstance(value, dict),
        "object|null": value is None or isinstance(value, dict),
    }[kind]
    if not ok:
        raise ConfigError(f"{path}: expected {kind}, got {type(value).__name__}")
    if kind in (_FLOAT, _OPT_FLOAT) and value is not None:
        return float(value)
    return value


def _section(d, schema, path):
    if not isinstance(d, dict):
        raise ConfigError(f"{path or '/'}: expected object")
    for key in d:
        if key not in schema:
            raise ConfigError(f"{path}/{key}: unknown key")
    return {key: _typed(d[key], schema[key], f"{path}/{key}") for key in d}


def _jsonable(v):
    return [_jsonable(x) for x in v] if isinstance(v, (list, tuple)) else v


def _check_like(value, default, path):
    """Generator params must match the shape of their defaults: number or list of numbers."""
    number = (int, float)
    if isinstance(default, tuple):
        if not isinstance(value, list) or len(value) != len(default):
            raise ConfigError(f"{path}: expected a list of {len(default)} numbers")
        for i, x in enumerate(value):
            if not isinstance(x, number) or isinstance(x, bool):
                raise ConfigError(f"{path}/{i}: expected a number")
    elif isinstance(default, number) and (not isinstance(value, number) or isinstance(value, bool)):
        raise ConfigError(f"{path}: expected a number")


def _wrap_constraint(path, fn):
    try:
        return fn()
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from None


def config_from_dict(raw):
    top = _section(raw, _TOP_FIELDS, "")
    if top.get("format_version", FORMAT_VERSION) != FORMAT_VERSION:
        raise ConfigError(f"/format_version: unsupported version {top['format_version']}")

    ds = DatasetConfig(**_section(top.get("dataset", {}), _DATASET_FIELDS, "/dataset"))
    if ds.kind == "dir":
        if not ds.path:
            raise ConfigError("/dataset/path: required when kind is 'dir'")
        if ds.params:
            raise ConfigError("/dataset/params: not accepted for kind 'dir'")
    elif ds.kind in GENERATORS:
        sig = inspect.signature(GENERATORS[ds.kind]).parameters
        defaults = {k: p.default for k, p in sig.items() if k not in ("seed", "size", "n_images", "snr")}
        for key in ds.params:
            if key not in defaults:
                raise ConfigError(f"/dataset/params/{key}: unknown key for generator {ds.kind!r}")
            _check_like(ds.params[key], defaults[key], f"/dataset/params/{key}")
        ds.params = {k: _jsonable(ds.params.get(k, v)) for k, v in defaults.items()}
        if ds.snr is not None and not ds.snr > 0:
            raise ConfigError("/dataset/snr: must be positive or null")
        if ds.size < 32:
            raise ConfigError("/dataset/size: must be >= 32")
    else:
        raise ConfigError(f"/dataset/kind: unknown dataset kind {ds.kind!r}")

    train = TrainConfig.from_dict(_section(top.get("train", {}), _TRAIN_FIELDS, "/train"))
    _wrap_constraint("/train", train.validate)

    model_raw = _section(top.get("model", {}), _MODEL_FIELDS, "/model")
    if "arch" not in model_raw:
        raise ConfigError("/model/arch: required")
    model_raw.setdefault("patch", max(1, train.crop // 4))
    model = ModelConfig.from_dict(model_raw)
    _wrap_constraint("/model", model.validate)
    _wrap_constraint("/model", lambda: model.check_crop(train.crop))

    sweep = None
    if top.get("sweep") is not None:
        sw = top["sweep"]
        for key in sw:
            if key not in ("axis", "values"):
                raise ConfigError(f"/sweep/{key}: unknown key")
        sweep = parse_sweep(sw.get("axis"), sw.get("values"))
        if sweep.axis == "snr" and ds.kind == "dir":
            raise ConfigError("/sweep/axis: snr sweeps need a synthetic dataset")

    folds = top.get("folds", 5)
    if folds < 3:
        raise ConfigError("/folds: must be >= 3")
    if ds.kind != "dir" and ds.n_images < folds:
        raise ConfigError(f"/dataset/n_images: {ds.n_images} images cannot fill {folds} folds")
    if ds.kind != "dir" and ds.size < train.crop:
        raise ConfigError(f"/train/crop: crop {train.crop} exceeds image size {ds.size}")
    return ExperimentConfig(
        dataset=ds,
        model=model,
        train=train,
        sweep=sweep,
        out_dir=top.get("out_dir"),
        base_seed=top.get("base_seed", 0),
        folds=folds,
    )


def parse_sweep(axis, values):
    if axis not in ("depth", "snr"):
        raise ConfigError(f"/sweep/axis: expected 'depth' or 'snr', got {axis!r}")
    if not isinstance(values, list) or not values:
        raise ConfigError("/sweep/values: expected a non-empty list")
    out = []
    for i, v in enumerate(values):
        kind = _INT if axis == "depth" else _FLOAT
        out.append(_typed(v, kind, f"/sweep/values/{i}"))
    if axis == "snr" and any(not v > 0 for v in out):
        raise ConfigError("/sweep/values: snr values must be positive")
    if any(b <= a for a, b in zip(out, out[1:])):
        raise ConfigError("/sweep/values: must be strictly ascending")
    return SweepConfig(axis, out)


def parse_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON ({e})") from None
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}") from None
    return config_from_dict(raw)


def config_to_dict(cfg):
    return {
        "format_version": cfg.format_version,
        "base_seed": cfg.base_seed,
        "folds": cfg.folds,
        "out_dir": cfg.out_dir,
        "dataset": {
            "kind": cfg.dataset.kind,
            "n_images": cfg.dataset.n_images,
            "size": cfg.dataset.size,
            "snr": cfg.dataset.snr,
            "path": cfg.dataset.path,
            "params": copy.deepcopy(cfg.dataset.params),
        },
        "model": cfg.model.to_dict(),
        "train": cfg.train.to_dict(),
        "sweep": None if cfg.sweep is None else {"axis": cfg.sweep.axis, "values": list(cfg.sweep.values)},
    }


def serialize_config(cfg):
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"


# --- file output -------------------------------------------------------------------


def _stamp(cfg):
    return f"segbench format_version={FORMAT_VERSION} base_seed={cfg.base_seed}"


def _atomic_write(path, data):
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", prefix=".tmp-")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _num(v):
    if v is None:
        return "n/a"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


def _csv(stamp, columns, rows):
    buf = io.StringIO()
    buf.write(f"# {stamp}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([r[c] if isinstance(r[c], str) else _num(r[c]) for c in columns])
    return buf.getvalue()


def read_csv(path):
    with open(path) as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


def _parse_num(s):
    return None if s == "n/a" else float(s)


def prepare_out_dir(out_dir, force):
    if os.path.exists(out_dir) and os.listdir(out_dir) and not force:
        raise OutputExists(f"{out_dir} already exists; pass --force to overwrite")
    os.makedirs(out_dir, exist_ok=True)


def metrics_rows(result):
    rows = []
    for f, (rep, rec) in enumerate(zip(result.fold_reports, result.records)):
        rows.append(
            dict(
                fold=str(f),
                arch=result.arch,
                auc=rep.auc,
                accuracy=rep.accuracy,
                sensitivity=rep.sensitivity,
                specificity=rep.specificity,
                params=result.params,
                train_seconds=rec.wall_seconds,
            )
        )
    rows.append(dict(fold="mean", arch=result.arch, params=result.params, train_seconds=result.train_seconds, **result.aggregate))
    return rows


def write_result(result, cfg, out_dir, sample_set=None):
    stamp = _stamp(cfg)
    files = {}
    files["config_echo.json"] = serialize_config(cfg)
    files["metrics.csv"] = _csv(stamp, METRICS_COLUMNS, metrics_rows(result))
    loss_rows = []
    for f, rec in enumerate(result.records):
        for split, series in (("train", rec.train_loss), ("val", rec.val_loss)):
            for e, v in enumerate(series):
                loss_rows.append(dict(fold=str(f), epoch=e, split=split, loss=v))
    files["losses.csv"] = _csv(stamp, LOSSES_COLUMNS, loss_rows)
    files["roc.csv"] = _csv(stamp, ROC_COLUMNS, [dict(threshold=t, fpr=x, tpr=y) for x, y, t in result.pooled.roc])
    fold_roc = [
        dict(fold=str(f), threshold=t, fpr=x, tpr=y) for f, rep in enumerate(result.fold_reports) for x, y, t in rep.roc
    ]
    files["roc_folds.csv"] = _csv(stamp, ("fold",) + ROC_COLUMNS, fold_roc)
    files["summary.md"] = write_summary([summary_row(result)], stamp)
    files.update(render_plots(result, stamp))
    for name, text in files.items():
        _atomic_write(os.path.join(out_dir, name), text)

    for f, rec in enumerate(result.records):
        model = build_model(ModelConfig.from_dict(result.model_config))
        tmp = os.path.join(out_dir, f".fold{f}.ckpt.tmp")
        save_checkpoint(model, tmp, rec.best_params, extra={"base_seed": cfg.base_seed, "fold": f})
        os.replace(tmp, os.path.join(out_dir, f"fold{f}.ckpt"))

    if sample_set is not None:
        for i, idx in enumerate(sorted(result.predictions)[:N_PREDICTIONS]):
            triplet = {
                "input": to_uint8(sample_set.images[idx][0]),
                "target": np.where(sample_set.masks[idx] > 0, 255, 0),
                "output": to_uint8(result.predictions[idx]),
            }
            for role, arr in triplet.items():
                path = os.path.join(out_dir, f"pred_{i}_{role}.pgm")
                tmp = path + ".tmp"
                write_pgm(tmp, arr, f"{stamp} sample={idx} role={role}")
                os.replace(tmp, path)


# --- execution -------------------------------------------------------------------


def load_dataset(cfg):
    ds = cfg.dataset
    if ds.kind == "dir":
        return load_samples(ds.path)
    params = {k: tuple(v) if isinstance(v, list) else v for k, v in ds.params.items()}
    return GENERATORS[ds.kind](cfg.base_seed, size=ds.size, n_images=ds.n_images, snr=ds.snr, **params)


def _experiment(cfg, sample_set):
    plan = make_folds(len(sample_set), cfg.folds, cfg.base_seed)
    return cross_validate(cfg.model, sample_set, plan, cfg.train, cfg.base_seed)


def run(cfg, out_dir=None, force=False):
    """Execute a config and persist its reports; returns the result (a list for sweeps)."""
    out_dir = out_dir or cfg.out_dir
    if not out_dir:
        raise ConfigError("/out_dir: no output directory given")
    if cfg.sweep is not None:
        return run_sweep(cfg, out_dir, force)
    if os.path.exists(out_dir) and os.listdir(out_dir) and not force:
        raise OutputExists(f"{out_dir} already exists; pass --force to overwrite")
    sample_set = load_dataset(cfg)
    prepare_out_dir(out_dir, force)
    result = _experiment(cfg, sample_set)
    write_result(result, cfg, out_dir, sample_set)
    return result


def run_sweep(cfg, out_dir, force=False):
    """One full run per sweep value in ``<out_dir>/<axis>-<value>/`` plus sweep.csv and summary.md."""
    prepare_out_dir(out_dir, force)
    axis = cfg.sweep.axis
    if axis == "snr":
        clean = load_dataset(replace(cfg, dataset=replace(cfg.dataset, snr=None)))
    else:
        base_set = load_dataset(cfg)
    outcomes = []
    for value in cfg.sweep.values:
        if axis == "depth":
            point_cfg = replace(cfg, sweep=None, model=replace(cfg.model, depth=value))
            _wrap_constraint("/sweep/values", point_cfg.model.validate)
            _wrap_constraint("/sweep/values", lambda: point_cfg.model.check_crop(cfg.train.crop))
            sample_set = base_set
        else:
            point_cfg = replace(cfg, sweep=None, dataset=replace(cfg.dataset, snr=value))
            sample_set = with_noise(clean, value, cfg.base_seed)
        result = _experiment(point_cfg, sample_set)
        sub = os.path.join(out_dir, f"{axis}-{_num(value)}")
        os.makedirs(sub, exist_ok=True)
        write_result(result, point_cfg, sub, sample_set)
        outcomes.append((value, result))
    write_sweep(cfg, outcomes, out_dir)
    return outcomes


def write_sweep(cfg, outcomes, out_dir):
    stamp = _stamp(cfg)
    axis = cfg.sweep.axis
    rows = []
    summary = []
    for value, result in outcomes:
        row = summary_row(result, label=f"{result.arch} {axis}={_num(value)}")
        rows.append(dict(axis=axis, value=value, **{k: row[k] for k in METRICS_COLUMNS[1:]}))
        summary.append(row)
    _atomic_write(os.path.join(out_dir, "sweep.csv"), _csv(stamp, SWEEP_COLUMNS, rows))
    _atomic_write(os.path.join(out_dir, "config_echo.json"), serialize_config(cfg))
    _atomic_write(os.path.join(out_dir, "summary.md"), write_summary(summary, stamp))


def report(in_dir):
    """Re-render summary.md and the SVG plots from the persisted CSVs."""
    echo = os.path.join(in_dir, "config_echo.json")
    if not os.path.exists(echo):
        raise FormatError(f"{in_dir}: no config_echo.json")
    cfg = parse_config(echo)
    stamp = _stamp(cfg)
    if os.path.exists(os.path.join(in_dir, "sweep.csv")):
        summary = []
        for r in read_csv(os.path.join(in_dir, "sweep.csv")):
            row = {k: _parse_num(r[k]) for k in ("auc", "accuracy", "sensitivity", "specificity", "params", "train_seconds")}
            row.update(arch=r["arch"], label=f"{r['arch']} {r['axis']}={r['value']}")
            summary.append(row)
        _atomic_write(os.path.join(in_dir, "summary.md"), write_summary(summary, stamp))
        for value in cfg.sweep.values:
            sub = os.path.join(in_dir, f"{cfg.sweep.axis}-{_num(value)}")
            if os.path.isdir(sub):
                report(sub)
        return

    metrics = read_csv(os.path.join(in_dir, "metrics.csv"))
    mean = next((r for r in metrics if r["fold"] == "mean"), None)
    if mean is None:
        raise FormatError(f"{in_dir}/metrics.csv: no 'mean' row")
    row = {k: _parse_num(mean[k]) for k in ("auc", "accuracy", "sensitivity", "specificity", "params", "train_seconds")}
    row.update(arch=mean["arch"], label=mean["arch"])
    _atomic_write(os.path.join(in_dir, "summary.md"), write_summary([row], stamp))

    train, val = {}, {}
    for r in read_csv(os.path.join(in_dir, "losses.csv")):
        target = train if r["split"] == "train" else val
        target.setdefault(int(r["fold"]), []).append(float(r["loss"]))
    _atomic_write(os.path.join(in_dir, "loss_curves.svg"), render_loss_curves(train, val, stamp))
    roc = [(float(r["fpr"]), float(r["tpr"]), float(r["threshold"])) for r in read_csv(os.path.join(in_dir, "roc.csv"))]
    _atomic_write(os.path.join(in_dir, "roc.svg"), render_roc(roc, stamp, mean["arch"]))


def generate_dataset(kind, seed, n, size, out_dir, snr=None, force=False):
    """Write a synthetic PGM dataset (images/ + masks/)."""
    if kind not in GENERATORS:
        raise ConfigError(f"unknown generator kind {kind!r}; expected one of {sorted(GENERATORS)}")
    prepare_out_dir(out_dir, force)
    sample_set = GENERATORS[kind](seed, size=size, n_images=n, snr=snr)
    save_samples(sample_set, out_dir, comment=f"segbench format_version={FORMAT_VERSION} base_seed={seed} kind={kind}")
    return sample_set


__all__ = [
    "ARCHS",
    "DatasetConfig",
    "ExperimentConfig",
    "SweepConfig",
    "config_from_dict",
    "config_to_dict",
    "generate_dataset",
    "parse_config",
    "parse_sweep",
    "read_csv",
    "report",
    "run",
    "run_sweep",
    "serialize_config",
    "write_result",
]
