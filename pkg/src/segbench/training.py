"""Training protocol (BCE + Adam, best-on-validation checkpoint) and
cross-validated evaluation."""
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import GENERATORS, crop_patches, make_folds, with_noise
from .errors import ConfigError, ShapeError, TrainingDiverged
from .metrics import MetricsReport, evaluate, mean_defined
from .models import build_model


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    batch: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    crop: int = 32
    crops_per_image: int = 4
    threshold: float = 0.5

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        if self.batch < 1 or self.crop < 1 or self.crops_per_image < 1:
            raise ConfigError("batch, crop and crops_per_image must be positive")
        if not 0 <= self.threshold <= 1:
            raise ConfigError("threshold must lie in [0, 1]")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainRecord:
    train_loss: list
    val_loss: list
    best_epoch: int
    best_params: dict
    wall_seconds: float
    steps: int = 0


def bce_loss(pred, target):
    """Mean binary cross-entropy of probabilities against {0, 1} targets."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise ShapeError(f"prediction {pred.shape} and target {t.shape} differ")
    p = ad.clamp(pred)
    one_minus = ad.add(ad.mul(p, -1.0), 1.0)
    ll = ad.add(ad.mul(ad.log(p), Tensor(t)), ad.mul(ad.log(one_minus), Tensor(1.0 - t)))
    return ad.mul(ad.mean(ll), -1.0)


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def fresh(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state, t=None, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, applied in place to the arrays in ``params``."""
    t = state.t + 1 if t is None else t
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    state.t = t
    return params, state


class Adam:
    def __init__(self, tensors, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.tensors = list(tensors)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState.fresh([t.data for t in self.tensors])

    def step(self):
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in self.tensors]
        adam_step([t.data for t in self.tensors], grads, self.state, None, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for t in self.tensors:
            t.grad = None


def predict(model, images, batch=8):
    """Probability maps for [N,C,H,W] numpy images, in batches, without a tape."""
    out = []
    with ad.no_grad():
        for i in range(0, len(images), batch):
            out.append(model(Tensor(images[i : i + batch])).data)
    return np.concatenate(out)


def _loss_value(model, x, y, batch):
    total = 0.0
    with ad.no_grad():
        for i in range(0, len(x), batch):
            total += bce_loss(model(Tensor(x[i : i + batch])), y[i : i + batch]).item() * len(x[i : i + batch])
    return total / len(x)


def train(model, train_set, val_set, config, fold=None):
    """Minibatch BCE + Adam; keeps the parameters with the lowest validation loss.

    ``val_set=None`` scores the training set in the validation slot.
    """
    config.validate()
    if len(train_set) == 0 or (val_set is not None and len(val_set) == 0):
        raise ConfigError("training and validation sets must be non-empty")
    x, y = train_set.stacked()
    vx, vy = (x, y) if val_set is None else val_set.stacked()
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.parameters(), config.lr, config.beta1, config.beta2, config.eps)
    train_loss, val_loss = [], []
    best, best_epoch, best_params = math.inf, 0, model.state_dict()
    start = time.perf_counter()
    for epoch in range(config.epochs):
        order = rng.permutation(len(x))
        seen, total = 0, 0.0
        for b, i in enumerate(range(0, len(x), config.batch)):
            idx = order[i : i + config.batch]
            with ad.Tape() as tape:
                loss = bce_loss(model(Tensor(x[idx])), y[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, b, value, fold)
            opt.zero_grad()
            ad.backward(loss, tape)
            opt.step()
            seen += len(idx)
            total += value * len(idx)
        train_loss.append(total / seen)
        v = _loss_value(model, vx, vy, config.batch)
        if not math.isfinite(v):
            raise TrainingDiverged(epoch, -1, v, fold)
        val_loss.append(v)
        if v < best:
            best, best_epoch, best_params = v, epoch, model.state_dict()
    return TrainRecord(train_loss, val_loss, best_epoch, best_params, time.perf_counter() - start, opt.state.t)


# --- cross-validation ----------------------------------------------------------


@dataclass
class ExperimentResult:
    arch: str
    model_config: dict
    params: int
    records: list
    fold_reports: list
    aggregate: dict
    pooled: MetricsReport
    predictions: dict = field(default_factory=dict)

    @property
    def train_seconds(self):
        return sum(r.wall_seconds for r in self.records)


def fold_seed(base_seed, fold):
    return int(np.random.SeedSequence([int(base_seed), int(fold)]).generate_state(1)[0])


def _run_fold(args):
    model_config, sample_set, fold_id, fold, train_config, base_seed = args
    seed = fold_seed(base_seed, fold_id)
    model = build_model(model_config, seed)
    train_crops = crop_patches(sample_set.subset(fold.train), train_config.crop, train_config.crops_per_image, seed)
    val_set = sample_set.subset(fold.val)
    cfg = replace(train_config, seed=seed)
    try:
        record = train(model, train_crops, val_set, cfg, fold=fold_id)
    except TrainingDiverged as e:
        if e.fold is None:
            e.fold = fold_id
        raise
    model.load_state_dict(record.best_params)
    test = sample_set.subset(fold.test)
    tx, ty = test.stacked()
    probs = predict(model, tx, train_config.batch)
    return record, probs, ty


def _threads():
    try:
        return max(1, int(os.environ.get("SEGBENCH_THREADS", "1")))
    except ValueError:
        raise ConfigError("SEGBENCH_THREADS must be an integer") from None


def cross_validate(model_config, sample_set, fold_plan, train_config, base_seed=None, threads=None):
    """Train one model per fold, evaluate its best checkpoint on the fold's test set.

    Aggregate metrics are unweighted means over folds; the pooled report scores
    the concatenated test predictions of all folds.
    """
    model_config.validate()
    train_config.validate()
    base_seed = train_config.seed if base_seed is None else base_seed
    h, w = sample_set.masks[0].shape
    model_config.check_crop(train_config.crop)
    model_config.check_crop(h, w)
    jobs = [(model_config, sample_set, f, fold, train_config, base_seed) for f, fold in enumerate(fold_plan.folds)]
    threads = _threads() if threads is None else threads
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outputs = list(pool.map(_run_fold, jobs))
    else:
        outputs = [_run_fold(j) for j in jobs]

    records, reports, predictions = [], [], {}
    pooled_p, pooled_y = [], []
    for (record, probs, ty), fold in zip(outputs, fold_plan.folds):
        records.append(record)
        reports.append(evaluate(probs, ty, train_config.threshold))
        for idx, p in zip(fold.test, probs):
            predictions[idx] = p[0]
        pooled_p.append(probs.reshape(-1))
        pooled_y.append(ty.reshape(-1))
    pooled = evaluate(np.concatenate(pooled_p), np.concatenate(pooled_y), train_config.threshold)
    aggregate = {
        key: mean_defined([getattr(r, key) for r in reports])
        for key in ("auc", "accuracy", "sensitivity", "specificity")
    }
    params = build_model(model_config).count_params()
    return ExperimentResult(model_config.arch, model_config.to_dict(), params, records, reports, aggregate, pooled, predictions)


def generate_clean(generator_config):
    """Clean SampleSet from {"kind", "seed", "size", "n_images", "params"}."""
    g = dict(generator_config)
    kind = g.pop("kind")
    if kind not in GENERATORS:
        raise ConfigError(f"unknown generator kind {kind!r}")
    params = g.pop("params", None) or {}
    return GENERATORS[kind](g["seed"], size=g["size"], n_images=g["n_images"], snr=None, **params)


def snr_sweep(model_config, generator_config, snr_list, train_config, k=5, base_seed=None):
    """Cross-validate at each SNR on one fixed clean sample set; returns [(snr, result)]."""
    snr_list = list(snr_list)
    if not snr_list:
        raise ConfigError("snr_list must be non-empty")
    if any(b <= a for a, b in zip(snr_list, snr_list[1:])):
        raise ConfigError("snr_list must be strictly ascending")
    clean = generate_clean(generator_config)
    base_seed = generator_config["seed"] if base_seed is None else base_seed
    plan = make_folds(len(clean), k, base_seed)
    table = []
    for snr in snr_list:
        noisy = with_noise(clean, snr, generator_config["seed"])
        table.append((snr, cross_validate(model_config, noisy, plan, train_config, base_seed)))
    return table
