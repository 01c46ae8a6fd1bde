"""FE and FT experiment runners and the record they emit."""
from __future__ import annotations

import dataclasses
import datetime as _dt
import enum
import json
import logging
import math
import time
import uuid
from dataclasses import dataclass, field

import numpy as np

from .backbone import (
    cross_entropy,
    freeze_prefix,
    logits,
    loss_and_grads,
    reinit_last_two,
)
from .errors import ConfigError, ShapeError, TradeoffError
from .fne import DEFAULT_THRESHOLDS, build_fne
from .footprint import EU27_2020_G_PER_KWH, ConstantSource, PowerSampler, co2_of, integrate_energy
from .metrics import balanced_accuracy
from .svm import predict, train_linear_svm
from .tasks import default_crop_side, ten_crop_batch

log = logging.getLogger(__name__)

FT_FRACTIONS = (0.25, 0.5, 0.75)
FT_LEARNING_RATES = (0.01, 0.001)
FT_WEIGHT_DECAYS = (0.001, 0.0001)
FT_MOMENTA = (0.75, 0.9)
FE_FRACTIONS = (0.25, 0.5, 0.75, 1.0)


class Status(str, enum.Enum):
    COMPLETED = "completed"
    TIMEOUT = "timeout"
    FAILED = "failed"


@dataclass(frozen=True)
class FtConfig:
    frozen_fraction: float = 0.75
    learning_rate: float = 0.001
    weight_decay: float = 0.0001
    momentum: float = 0.9
    batch_size: int = 64
    min_epochs: int = 10
    max_epochs: int = 25
    patience: float = 3
    seed: int = 0
    crop: int | None = None
    initializer: str = "he_uniform"
    strict: bool = False

    def __post_init__(self):
        if not 0 < self.frozen_fraction <= 1:
            raise ConfigError("frozen_fraction must lie in (0, 1]")
        if self.learning_rate < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("learning_rate/weight_decay must be >= 0 and momentum in [0, 1)")
        if self.batch_size < 1 or self.min_epochs < 1 or self.max_epochs < self.min_epochs:
            raise ConfigError("need batch_size >= 1 and 1 <= min_epochs <= max_epochs")
        if self.strict and (
            self.frozen_fraction not in FT_FRACTIONS
            or self.learning_rate not in FT_LEARNING_RATES
            or self.weight_decay not in FT_WEIGHT_DECAYS
            or self.momentum not in FT_MOMENTA
        ):
            raise ConfigError("strict FtConfig values must come from the search grid")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d.pop("strict")
        if math.isinf(d["patience"]):
            d["patience"] = "inf"
        return d


@dataclass(frozen=True)
class FeConfig:
    extract_fraction: float = 0.5
    thresholds: tuple = DEFAULT_THRESHOLDS
    C: float = 1.0
    tol: float = 1e-3
    max_iter: int = 1000
    seed: int = 0
    crop: int | None = None
    strict: bool = False

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(float(v) for v in self.thresholds))
        if not 0 < self.extract_fraction <= 1:
            raise ConfigError("extract_fraction must lie in (0, 1]")
        lo, hi = self.thresholds
        if not lo < hi:
            raise ConfigError("thresholds must satisfy lo < hi")
        if self.C <= 0 or self.tol <= 0 or self.max_iter < 1:
            raise ConfigError("C and tol must be positive, max_iter >= 1")
        if self.strict and self.extract_fraction not in FE_FRACTIONS:
            raise ConfigError("strict FeConfig fraction must come from the search grid")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d.pop("strict")
        d["thresholds"] = list(self.thresholds)
        return d


def config_from_dict(approach, d):
    d = dict(d)
    if approach == "FT":
        if d.get("patience") == "inf":
            d["patience"] = math.inf
        return FtConfig(**d)
    if approach == "FE":
        return FeConfig(**d)
    raise ConfigError(f"unknown approach {approach!r}")


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class ExperimentRecord:
    id: str
    approach: str
    source_tag: str
    task: str
    config: dict
    seed: int
    v_acc: float | None
    t_acc: float | None
    overfit_gap: float | None
    wall_time_hours: float
    energy_kwh: float
    e_co2_kg: float
    p_avg_watts: float
    epochs_run: int | None
    status: str
    started_at: str
    finished_at: str
    backbone_id: str = ""
    intensity_g_per_kwh: float = EU27_2020_G_PER_KWH
    power_source: str = "none"
    key: str = ""
    ic: int | None = None
    subset: int | None = None
    phase: str = "search"
    plan_index: int | None = None
    error: str | None = None
    meta: dict = field(default_factory=dict)

    VOLATILE = ("id", "started_at", "finished_at")

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=False, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def stable_view(self):
        """Every field except id and timestamps."""
        d = self.to_dict()
        for k in self.VOLATILE:
            d.pop(k)
        return d


# --------------------------------------------------------------------------
# early stopping


@dataclass(frozen=True)
class EarlyStopState:
    best_val_loss: float = math.inf
    epochs_since_improvement: int = 0
    epoch: int = 0


def early_stop_decision(state, new_val_loss, min_epochs=10, max_epochs=25, patience=3):
    """Fold one epoch's validation loss into the state.

    Only a strictly lower loss counts as improvement. Returns
    ``("stop" | "continue", new_state)``.
    """
    epoch = state.epoch + 1
    if new_val_loss < state.best_val_loss:
        new = EarlyStopState(new_val_loss, 0, epoch)
    else:
        new = EarlyStopState(state.best_val_loss, state.epochs_since_improvement + 1, epoch)
    stop = (epoch >= min_epochs and new.epochs_since_improvement >= patience) or epoch >= max_epochs
    return ("stop" if stop else "continue"), new


# --------------------------------------------------------------------------
# crop voting


def vote(labels, scores):
    """Majority vote over crops for a batch: ``labels`` (N, 10), ``scores`` (N, 10, K)."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    n, _, k = scores.shape
    counts = np.zeros((n, k), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(n), labels.shape[1]), labels.ravel()), 1)
    summed = scores.sum(axis=1)
    top = counts == counts.max(axis=1, keepdims=True)
    return np.where(top, summed, -np.inf).argmax(axis=1)


def aggregate_crops(per_crop):
    """Final label from 10 ``(label, score_vector)`` pairs."""
    if len(per_crop) != 10:
        raise ShapeError(f"expected 10 crop predictions, got {len(per_crop)}")
    labels = np.array([[lab for lab, _ in per_crop]])
    scores = np.array([[np.asarray(s, dtype=np.float64) for _, s in per_crop]])
    return int(vote(labels, scores)[0])


# --------------------------------------------------------------------------
# helpers shared by both runners


class _Timeout(Exception):
    pass


class _Diverged(Exception):
    pass


class _Run:
    """Clock, deadline and power sampling for one experiment."""

    def __init__(self, sampler, time_limit, clock):
        self.clock = clock
        if sampler is None:
            sampler = PowerSampler(ConstantSource(0.0), clock=clock)
            self.source_name = "none"
        elif not isinstance(sampler, PowerSampler):
            sampler = PowerSampler(sampler, clock=clock)
            self.source_name = getattr(sampler.source, "name", type(sampler.source).__name__)
        else:
            self.source_name = getattr(sampler.source, "name", type(sampler.source).__name__)
        self.sampler = sampler
        self.time_limit = time_limit
        self.started_at = _now()
        self.t0 = clock()
        sampler.start()

    def elapsed_hours(self):
        return (self.clock() - self.t0) / 3600.0

    def check(self):
        if self.time_limit is not None and self.elapsed_hours() > self.time_limit:
            raise _Timeout()

    def finish(self, status):
        hours = self.elapsed_hours()
        samples = self.sampler.stop()
        kwh, p_avg, _ = integrate_energy(samples)
        if status == Status.TIMEOUT:
            hours = self.time_limit
        return hours, kwh, p_avg


def _crop_side(b, ds, crop):
    side = crop or default_crop_side(ds.image_shape)
    if b.input_shape != (side, side, ds.image_shape[2]):
        raise ShapeError(f"backbone input {b.input_shape} does not match crops of {side}x{side}x{ds.image_shape[2]}")
    return side


def _split_crops(ds, split, side):
    images, y = ds.arrays(split)
    if len(images) == 0:
        return np.zeros((0, side, side, ds.image_shape[2])), y
    return ten_crop_batch(images, side), y


def _vote_accuracy(crop_labels, crop_scores, y, n_classes):
    if len(y) == 0:
        return None
    final = vote(crop_labels.reshape(len(y), 10), crop_scores.reshape(len(y), 10, -1))
    return balanced_accuracy(y, final, n_classes)


def _record(approach, b, ds, cfg, run, status, v_acc, t_acc, epochs, intensity, error=None, meta=None):
    hours, kwh, p_avg = run.finish(status)
    gap = None if v_acc is None or t_acc is None else v_acc - t_acc
    return ExperimentRecord(
        id=uuid.uuid4().hex,
        approach=approach,
        source_tag=b.source_tag,
        task=ds.name,
        config=cfg.to_dict(),
        seed=cfg.seed,
        v_acc=v_acc,
        t_acc=t_acc,
        overfit_gap=gap,
        wall_time_hours=hours,
        energy_kwh=kwh,
        e_co2_kg=co2_of(kwh, intensity),
        p_avg_watts=p_avg,
        epochs_run=epochs,
        status=status.value,
        started_at=run.started_at,
        finished_at=_now(),
        backbone_id=b.id,
        intensity_g_per_kwh=intensity,
        power_source=run.source_name,
        error=error,
        meta=meta or {},
    )


# --------------------------------------------------------------------------
# fine-tuning


def _batched_logits(b, x, batch=640):
    if len(x) == 0:
        return np.zeros((0, b.n_classes))
    return np.concatenate([logits(b, x[i:i + batch]) for i in range(0, len(x), batch)])


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def sgd_train(b, x, y, x_val, y_val, cfg, run=None):
    """Train the non-frozen layers of ``b`` in place with momentum SGD.

    Returns ``(epochs_run, best_params, history)``; ``best_params`` holds the
    trainable parameters from the epoch with the lowest validation loss.
    Raises ``_Timeout`` / ``_Diverged`` with the partial result attached.
    """
    rng = np.random.default_rng(cfg.seed)
    trainable = [i for i, layer in enumerate(b.layers) if not layer.frozen]
    velocity = {i: (np.zeros_like(b.layers[i].weight), np.zeros_like(b.layers[i].bias)) for i in trainable}

    def snapshot():
        return {i: (b.layers[i].weight.copy(), b.layers[i].bias.copy()) for i in trainable}

    best = snapshot()
    state = EarlyStopState()
    history = []
    y_val_crops = np.repeat(y_val, 10)
    try:
        while True:
            order = rng.permutation(len(x))
            for start in range(0, len(x), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                loss, _, grads = loss_and_grads(b, x[idx], y[idx])
                if not math.isfinite(loss):
                    raise _Diverged(f"non-finite training loss at epoch {state.epoch + 1}")
                for i, (gw, gb) in grads.items():
                    layer = b.layers[i]
                    vw, vb = velocity[i]
                    gw = gw + cfg.weight_decay * layer.weight
                    vw *= cfg.momentum
                    vw -= cfg.learning_rate * gw
                    vb *= cfg.momentum
                    vb -= cfg.learning_rate * gb
                    layer.weight += vw
                    layer.bias += vb
                if run is not None:
                    run.check()
            val_loss = cross_entropy(_batched_logits(b, x_val).astype(np.float64), y_val_crops)
            if not math.isfinite(val_loss) or not all(
                np.isfinite(b.layers[i].weight).all() for i in trainable
            ):
                raise _Diverged(f"non-finite validation loss at epoch {state.epoch + 1}")
            if val_loss < state.best_val_loss:
                best = snapshot()
            decision, state = early_stop_decision(state, val_loss, cfg.min_epochs, cfg.max_epochs, cfg.patience)
            history.append(val_loss)
            if run is not None:
                run.sampler.sample()
            if decision == "stop":
                return state.epoch, best, history
    except (_Timeout, _Diverged) as exc:
        exc.partial = (state.epoch, best, history)
        raise


def _restore(b, params):
    for i, (w, bias) in params.items():
        b.layers[i].weight = w.copy()
        b.layers[i].bias = bias.copy()


def _ft_scores(b, x):
    z = _batched_logits(b, x)
    return z.argmax(axis=1), _softmax(z.astype(np.float64))


def run_ft_experiment(b, ds, cfg, sampler=None, time_limit=24.0, clock=time.perf_counter,
                      intensity_g_per_kwh=EU27_2020_G_PER_KWH):
    """Fine-tune ``b`` on ``ds``: freeze a prefix, reinitialize the last two layers, train with SGD."""
    run = _Run(sampler, time_limit, clock)
    n_classes = len(ds.classes)
    net = reinit_last_two(freeze_prefix(b, cfg.frozen_fraction), n_classes, cfg.seed, cfg.initializer)
    side = _crop_side(net, ds, cfg.crop)
    x_tr, y_tr = _split_crops(ds, "train", side)
    y_tr = np.repeat(y_tr, 10)
    x_val, y_val = _split_crops(ds, "val", side)
    x_te, y_te = _split_crops(ds, "test", side)
    if len(y_val) == 0:
        raise ConfigError("fine-tuning needs a non-empty validation split for early stopping")
    meta = {"n_frozen": sum(layer.frozen for layer in net.layers), "reinit_seed": cfg.seed}

    status, error = Status.COMPLETED, None
    try:
        run.check()
        # divergence is detected and recorded; numpy's overflow chatter adds nothing
        with np.errstate(over="ignore", invalid="ignore"):
            epochs, best, history = sgd_train(net, x_tr, y_tr, x_val, y_val, cfg, run)
    except _Timeout as exc:
        status = Status.TIMEOUT
        epochs, best, history = exc.partial
    except _Diverged as exc:
        status, error = Status.FAILED, str(exc)
        epochs, best, history = exc.partial
    meta["val_loss_history"] = history

    if status == Status.FAILED:
        return _record("FT", b, ds, cfg, run, status, None, None, epochs, intensity_g_per_kwh, error, meta)
    _restore(net, best)
    v_acc = _vote_accuracy(*_ft_scores(net, x_val), y_val, n_classes)
    t_acc = _vote_accuracy(*_ft_scores(net, x_te), y_te, n_classes) if len(y_te) else None
    return _record("FT", b, ds, cfg, run, status, v_acc, t_acc, epochs, intensity_g_per_kwh, meta=meta)


def pretrain(b, ds, epochs=10, learning_rate=0.01, momentum=0.9, seed=0, crop=None):
    """Train every layer of ``b`` on a source task so it can stand in for a pretrained model."""
    net = b.copy()
    for layer in net.layers:
        layer.frozen = False
    if net.n_classes != len(ds.classes):
        raise ShapeError("logits width must equal the source task's class count")
    side = _crop_side(net, ds, crop)
    x_tr, y_tr = _split_crops(ds, "train", side)
    x_val, y_val = _split_crops(ds, "val", side)
    cfg = FtConfig(frozen_fraction=1.0, learning_rate=learning_rate, weight_decay=0.0, momentum=momentum,
                   min_epochs=epochs, max_epochs=epochs, patience=math.inf, seed=seed)
    sgd_train(net, x_tr, np.repeat(y_tr, 10), x_val, y_val, cfg)
    return net


# --------------------------------------------------------------------------
# feature extraction


def run_fe_experiment(b, ds, cfg, sampler=None, time_limit=24.0, clock=time.perf_counter,
                      intensity_g_per_kwh=EU27_2020_G_PER_KWH):
    """Full-network embedding + linear SVM, scored by majority vote over crops."""
    run = _Run(sampler, time_limit, clock)
    n_classes = len(ds.classes)
    side = _crop_side(b, ds, cfg.crop)
    status, error, v_acc, t_acc, meta = Status.COMPLETED, None, None, None, {}
    try:
        run.check()
        train, val, test = build_fne(b, ds, cfg.extract_fraction, cfg.thresholds, side)
        run.sampler.sample()
        run.check()
        y_tr = np.array([s.label for s in ds.train])[train.origins]
        model = train_linear_svm(train.matrix, y_tr, cfg.C, cfg.tol, cfg.max_iter,
                                 n_classes=n_classes, classes=ds.classes)
        run.sampler.sample()
        run.check()
        meta = {"n_features": train.n_features, "svm_converged": model.converged,
                "svm_iterations": model.iterations}
        _, y_val = ds.arrays("val")
        _, y_te = ds.arrays("test")
        if len(y_val):
            v_acc = _vote_accuracy(*predict(model, val.matrix), y_val, n_classes)
        if len(y_te):
            t_acc = _vote_accuracy(*predict(model, test.matrix), y_te, n_classes)
    except _Timeout:
        status = Status.TIMEOUT
    except (TradeoffError, FloatingPointError) as exc:
        status, error = Status.FAILED, f"{type(exc).__name__}: {exc}"
    return _record("FE", b, ds, cfg, run, status, v_acc, t_acc, None, intensity_g_per_kwh, error, meta)


def run_experiment(approach, b, ds, cfg, **kwargs):
    if approach == "FE":
        return run_fe_experiment(b, ds, cfg, **kwargs)
    if approach == "FT":
        return run_ft_experiment(b, ds, cfg, **kwargs)
    raise ConfigError(f"unknown approach {approach!r}")
