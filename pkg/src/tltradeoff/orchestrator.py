"""Grid search, the few-shot protocol, re-selection at reduced data, and the ledger.

Plan files are YAML or JSON::

    sources:                      # keyed by source tag (IN, P2, other)
      IN: {arch: toy, seed: 1, n_classes: 10, input_side: 14, weights: null}
    tasks:
      shapes: {synthetic: {n_classes: 3, n_train: 20, n_val: 5, n_test: 5, side: 16}}
      dogs:   {manifest: data/dogs/manifest.json}
    pairs: all                    # or [[IN, shapes], ...]
    ft_grid: default              # or {grid: default, overrides: {...}} or a list of configs
    fe_grid: default
    approaches: [FE, FT]
    seeds: [0]
    time_limit_hours: 24
    parallel_workers: 1
    power: {source: constant, watts: 100}
    intensity_g_per_kwh: 230.7
    ledger: ledger.jsonl
    fewshot: {ic_grid: [1, 2, 5, 10], n_subsets: 5, base_seed: 0}
    reselect: {task: shapes, ic_values: [5, 10], base_seed: 0}

Relative paths resolve against the plan file's directory.
"""
from __future__ import annotations

import concurrent.futures as cf
import dataclasses
import hashlib
import itertools
import json
import logging
import os
import threading
import time
import uuid
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import backbone as bb
from .errors import ConfigError, InsufficientDataError, TradeoffError
from .footprint import EU27_2020_G_PER_KWH, make_source
from .metrics import compute_drop, fewshot_curve
from .pipelines import (
    FE_FRACTIONS,
    FT_FRACTIONS,
    FT_LEARNING_RATES,
    FT_MOMENTA,
    FT_WEIGHT_DECAYS,
    ExperimentRecord,
    FeConfig,
    FtConfig,
    Status,
    config_from_dict,
    pretrain,
    run_experiment,
)
from .tasks import FewShotSpec, Overlap, load_dataset, make_fewshot_subsets, make_synthetic_task

log = logging.getLogger(__name__)

APPROACHES = ("FE", "FT")


def enumerate_grid(approach, overrides=None):
    """The search grid in fixed order: fraction-major for FT, then LR, WD, momentum."""
    overrides = overrides or {}
    if approach == "FT":
        return [
            FtConfig(frozen_fraction=f, learning_rate=lr, weight_decay=wd, momentum=m, **overrides)
            for f, lr, wd, m in itertools.product(FT_FRACTIONS, FT_LEARNING_RATES, FT_WEIGHT_DECAYS, FT_MOMENTA)
        ]
    if approach == "FE":
        return [FeConfig(extract_fraction=f, **overrides) for f in FE_FRACTIONS]
    raise ConfigError(f"unknown approach {approach!r}")


# --------------------------------------------------------------------------
# plan


@dataclass
class SearchPlan:
    sources: dict
    tasks: dict
    pairs: list
    ft_grid: list
    fe_grid: list
    approaches: tuple = APPROACHES
    seeds: tuple = (0,)
    time_limit: float = 24.0
    parallel_workers: int = 1
    power: object = None
    intensity_g_per_kwh: float = EU27_2020_G_PER_KWH
    ledger: str | None = None
    fewshot: dict = field(default_factory=dict)
    reselect: dict = field(default_factory=dict)
    base_dir: str = "."
    plan_id: str = field(default_factory=lambda: uuid.uuid4().hex)

    def __post_init__(self):
        self.pairs = [tuple(p) for p in self.pairs]
        if not self.pairs:
            raise ConfigError("plan has no (source, task) pairs")
        if ("FT" in self.approaches and not self.ft_grid) or ("FE" in self.approaches and not self.fe_grid):
            raise ConfigError("plan grids must be non-empty")
        for src, task in self.pairs:
            if self.sources and src not in self.sources:
                raise ConfigError(f"pair references unknown source {src!r}")
            if self.tasks and task not in self.tasks:
                raise ConfigError(f"pair references unknown task {task!r}")

    def grid(self, approach):
        return self.ft_grid if approach == "FT" else self.fe_grid

    def task_names(self):
        return list(dict.fromkeys(t for _, t in self.pairs))

    def resolve(self, path):
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


def _parse_grid(approach, spec):
    if spec is None or spec == "default":
        return enumerate_grid(approach)
    if isinstance(spec, dict):
        if spec.get("grid", "default") != "default":
            raise ConfigError(f"unknown grid keyword {spec.get('grid')!r}")
        return enumerate_grid(approach, spec.get("overrides"))
    return [config_from_dict(approach, d) for d in spec]


def plan_from_dict(d, base_dir="."):
    sources = d.get("sources", {})
    tasks = d.get("tasks", {})
    pairs = d.get("pairs", "all")
    if pairs == "all":
        pairs = [(s, t) for s in sources for t in tasks]
    return SearchPlan(
        sources=sources,
        tasks=tasks,
        pairs=pairs,
        ft_grid=_parse_grid("FT", d.get("ft_grid")),
        fe_grid=_parse_grid("FE", d.get("fe_grid")),
        approaches=tuple(d.get("approaches", APPROACHES)),
        seeds=tuple(d.get("seeds", (0,))),
        time_limit=float(d.get("time_limit_hours", 24.0)),
        parallel_workers=int(d.get("parallel_workers", 1)),
        power=d.get("power"),
        intensity_g_per_kwh=float(d.get("intensity_g_per_kwh", EU27_2020_G_PER_KWH)),
        ledger=d.get("ledger"),
        fewshot=d.get("fewshot", {}),
        reselect=d.get("reselect", {}),
        base_dir=str(base_dir),
    )


def load_plan(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"plan file not found: {path}")
    text = path.read_text()
    d = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    if not isinstance(d, dict):
        raise ConfigError("plan file must hold a mapping")
    return plan_from_dict(d, path.parent)


# --------------------------------------------------------------------------
# planned experiments


@dataclass(frozen=True)
class PlannedExperiment:
    plan_index: int
    source: str
    task: str
    approach: str
    config: object
    ic: int | None = None
    subset: int | None = None
    base_seed: int = 0
    phase: str = "search"

    @property
    def key(self):
        payload = {
            "source": self.source, "task": self.task, "approach": self.approach,
            "config": self.config.to_dict(), "ic": self.ic, "subset": self.subset,
            "base_seed": self.base_seed if self.ic is not None else None, "phase": self.phase,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:32]


def plan_experiments(plan, pairs=None, phase="search", ic=None, subset=None, base_seed=0):
    """Every (pair, approach, config, seed) the plan implies, in grid order."""
    out = []
    for src, task in pairs or plan.pairs:
        for approach in plan.approaches:
            for cfg in plan.grid(approach):
                for seed in plan.seeds:
                    cfg_s = dataclasses.replace(cfg, seed=seed)
                    out.append(PlannedExperiment(len(out), src, task, approach, cfg_s, ic, subset, base_seed, phase))
    return out


# --------------------------------------------------------------------------
# ledger


class SearchLedger:
    """Append-only JSON-lines store of ExperimentRecords with derived totals.

    Analyst hours live in a sidecar ``<ledger>.annotations.json`` because they
    are entered by hand, not produced by a run.
    """

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records = []
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            for n, line in enumerate(self.path.read_text().splitlines(), 1):
                if line.strip():
                    try:
                        self.records.append(ExperimentRecord.from_dict(json.loads(line)))
                    except (json.JSONDecodeError, TypeError) as exc:
                        raise ConfigError(f"{self.path}:{n}: unreadable ledger row ({exc})") from exc

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"ledger not found: {path}")
        return cls(path)

    def append(self, record):
        with self._lock:
            self.records.append(record)
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(record.to_json() + "\n")
                    fh.flush()
                    os.fsync(fh.fileno())

    def keys(self):
        return {r.key for r in self.records if r.key}

    def select(self, approach=None, phase=None, task=None, ic=..., status=None):
        out = self.records
        if approach is not None:
            out = [r for r in out if r.approach == approach]
        if phase is not None:
            out = [r for r in out if r.phase == phase]
        if task is not None:
            out = [r for r in out if r.task == task]
        if ic is not ...:
            out = [r for r in out if r.ic == ic]
        if status is not None:
            out = [r for r in out if r.status == status]
        return out

    @property
    def n_exp(self):
        return len(self.records)

    def total_hours(self, approach=None):
        return float(sum(r.wall_time_hours for r in self.select(approach)))

    def total_co2(self, approach=None):
        return float(sum(r.e_co2_kg for r in self.select(approach)))

    def total_energy(self, approach=None):
        return float(sum(r.energy_kwh for r in self.select(approach)))

    def best_record(self, task, approach=None, phase="search", ic=None, source=None):
        """Highest-V_ACC non-failed record; ties go to the earlier plan index."""
        cands = [
            (i, r) for i, r in enumerate(self.records)
            if r.task == task and r.phase == phase and r.ic == ic and r.status != Status.FAILED.value
            and r.v_acc is not None and (approach is None or r.approach == approach)
            and (source is None or r.source_tag == source)
        ]
        if not cands:
            return None
        big = float("inf")
        _, best = min(cands, key=lambda ir: (-ir[1].v_acc, ir[1].plan_index if ir[1].plan_index is not None else big, ir[0]))
        return best

    @property
    def best_per_task(self):
        out = {}
        for task in dict.fromkeys(r.task for r in self.records if r.phase == "search"):
            best = self.best_record(task)
            if best is not None:
                out[task] = (best.approach, best.config, best.v_acc)
        return out

    # annotations

    @property
    def annotations_path(self):
        return self.path.with_name(self.path.name + ".annotations.json") if self.path else None

    @property
    def analyst_hours(self):
        p = self.annotations_path
        if p and p.exists():
            return json.loads(p.read_text()).get("analyst_hours", {})
        return {}

    def annotate(self, hours, approach=None):
        if hours < 0:
            raise ConfigError("analyst hours must be non-negative")
        if self.path is None:
            raise ConfigError("cannot annotate an in-memory ledger")
        data = {"analyst_hours": dict(self.analyst_hours)}
        data["analyst_hours"][approach or "all"] = float(hours)
        self.annotations_path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# execution

_MATERIALS = {}


def _build_source(plan, tag):
    spec = dict(plan.sources.get(tag) or {"arch": "toy"})
    arch = spec.get("arch", "toy")
    source_tag = spec.get("tag", tag if tag in bb.SOURCE_TAGS else "other")
    if arch == "toy":
        b = bb.toy_backbone(
            input_side=spec.get("input_side", 14), channels=spec.get("channels", 3),
            n_classes=spec.get("n_classes", 10), seed=spec.get("seed", 0), source_tag=source_tag,
            initializer=spec.get("initializer", "he_uniform"),
        )
    elif arch == "vgg16":
        b = bb.vgg16_backbone(n_classes=spec.get("n_classes", 1000), input_side=spec.get("input_side", 224),
                              source_tag=source_tag)
    else:
        raise ConfigError(f"unknown backbone arch {arch!r}")
    if spec.get("weights"):
        b = bb.import_weights(b, plan.resolve(spec["weights"]))
    if spec.get("pretrain"):
        pt = spec["pretrain"]
        src_ds = make_synthetic_task(name=f"{tag}-source", **pt.get("synthetic", {}))
        b = pretrain(b, src_ds, epochs=pt.get("epochs", 10), learning_rate=pt.get("learning_rate", 0.01),
                     seed=pt.get("seed", 0))
    return b


def _build_task(plan, name):
    spec = plan.tasks.get(name) or {}
    if "manifest" in spec:
        ds = load_dataset(plan.resolve(spec["manifest"]))
    elif "synthetic" in spec:
        kw = dict(spec["synthetic"])
        kw.setdefault("name", name)
        kw.setdefault("overlap", spec.get("overlap", Overlap.UNKNOWN))
        ds = make_synthetic_task(**kw)
    else:
        raise ConfigError(f"task {name!r} needs a manifest or a synthetic spec")
    return ds


def materials(plan, kind, name):
    key = (plan.plan_id, kind, name)
    if key not in _MATERIALS:
        _MATERIALS[key] = _build_source(plan, name) if kind == "source" else _build_task(plan, name)
    return _MATERIALS[key]


def fewshot_subset(ds, ic, base_seed, k):
    return make_fewshot_subsets(ds, FewShotSpec(ic, k + 1, base_seed))[k]


def default_executor(planned, plan):
    b = materials(plan, "source", planned.source)
    ds = materials(plan, "task", planned.task)
    if planned.ic is not None:
        ds = fewshot_subset(ds, planned.ic, planned.base_seed, planned.subset or 0)
    return run_experiment(
        planned.approach, b, ds, planned.config, sampler=make_source(plan.power),
        time_limit=plan.time_limit, intensity_g_per_kwh=plan.intensity_g_per_kwh,
    )


def _failed_record(planned, plan, exc, seconds):
    now = time.strftime("%Y-%m-%dT%H:%M:%S+00:00", time.gmtime())
    tag = planned.source if planned.source in bb.SOURCE_TAGS else "other"
    return ExperimentRecord(
        id=uuid.uuid4().hex, approach=planned.approach, source_tag=tag, task=planned.task,
        config=planned.config.to_dict(), seed=planned.config.seed, v_acc=None, t_acc=None,
        overfit_gap=None, wall_time_hours=seconds / 3600.0, energy_kwh=0.0, e_co2_kg=0.0,
        p_avg_watts=0.0, epochs_run=None, status=Status.FAILED.value, started_at=now, finished_at=now,
        intensity_g_per_kwh=plan.intensity_g_per_kwh, error=f"{type(exc).__name__}: {exc}",
    )


def _execute(planned, plan, executor):
    t0 = time.perf_counter()
    try:
        rec = executor(planned, plan)
    except Exception as exc:  # one broken experiment must not abort the search
        log.warning("experiment %s failed: %s", planned.key, exc)
        rec = _failed_record(planned, plan, exc, time.perf_counter() - t0)
    rec.key = planned.key
    rec.plan_index = planned.plan_index
    rec.ic = planned.ic
    rec.subset = planned.subset
    rec.phase = planned.phase
    rec.meta = dict(rec.meta, source_key=planned.source)
    return rec


def execute_planned(planned_list, plan, ledger, executor=None, workers=None):
    """Run every planned experiment whose key is not in the ledger yet; return the new records."""
    executor = executor or default_executor
    done = ledger.keys()
    todo = [p for p in planned_list if p.key not in done]
    workers = max(1, workers or plan.parallel_workers)
    new = []
    if workers == 1 or len(todo) <= 1:
        for p in todo:
            rec = _execute(p, plan, executor)
            ledger.append(rec)
            new.append(rec)
        return new
    with cf.ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_execute, p, plan, executor) for p in todo]
        for fut in cf.as_completed(futures):
            rec = fut.result()
            ledger.append(rec)
            new.append(rec)
    return new


def run_search(plan, ledger=None, executor=None, workers=None):
    ledger = ledger if ledger is not None else SearchLedger(plan.ledger and plan.resolve(plan.ledger))
    new = execute_planned(plan_experiments(plan), plan, ledger, executor, workers)
    log.info("search: %d new experiments, %d in ledger", len(new), ledger.n_exp)
    return ledger


# --------------------------------------------------------------------------
# few-shot protocol


@dataclass
class FewshotResult:
    ledger: SearchLedger
    curves: dict            # task -> list[CurvePoint]
    timing: dict            # (task, approach) -> list of (ic, mean_h, min_h, max_h)
    skipped: list           # (task, ic, reason)
    time_ratio: dict        # task -> FT/FE ratio of time-vs-ic slopes


def best_configs_from(ledger, tasks):
    out = {}
    for task in tasks:
        for approach in APPROACHES:
            rec = ledger.best_record(task, approach)
            if rec is not None:
                out[(task, approach)] = (rec.meta.get("source_key", rec.source_tag),
                                         config_from_dict(approach, rec.config))
    return out


def _slope(points):
    if len(points) < 2:
        return None
    x = np.array([p[0] for p in points], dtype=float)
    y = np.array([p[1] for p in points], dtype=float)
    return float(np.polyfit(x, y, 1)[0])


def run_fewshot_protocol(plan, ic_grid, best_configs=None, n_subsets=5, base_seed=0, ledger=None,
                         executor=None, tasks=None, workers=None):
    """Both approaches, fixed configs, ``n_subsets`` random train subsets per ic."""
    ledger = ledger if ledger is not None else SearchLedger(plan.ledger and plan.resolve(plan.ledger))
    tasks = tasks or plan.task_names()
    if best_configs is None:
        best_configs = best_configs_from(ledger, tasks)
    planned, skipped = [], []
    for task in tasks:
        missing = [a for a in APPROACHES if (task, a) not in best_configs]
        if missing:
            raise ConfigError(f"no best config for task {task!r} approach(es) {missing}")
        ds = materials(plan, "task", task) if task in plan.tasks else None
        for ic in sorted(set(ic_grid)):
            if ds is not None:
                try:
                    make_fewshot_subsets(ds, FewShotSpec(ic, 1, base_seed))
                except InsufficientDataError as err:
                    skipped.append((task, ic, str(err)))
                    continue
            for k in range(n_subsets):
                for approach in APPROACHES:
                    src, cfg = best_configs[(task, approach)]
                    planned.append(PlannedExperiment(len(planned), src, task, approach, cfg, ic, k, base_seed,
                                                     "fewshot"))
    execute_planned(planned, plan, ledger, executor, workers)

    keys = {p.key for p in planned}
    recs = [r for r in ledger.records if r.key in keys]
    curves, timing, ratios = {}, {}, {}
    for task in tasks:
        trecs = [r for r in recs if r.task == task]
        ok = defaultdict(dict)
        for r in trecs:
            if r.status == Status.COMPLETED.value and r.t_acc is not None:
                ok[(r.ic, r.subset)][r.approach] = r
        paired = [r for pair in ok.values() if len(pair) == 2 for r in pair.values()]
        curves[task] = fewshot_curve(paired)
        slopes = {}
        for approach in APPROACHES:
            rows = []
            for ic in sorted({r.ic for r in trecs}):
                hours = [r.wall_time_hours for r in trecs if r.ic == ic and r.approach == approach]
                rows.append((ic, float(np.mean(hours)), float(min(hours)), float(max(hours))))
            timing[(task, approach)] = rows
            slopes[approach] = _slope([(ic, m) for ic, m, _, _ in rows])
        if slopes["FE"] and slopes["FT"] is not None and slopes["FE"] > 0:
            ratios[task] = slopes["FT"] / slopes["FE"]
    return FewshotResult(ledger, curves, timing, skipped, ratios)


# --------------------------------------------------------------------------
# re-selection at reduced training size


@dataclass(frozen=True)
class DropRow:
    ic: int
    approach: str
    source: str
    config: dict
    v_acc: float
    original_v_acc: float
    drop: float


def run_reselection(plan, task, ic_values, original=None, base_seed=0, ledger=None, executor=None, workers=None):
    """Repeat the full grid search on one ic-subset per value and report the drop.

    ``original`` maps approach -> (source, config) selected at full size;
    by default it is read from the ledger's search records.
    """
    ledger = ledger if ledger is not None else SearchLedger(plan.ledger and plan.resolve(plan.ledger))
    if original is None:
        original = {a: v for (t, a), v in best_configs_from(ledger, [task]).items()}
    pairs = [p for p in plan.pairs if p[1] == task]
    if not pairs:
        raise ConfigError(f"plan has no pairs for task {task!r}")
    rows = []
    for ic in ic_values:
        planned = plan_experiments(plan, pairs, phase="reselect", ic=ic, subset=0, base_seed=base_seed)
        for approach in plan.approaches:
            if approach not in original:
                raise ConfigError(f"no original {approach} config for task {task!r}")
            src, cfg = original[approach]
            probe = PlannedExperiment(len(planned), src, task, approach, cfg, ic, 0, base_seed, "reselect")
            if probe.key not in {p.key for p in planned}:
                planned.append(probe)
        execute_planned(planned, plan, ledger, executor, workers)
        by_key = {r.key: r for r in ledger.records}
        for approach in plan.approaches:
            src, cfg = original[approach]
            orig_key = PlannedExperiment(0, src, task, approach, cfg, ic, 0, base_seed, "reselect").key
            cands = [(p, by_key[p.key]) for p in planned if p.approach == approach and p.key in by_key
                     and by_key[p.key].status != Status.FAILED.value and by_key[p.key].v_acc is not None]
            if not cands or orig_key not in by_key or by_key[orig_key].v_acc is None:
                raise TradeoffError(f"re-selection at ic={ic} produced no usable {approach} records")
            best_p, best_r = min(cands, key=lambda pr: (-pr[1].v_acc, pr[0].plan_index))
            orig_v = by_key[orig_key].v_acc
            rows.append(DropRow(ic, approach, best_p.source, best_p.config.to_dict(), best_r.v_acc, orig_v,
                                compute_drop(best_r.v_acc, orig_v)))
    return rows
