"""Cross-validated runs, cross-subject transfer and the JSONL result store."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import threading
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..backbone import ModelSpec, build_model, read_checkpoint
from ..dataio import DatasetManifest, LabeledSet, SubjectRecord, load_subject, make_fold_plan, \
    oversample_balanced, select_label_fraction
from ..pretext import ALGORITHMS, PretextConfig, pretrain
from .config import RUN_ALGORITHMS, ExperimentConfig
from .metrics import MetricsBundle, evaluate
from .training import Budget, class_aware_weights, class_counts, finetune, two_stage_train

log = logging.getLogger(__name__)

TRAINING_PHASES = ("pretrain", "finetune")


class IsolationError(RuntimeError):
    """A held-out subject was read while a model was being trained."""


def set_deterministic(enabled: bool = True) -> None:
    torch.use_deterministic_algorithms(enabled)
    torch.backends.cudnn.benchmark = False


def unit_seed(*key) -> int:
    """Independent 31-bit seed for a ``(seed, fold, algorithm, ...)`` key."""
    words = [k if isinstance(k, int) else int.from_bytes(hashlib.sha256(str(k).encode()).digest()[:4], "little")
             for k in key]
    return int(np.random.SeedSequence(words).generate_state(1)[0] & 0x7FFFFFFF)


class SubjectStore:
    """Loads subject records and logs which training phase touched which subject."""

    def __init__(self, manifest: DatasetManifest | None = None, records: dict[str, SubjectRecord] | None = None):
        self.manifest = manifest
        self._cache: dict[str, SubjectRecord] = dict(records or {})
        self.audit: list[tuple[str, str, str]] = []

    @classmethod
    def from_records(cls, records) -> "SubjectStore":
        return cls(records={r.subject_id: r for r in records})

    @property
    def subject_ids(self) -> list[str]:
        return self.manifest.subject_ids if self.manifest else sorted(self._cache)

    def get(self, subject_id: str, phase: str) -> SubjectRecord:
        if subject_id not in self._cache:
            if self.manifest is None:
                raise KeyError(subject_id)
            self._cache[subject_id] = load_subject(self.manifest.subject_path(subject_id))
        rec = self._cache[subject_id]
        digest = hashlib.sha256(rec.epochs.tobytes()).hexdigest()[:12]
        self.audit.append((subject_id, phase, digest))
        return rec

    def pooled(self, subject_ids, phase: str) -> LabeledSet:
        return LabeledSet.from_records([self.get(s, phase) for s in subject_ids])

    def phases_for(self, subject_id: str) -> set[str]:
        return {phase for sid, phase, _ in self.audit if sid == subject_id}

    def check_isolation(self, held_out) -> None:
        for sid in held_out:
            leaked = self.phases_for(sid) & set(TRAINING_PHASES)
            if leaked:
                raise IsolationError(f"held-out subject {sid} was read during {sorted(leaked)}")


# --- results ----------------------------------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    test_subjects: list[str]
    metrics: MetricsBundle | None = None
    pretrain_trace: list[dict] = field(default_factory=list)
    finetune_trace: list[dict] = field(default_factory=list)
    checkpoint: str | None = None
    n_labeled: int = 0
    error: str | None = None

    def to_json(self) -> dict:
        return {
            "fold": self.fold,
            "test_subjects": self.test_subjects,
            "metrics": self.metrics.to_json() if self.metrics else None,
            "pretrain_trace": self.pretrain_trace,
            "finetune_trace": self.finetune_trace,
            "checkpoint": self.checkpoint,
            "n_labeled": self.n_labeled,
            "error": self.error,
        }

    @classmethod
    def from_json(cls, d: dict) -> "FoldResult":
        d = dict(d)
        m = d.pop("metrics")
        return cls(metrics=MetricsBundle.from_json(m) if m else None, **d)


@dataclass
class RunResult:
    config: dict
    config_hash: str
    dataset: str
    folds: list[FoldResult]
    kind: str = "cv"
    scenario: str | None = None
    wall_time: float = 0.0

    def completed(self) -> list[MetricsBundle]:
        return [f.metrics for f in self.folds if f.metrics is not None]

    def summary(self) -> dict:
        done = self.completed()
        if not done:
            return {}
        acc = np.array([m.accuracy for m in done])
        mf1 = np.array([m.macro_f1 for m in done])
        per_class = {c: np.array([m.per_class_f1[c] for m in done]) for c in done[0].per_class_f1}
        return {
            "accuracy": {"mean": float(acc.mean()), "std": float(acc.std())},
            "macro_f1": {"mean": float(mf1.mean()), "std": float(mf1.std())},
            "per_class_f1": {c: {"mean": float(v.mean()), "std": float(v.std())} for c, v in per_class.items()},
            "n_folds": len(done),
        }

    def to_json(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "kind": self.kind,
            "scenario": self.scenario,
            "dataset": self.dataset,
            "config": self.config,
            "folds": [f.to_json() for f in self.folds],
            "summary": self.summary(),
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_json(cls, d: dict) -> "RunResult":
        return cls(config=d["config"], config_hash=d["config_hash"], dataset=d["dataset"],
                   folds=[FoldResult.from_json(f) for f in d["folds"]], kind=d.get("kind", "cv"),
                   scenario=d.get("scenario"), wall_time=d.get("wall_time", 0.0))


class ResultStore:
    """Append-only JSONL file of RunResults; appends are serialised through one lock."""

    def __init__(self, path: Path | str):
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, result: RunResult) -> None:
        line = json.dumps(result.to_json(), sort_keys=True)
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a") as fh:
                fh.write(line + "\n")

    def load(self) -> list[RunResult]:
        if not self.path.exists():
            return []
        with open(self.path) as fh:
            return [RunResult.from_json(json.loads(line)) for line in fh if line.strip()]

    def hashes(self) -> set[str]:
        return {r.config_hash for r in self.load()}


# --- one fold ---------------------------------------------------------------------------------

def _pretrain_key(cfg: ExperimentConfig, fold: int) -> str:
    d = cfg.to_json()
    keep = {k: d[k] for k in ("dataset", "backbone", "algorithm", "k", "seed", "preset", "model_params",
                               "pretrain", "pretext")}
    keep["oversample"] = cfg.imbalance == "oversample_pretext"
    keep["fold"] = fold
    return hashlib.sha256(json.dumps(keep, sort_keys=True).encode()).hexdigest()[:16]


def _pretrain_fold(cfg: ExperimentConfig, spec: ModelSpec, train: LabeledSet, fold: int,
                   ckpt_root: Path | None) -> tuple[dict, list[dict], str | None]:
    """Pretrained encoder weights for one fold, reusing a cached checkpoint when present."""
    ckpt_dir = None
    if ckpt_root is not None:
        ckpt_dir = ckpt_root / _pretrain_key(cfg, fold)
        ckpt = ckpt_dir / f"encoder_{cfg.algorithm}.npz"
        trace_file = ckpt_dir / f"pretrain_{cfg.algorithm}_trace.csv"
        if ckpt.exists() and trace_file.exists():
            _, state, _ = read_checkpoint(ckpt)
            enc = {k[len("features."):]: v for k, v in state.items() if k.startswith("features.")}
            with open(trace_file) as fh:
                trace = [{k: float(v) for k, v in row.items() if v != ""} for row in csv.DictReader(fh)]
            return enc, trace, str(ckpt)
    data = train
    if cfg.imbalance == "oversample_pretext":
        data = oversample_balanced(train, unit_seed(cfg.seed, fold, "oversample"))
    model = build_model(spec, unit_seed(cfg.seed, fold, cfg.algorithm, "init"))
    result = pretrain(model, cfg.algorithm, data.x, epochs=cfg.pretrain.epochs, batch=cfg.pretrain.batch,
                      lr=cfg.pretrain.lr, wd=cfg.pretrain.wd, seed=unit_seed(cfg.seed, fold, cfg.algorithm),
                      cfg=cfg.pretext, out_dir=ckpt_dir)
    return result.encoder_state, result.trace, str(result.checkpoint) if result.checkpoint else None


def run_fold(cfg: ExperimentConfig, fold: int, store: SubjectStore | None = None,
             ckpt_root: Path | str | None = None) -> FoldResult:
    if cfg.deterministic:
        set_deterministic(True)
    if store is None:
        store = SubjectStore(DatasetManifest.load(cfg.dataset))
    ckpt_root = Path(ckpt_root) if ckpt_root is not None else None
    manifest_ids = store.subject_ids
    plan = make_fold_plan(manifest_ids, cfg.k, cfg.seed)
    test_ids = plan.test_subjects(fold)
    result = FoldResult(fold=fold, test_subjects=test_ids)
    store.audit.clear()
    try:
        train = store.pooled(plan.train_subjects(fold), "pretrain" if cfg.algorithm != "supervised" else "finetune")
        rec0 = store.get(plan.train_subjects(fold)[0], "finetune")
        spec = cfg.model_spec(rec0.sampling_rate_hz)
        encoder = None
        if cfg.algorithm in ALGORITHMS:
            encoder, result.pretrain_trace, result.checkpoint = _pretrain_fold(cfg, spec, train, fold, ckpt_root)
        budget = select_label_fraction(train, cfg.label_fraction, cfg.seed)
        labeled = budget.apply(train)
        result.n_labeled = len(labeled)
        ft_seed = unit_seed(cfg.seed, fold, "finetune")
        if cfg.imbalance == "two_stage":
            model, report = two_stage_train(spec, labeled, cfg.finetune, ft_seed, encoder=encoder)
        else:
            weights = class_aware_weights(class_counts(labeled)) if cfg.imbalance == "class_aware_loss" else None
            model, report = finetune(encoder, spec, labeled, cfg.finetune, ft_seed, class_weights=weights)
        result.finetune_trace = report.trace
        store.check_isolation(test_ids)
        test = store.pooled(test_ids, "evaluate")
        result.metrics = evaluate(model, test.x, test.y)
    except IsolationError:
        raise
    except Exception as exc:  # recorded so the remaining folds still run
        log.error("fold %d failed: %s", fold, exc)
        result.error = f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}"
    return result


def _dataset_name(cfg: ExperimentConfig, store: SubjectStore | None) -> str:
    if store is not None and store.manifest is not None:
        return store.manifest.name
    if store is None and Path(cfg.dataset).exists():
        return DatasetManifest.load(cfg.dataset).name
    return Path(cfg.dataset).stem


def run_experiment(cfg: ExperimentConfig, store: SubjectStore | None = None,
                   results: ResultStore | None = None, ckpt_root: Path | str | None = None) -> RunResult:
    """Every requested fold of ``cfg``: pretrain, select labels, fine-tune, evaluate."""
    start = time.perf_counter()
    if store is None:
        store = SubjectStore(DatasetManifest.load(cfg.dataset))
    folds = cfg.folds if cfg.folds is not None else list(range(cfg.k))
    fold_results = [run_fold(cfg, f, store, ckpt_root) for f in folds]
    run = RunResult(config=cfg.to_json(), config_hash=cfg.config_hash(), dataset=_dataset_name(cfg, store),
                    folds=fold_results, wall_time=time.perf_counter() - start)
    if results is not None:
        results.append(run)
    return run


def _fold_unit(args):
    cfg, fold, ckpt_root = args
    torch.set_num_threads(1)
    return cfg.config_hash(), run_fold(cfg, fold, None, ckpt_root)


def run_grid(configs: list[ExperimentConfig], results: ResultStore, workers: int = 1,
             ckpt_root: Path | str | None = None) -> list[RunResult]:
    """Run configs not yet present in ``results``; (config, fold) units may run in parallel."""
    done = results.hashes()
    todo = [c for c in configs if c.config_hash() not in done]
    skipped = len(configs) - len(todo)
    if skipped:
        log.info("skipping %d configs already in %s", skipped, results.path)
    units = [(c, f, ckpt_root) for c in todo for f in (c.folds if c.folds is not None else range(c.k))]
    by_hash: dict[str, list[FoldResult]] = {c.config_hash(): [] for c in todo}
    start = time.perf_counter()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for h, fold_result in pool.map(_fold_unit, units):
                by_hash[h].append(fold_result)
    else:
        for unit in units:
            h, fold_result = _fold_unit(unit)
            by_hash[h].append(fold_result)
    out = []
    for c in todo:
        run = RunResult(config=c.to_json(), config_hash=c.config_hash(), dataset=_dataset_name(c, None),
                        folds=sorted(by_hash[c.config_hash()], key=lambda f: f.fold),
                        wall_time=time.perf_counter() - start)
        results.append(run)
        out.append(run)
    return out


# --- transfer ------------------------------------------------------------------------------------

def transfer_experiment(source: str, target: str, algorithm: str, spec: ModelSpec, seed: int = 0,
                        store: SubjectStore | None = None, pretrain_budget: Budget | None = None,
                        finetune_budget: Budget | None = None,
                        pretext_cfg: PretextConfig | None = None) -> MetricsBundle:
    """Train on ``source`` (pretraining on its unlabeled epochs for SSL modes) and score on ``target``."""
    if source == target:
        raise ValueError("source and target subjects must differ")
    if algorithm not in RUN_ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    if store is None:
        raise ValueError("a SubjectStore is required")
    pretrain_budget = pretrain_budget or Budget()
    finetune_budget = finetune_budget or Budget()
    encoder = None
    if algorithm in ALGORITHMS:
        src = store.pooled([source], "pretrain")
        model = build_model(spec, unit_seed(seed, source, algorithm, "init"))
        encoder = pretrain(model, algorithm, src.x, epochs=pretrain_budget.epochs, batch=pretrain_budget.batch,
                           lr=pretrain_budget.lr, wd=pretrain_budget.wd, seed=unit_seed(seed, source, algorithm),
                           cfg=pretext_cfg).encoder_state
    labeled = store.pooled([source], "finetune")
    model, _ = finetune(encoder, spec, labeled, finetune_budget, unit_seed(seed, source, "finetune"))
    store.check_isolation([target])
    test = store.pooled([target], "evaluate")
    return evaluate(model, test.x, test.y)


def transfer_result(source: str, target: str, algorithm: str, metrics: MetricsBundle, config: dict,
                    dataset: str, wall_time: float = 0.0) -> RunResult:
    cfg = dict(config, algorithm=algorithm, source=source, target=target)
    h = hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]
    fold = FoldResult(fold=0, test_subjects=[target], metrics=metrics)
    return RunResult(config=cfg, config_hash=h, dataset=dataset, folds=[fold], kind="transfer",
                     scenario=f"{source}->{target}", wall_time=wall_time)


def cpu_workers() -> int:
    return max(1, (os.cpu_count() or 1))
