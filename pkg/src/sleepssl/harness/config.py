"""Experiment configuration: TOML in, fully resolved and hashable record out."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from ..augment import DEFAULTS as AUGMENT_DEFAULTS
from ..backbone import DEFAULT_PARAMS, NATIVE_TE, SWAPPED_TE, ModelSpec, desk_spec
from ..pretext import ALGORITHMS, CpcConfig, PretextConfig
from .training import Budget

RUN_ALGORITHMS = ("supervised",) + ALGORITHMS
IMBALANCE_MODES = ("none", "oversample_pretext", "class_aware_loss", "two_stage")
TE_MODES = ("native", "swapped", "none")
PRESETS = ("published", "desk")


@dataclass
class ExperimentConfig:
    dataset: str
    backbone: str = "cnn1d"
    algorithm: str = "supervised"
    label_fraction: float = 1.0
    k: int = 5
    seed: int = 0
    folds: list[int] | None = None
    imbalance: str = "none"
    te_mode: str = "native"
    preset: str = "published"
    model_params: dict = field(default_factory=dict)
    pretrain: Budget = field(default_factory=Budget)
    finetune: Budget = field(default_factory=Budget)
    pretext: PretextConfig = field(default_factory=PretextConfig)
    deterministic: bool = True

    def __post_init__(self):
        if self.algorithm not in RUN_ALGORITHMS:
            raise ValueError(f"algorithm must be one of {RUN_ALGORITHMS}, got {self.algorithm!r}")
        if not 0 < self.label_fraction <= 1:
            raise ValueError(f"label_fraction must lie in (0, 1], got {self.label_fraction}")
        if self.imbalance not in IMBALANCE_MODES:
            raise ValueError(f"imbalance must be one of {IMBALANCE_MODES}, got {self.imbalance!r}")
        if self.te_mode not in TE_MODES:
            raise ValueError(f"te_mode must be one of {TE_MODES}, got {self.te_mode!r}")
        if self.preset not in PRESETS:
            raise ValueError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        if self.k < 2:
            raise ValueError("k must be at least 2")
        # fill every augmentation default so the persisted record is explicit
        self.pretext.augment = {**AUGMENT_DEFAULTS, **self.pretext.augment}

    def te_kind(self) -> str:
        if self.te_mode == "native":
            return NATIVE_TE[self.backbone]
        if self.te_mode == "swapped":
            return SWAPPED_TE[self.backbone]
        return "identity"

    def model_spec(self, sampling_rate_hz: int) -> ModelSpec:
        if self.preset == "desk":
            spec = desk_spec(self.backbone, sampling_rate_hz, self.te_kind())
        else:
            spec = ModelSpec(self.backbone, input_len=30 * sampling_rate_hz, sampling_rate_hz=sampling_rate_hz,
                             te_kind=self.te_kind())
        for part, overrides in self.model_params.items():
            if part not in DEFAULT_PARAMS:
                raise ValueError(f"unknown model part {part!r} in model params")
            spec.params.setdefault(part, {}).update(overrides)
        return spec

    def to_json(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self), sort_keys=True))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(copy.deepcopy(self), **changes)

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        pt = dict(d.pop("pretext", {}))
        cpc = CpcConfig(**pt.pop("cpc", {}))
        return cls(
            pretrain=Budget(**d.pop("pretrain", {})),
            finetune=Budget(**d.pop("finetune", {})),
            pretext=PretextConfig(cpc=cpc, **pt),
            **d,
        )


# TOML layout: [experiment] scalar fields, [model] backbone/preset/te_mode + per-part
# tables, [pretrain] / [finetune] budgets, [pretext] (+ [pretext.cpc]), [augment], [grid].

def _from_tables(doc: dict, base_dir: Path | None) -> ExperimentConfig:
    exp = dict(doc.get("experiment", {}))
    model = dict(doc.get("model", {}))
    pretext = dict(doc.get("pretext", {}))
    cpc = CpcConfig(**pretext.pop("cpc", {}))
    augment = dict(doc.get("augment", {}))
    dataset = exp.pop("dataset")
    if base_dir is not None and not Path(dataset).is_absolute():
        dataset = str((base_dir / dataset).resolve())
    fields = {
        "backbone": model.pop("backbone", "cnn1d"),
        "preset": model.pop("preset", "published"),
        "te_mode": model.pop("te_mode", exp.pop("te_mode", "native")),
    }
    return ExperimentConfig(
        dataset=dataset,
        model_params=model,
        pretrain=Budget(**doc.get("pretrain", {})),
        finetune=Budget(**doc.get("finetune", {})),
        pretext=PretextConfig(cpc=cpc, augment=augment, **pretext),
        **fields,
        **exp,
    )


def load_config(path: Path | str) -> tuple[ExperimentConfig, dict]:
    """Parse a TOML run file; returns the base config and its ``[grid]`` table."""
    path = Path(path)
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    grid = doc.pop("grid", {})
    return _from_tables(doc, path.parent), grid


def _set(cfg: ExperimentConfig, key: str, value) -> ExperimentConfig:
    head, _, rest = key.partition(".")
    if not rest:
        return cfg.replace(**{head: value})
    cfg = copy.deepcopy(cfg)
    target = getattr(cfg, head)
    setattr(target, rest, value)
    return cfg.replace()


def expand_grid(base: ExperimentConfig, grid: dict) -> list[ExperimentConfig]:
    """Cartesian product of the grid table; keys are field names or ``section.field``."""
    if not grid:
        return [base]
    keys = sorted(grid)
    values = [grid[k] if isinstance(grid[k], list) else [grid[k]] for k in keys]
    out = []
    for combo in itertools.product(*values):
        cfg = base
        for key, value in zip(keys, combo):
            cfg = _set(cfg, key, value)
        out.append(cfg)
    return out
