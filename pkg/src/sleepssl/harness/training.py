"""Supervised fine-tuning and the class-imbalance remedies."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..backbone import ModelSpec, SleepModel, build_model, load_encoder
from ..dataio import N_STAGES, LabeledSet, oversample_balanced
from ..pretext import cross_entropy

log = logging.getLogger(__name__)


@dataclass
class Budget:
    epochs: int = 40
    batch: int = 128
    lr: float = 1e-3
    wd: float = 1e-4


@dataclass
class FitReport:
    steps: int = 0
    trace: list[dict] = field(default_factory=list)


def class_aware_weights(counts, beta: float = 0.5) -> np.ndarray:
    """Per-class loss weights proportional to ``(N / n_c) ** beta``, normalised to mean 1."""
    counts = np.asarray(counts, dtype=float)
    if (counts <= 0).any():
        raise ValueError(f"class-aware weights need every class present, got counts {counts.tolist()}")
    w = (counts.sum() / counts) ** beta
    return w / w.mean()


def fit(model: SleepModel, data: LabeledSet, budget: Budget, seed: int = 0,
        class_weights=None, report: FitReport | None = None) -> FitReport:
    """Train every parameter of ``model`` with (optionally class-weighted) cross entropy."""
    if len(data) == 0:
        raise ValueError("no labelled epochs to train on")
    report = report or FitReport()
    weight = None if class_weights is None else torch.as_tensor(np.asarray(class_weights), dtype=torch.float32)
    opt = torch.optim.Adam(model.parameters(), lr=budget.lr, betas=(0.9, 0.99), weight_decay=budget.wd)
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    x_all = torch.as_tensor(data.x, dtype=torch.float32)
    y_all = torch.as_tensor(data.y, dtype=torch.long)
    model.train()
    for epoch in range(budget.epochs):
        order = rng.permutation(len(data))
        total = 0.0
        for start in range(0, len(order), budget.batch):
            rows = torch.as_tensor(order[start:start + budget.batch])
            if len(rows) < 2 and len(order) > 1:
                # a lone sample breaks batch-norm statistics
                continue
            loss = cross_entropy(model(x_all[rows]), y_all[rows], weight)
            opt.zero_grad()
            loss.backward()
            opt.step()
            report.steps += 1
            total += loss.item() * len(rows)
        report.trace.append({"epoch": len(report.trace) + 1, "loss": total / len(order)})
    return report


def init_model(spec: ModelSpec, encoder=None, seed: int = 0) -> SleepModel:
    """Fresh model whose feature extractor optionally comes from ``encoder``.

    ``encoder`` is a checkpoint path or a feature-extractor state dict.
    """
    model = build_model(spec, seed)
    if encoder is None:
        return model
    if isinstance(encoder, (str, Path)):
        load_encoder(model, encoder)
    else:
        try:
            model.features.load_state_dict(encoder)
        except RuntimeError as exc:
            raise ValueError(f"encoder weights do not fit {spec.backbone_kind}: {exc}") from None
    return model


def finetune(encoder, spec: ModelSpec, labeled: LabeledSet, budget: Budget, seed: int = 0,
             class_weights=None) -> tuple[SleepModel, FitReport]:
    if len(labeled) == 0:
        raise ValueError("empty label set")
    model = init_model(spec, encoder, seed)
    return model, fit(model, labeled, budget, seed, class_weights)


def two_stage_train(spec: ModelSpec, labeled: LabeledSet, budget: Budget, seed: int = 0,
                    encoder=None) -> tuple[SleepModel, FitReport]:
    """Train on an oversampled balanced copy, then continue on the original labels."""
    if len(labeled) == 0:
        raise ValueError("empty label set")
    model = init_model(spec, encoder, seed)
    balanced = oversample_balanced(labeled, seed)
    report = fit(model, balanced, budget, seed)
    log.debug("two-stage: stage 1 took %d steps", report.steps)
    fit(model, labeled, budget, seed + 1, report=report)
    return model, report


def steps_per_epoch(n: int, batch: int) -> int:
    full, rem = divmod(n, batch)
    return full + (1 if rem >= 2 or (rem == 1 and n == 1) else 0)


def class_counts(data: LabeledSet) -> np.ndarray:
    return np.bincount(data.y, minlength=N_STAGES)


def mean_ce(model: SleepModel, data: LabeledSet) -> float:
    model.eval()
    with torch.no_grad():
        logits = model(torch.as_tensor(data.x, dtype=torch.float32))
        loss = cross_entropy(logits, torch.as_tensor(data.y, dtype=torch.long)).item()
    model.train()
    return loss if math.isfinite(loss) else float("inf")
