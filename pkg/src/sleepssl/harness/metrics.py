from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..dataio import N_STAGES, STAGE_NAMES


@dataclass
class MetricsBundle:
    accuracy: float
    macro_f1: float
    per_class_f1: dict[str, float]
    confusion: list[list[int]]
    n_eval: int

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "per_class_f1": dict(self.per_class_f1),
            "confusion": [list(map(int, row)) for row in self.confusion],
            "n_eval": self.n_eval,
        }

    @classmethod
    def from_json(cls, d: dict) -> "MetricsBundle":
        return cls(d["accuracy"], d["macro_f1"], dict(d["per_class_f1"]), d["confusion"], d["n_eval"])


def confusion_matrix(y_true, y_pred, n_classes: int = N_STAGES) -> np.ndarray:
    """Rows are true classes, columns predictions."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    return np.bincount(y_true * n_classes + y_pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def metrics_from_confusion(cm: np.ndarray) -> MetricsBundle:
    """Per-class F1 is 0 when precision + recall is 0; zero-support classes stay out of the macro mean."""
    cm = np.asarray(cm, dtype=np.int64)
    n = int(cm.sum())
    if n == 0:
        raise ValueError("empty evaluation set")
    tp = np.diag(cm).astype(float)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    f1 = np.zeros(len(cm))
    denom = support + predicted
    # 2PR / (P + R) simplifies to 2 TP / (support + predicted)
    np.divide(2 * tp, denom, out=f1, where=denom > 0)
    present = support > 0
    return MetricsBundle(
        accuracy=float(tp.sum() / n),
        macro_f1=float(f1[present].mean()),
        per_class_f1={name: float(v) for name, v in zip(STAGE_NAMES, f1)},
        confusion=cm.tolist(),
        n_eval=n,
    )


def score(y_true, y_pred) -> MetricsBundle:
    return metrics_from_confusion(confusion_matrix(y_true, y_pred))


@torch.no_grad()
def predict(model, x: np.ndarray, batch: int = 512) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    for start in range(0, len(x), batch):
        logits = model(torch.as_tensor(np.asarray(x[start:start + batch], dtype=np.float32)))
        out.append(logits.argmax(1).numpy())
    model.train(was_training)
    return np.concatenate(out)


def evaluate(model, x: np.ndarray, y: np.ndarray) -> MetricsBundle:
    """Argmax predictions of ``model`` on ``x`` scored against stages ``y``."""
    if len(y) == 0:
        raise ValueError("empty test set")
    return score(y, predict(model, x))
