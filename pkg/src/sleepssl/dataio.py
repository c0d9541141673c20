"""On-disk epoch format, preprocessing, fold planning and label budgets.

A subject lives in two files: ``<id>.ssb`` holds ``n_epochs * epoch_len``
little-endian float32 samples followed by ``n_epochs`` uint8 stage labels,
and ``<id>.ssb.json`` is a metadata sidecar.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EPOCH_SECONDS = 30
SAMPLE_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("u1")
SUFFIX = ".ssb"
SIDECAR_SUFFIX = ".ssb.json"


class Stage(enum.IntEnum):
    W = 0
    N1 = 1
    N2 = 2
    N3 = 3
    REM = 4


N_STAGES = len(Stage)
STAGE_NAMES = [s.name for s in Stage]


class DataFormatError(ValueError):
    """A subject file or record violates the published format."""


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    sampling_rate_hz: int
    epochs: np.ndarray
    labels: np.ndarray
    channel: str = ""

    def __post_init__(self):
        object.__setattr__(self, "epochs", np.ascontiguousarray(self.epochs, dtype=np.float32))
        object.__setattr__(self, "labels", np.ascontiguousarray(self.labels, dtype=np.uint8))
        self.validate()

    @property
    def epoch_len(self) -> int:
        return self.epochs.shape[1]

    @property
    def n_epochs(self) -> int:
        return self.epochs.shape[0]

    def validate(self) -> None:
        if not self.subject_id:
            raise DataFormatError("empty subject_id")
        if self.sampling_rate_hz <= 0:
            raise DataFormatError(f"sampling_rate_hz must be positive, got {self.sampling_rate_hz}")
        if self.epochs.ndim != 2:
            raise DataFormatError(f"epochs must be 2-D, got shape {self.epochs.shape}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.epochs.shape[0]:
            raise DataFormatError(
                f"labels length {self.labels.shape} does not match {self.epochs.shape[0]} epochs"
            )
        if self.epochs.shape[1] != EPOCH_SECONDS * self.sampling_rate_hz:
            raise DataFormatError(
                f"epoch_len {self.epochs.shape[1]} != 30 x {self.sampling_rate_hz} Hz"
            )
        if self.labels.size and self.labels.max() >= N_STAGES:
            raise DataFormatError(f"label value {int(self.labels.max())} is not a stage")
        if not np.isfinite(self.epochs).all():
            raise DataFormatError("non-finite sample values")

    def subset(self, index) -> "SubjectRecord":
        return SubjectRecord(self.subject_id, self.sampling_rate_hz,
                             self.epochs[index], self.labels[index], self.channel)


def sidecar_path(path: Path | str) -> Path:
    return Path(str(path) + ".json")


def store_subject(record: SubjectRecord, path: Path | str) -> None:
    """Write ``record`` as a payload file plus JSON sidecar."""
    record.validate()
    path = Path(path)
    meta = {
        "subject_id": record.subject_id,
        "sampling_rate_hz": int(record.sampling_rate_hz),
        "epoch_len": int(record.epoch_len),
        "n_epochs": int(record.n_epochs),
        "channel": record.channel,
    }
    with open(path, "wb") as fh:
        fh.write(record.epochs.astype(SAMPLE_DTYPE, copy=False).tobytes(order="C"))
        fh.write(record.labels.astype(LABEL_DTYPE, copy=False).tobytes())
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_subject(path: Path | str) -> SubjectRecord:
    path = Path(path)
    side = sidecar_path(path)
    if not side.exists():
        raise DataFormatError(f"missing sidecar {side}")
    meta = json.loads(side.read_text())
    n, L = int(meta["n_epochs"]), int(meta["epoch_len"])
    payload = path.read_bytes()
    expected = n * L * SAMPLE_DTYPE.itemsize + n * LABEL_DTYPE.itemsize
    if len(payload) != expected:
        raise DataFormatError(
            f"{path.name}: payload is {len(payload)} bytes, expected {expected} "
            f"for {n} epochs of {L} samples"
        )
    split = n * L * SAMPLE_DTYPE.itemsize
    epochs = np.frombuffer(payload[:split], dtype=SAMPLE_DTYPE).reshape(n, L)
    labels = np.frombuffer(payload[split:], dtype=LABEL_DTYPE)
    if labels.size and labels.max() >= N_STAGES:
        raise DataFormatError(f"{path.name}: invalid stage byte {int(labels.max())}")
    return SubjectRecord(
        subject_id=meta["subject_id"],
        sampling_rate_hz=int(meta["sampling_rate_hz"]),
        epochs=epochs.astype(np.float32),
        labels=labels.copy(),
        channel=meta.get("channel", ""),
    )


# --- preprocessing -----------------------------------------------------------

def trim_wake(record: SubjectRecord, max_lead_minutes: int = 30) -> SubjectRecord:
    """Drop wake beyond ``max_lead_minutes`` before the first and after the last sleep epoch."""
    if record.n_epochs == 0:
        raise ValueError("cannot trim an empty record")
    sleep = np.flatnonzero(record.labels != Stage.W)
    if sleep.size == 0:
        raise ValueError(f"subject {record.subject_id} has no sleep epochs")
    margin = max_lead_minutes * 60 // EPOCH_SECONDS
    start = max(0, int(sleep[0]) - margin)
    stop = min(record.n_epochs, int(sleep[-1]) + margin + 1)
    return record.subset(slice(start, stop))


# raw code -> Stage, or None for epochs that are dropped
_DROP = None
SCHEMES: dict[str, dict[int, Stage | None]] = {
    "aasm": {int(s): s for s in Stage},
    # R&K: W, S1, S2, S3, S4, REM, movement time, unscored
    "rk": {0: Stage.W, 1: Stage.N1, 2: Stage.N2, 3: Stage.N3, 4: Stage.N3, 5: Stage.REM,
           6: _DROP, 7: _DROP},
}


def map_to_aasm(raw_labels: Sequence[int], scheme: str) -> tuple[np.ndarray, np.ndarray]:
    """Map raw annotation codes to AASM stages.

    Returns ``(stages, drop_mask)``: ``drop_mask`` has one entry per raw label and
    ``stages`` holds the mapped values of the epochs that are kept.
    """
    try:
        table = SCHEMES[scheme]
    except KeyError:
        raise ValueError(f"unregistered annotation scheme {scheme!r}; known: {sorted(SCHEMES)}") from None
    raw = np.asarray(raw_labels, dtype=np.int64).ravel()
    drop = np.zeros(raw.shape, dtype=bool)
    out = []
    for i, code in enumerate(raw.tolist()):
        if code not in table:
            raise ValueError(f"raw code {code} has no mapping under scheme {scheme!r}")
        st = table[code]
        if st is None:
            drop[i] = True
        else:
            out.append(int(st))
    return np.asarray(out, dtype=np.uint8), drop


# --- manifests and folds -----------------------------------------------------

@dataclass
class SubjectEntry:
    subject_id: str
    path: str
    n_epochs: int


@dataclass
class DatasetManifest:
    name: str
    channel: str
    sampling_rate_hz: int
    subjects: list[SubjectEntry]
    class_counts: dict[str, int]
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        ids = [s.subject_id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise DataFormatError("duplicate subject ids in manifest")
        total = sum(s.n_epochs for s in self.subjects)
        if sum(self.class_counts.values()) != total:
            raise DataFormatError(
                f"class counts sum to {sum(self.class_counts.values())}, subjects hold {total} epochs"
            )

    @property
    def subject_ids(self) -> list[str]:
        return [s.subject_id for s in self.subjects]

    def subject_path(self, subject_id: str) -> Path:
        for s in self.subjects:
            if s.subject_id == subject_id:
                p = Path(s.path)
                return p if p.is_absolute() else self.root / p
        raise KeyError(subject_id)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "channel": self.channel,
            "sampling_rate_hz": self.sampling_rate_hz,
            "subjects": [vars(s) for s in self.subjects],
            "class_counts": dict(self.class_counts),
        }

    def save(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path: Path | str) -> "DatasetManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        return cls(
            name=d["name"],
            channel=d.get("channel", ""),
            sampling_rate_hz=int(d["sampling_rate_hz"]),
            subjects=[SubjectEntry(**s) for s in d["subjects"]],
            class_counts={k: int(v) for k, v in d["class_counts"].items()},
            root=path.parent,
        )


def build_manifest(name: str, directory: Path | str, channel: str = "") -> DatasetManifest:
    """Scan ``directory`` for subject files and summarise them."""
    directory = Path(directory)
    entries, counts, rate = [], np.zeros(N_STAGES, dtype=np.int64), None
    for p in sorted(directory.glob("*" + SUFFIX)):
        rec = load_subject(p)
        if rate is None:
            rate = rec.sampling_rate_hz
        elif rate != rec.sampling_rate_hz:
            raise DataFormatError(f"mixed sampling rates in {directory}")
        channel = channel or rec.channel
        entries.append(SubjectEntry(rec.subject_id, p.name, rec.n_epochs))
        counts += np.bincount(rec.labels, minlength=N_STAGES)
    if not entries:
        raise DataFormatError(f"no {SUFFIX} files in {directory}")
    return DatasetManifest(
        name=name, channel=channel, sampling_rate_hz=int(rate), subjects=entries,
        class_counts={n: int(c) for n, c in zip(STAGE_NAMES, counts)}, root=directory,
    )


@dataclass(frozen=True)
class FoldPlan:
    k: int
    folds: tuple[frozenset, ...]
    seed: int

    def test_subjects(self, fold: int) -> list[str]:
        return sorted(self.folds[fold])

    def train_subjects(self, fold: int) -> list[str]:
        rest = set().union(*self.folds) - self.folds[fold]
        return sorted(rest)


def make_fold_plan(manifest: DatasetManifest | Sequence[str], k: int = 5, seed: int = 0) -> FoldPlan:
    """Shuffle subjects with ``seed`` and deal them round-robin into ``k`` test sets."""
    ids = manifest.subject_ids if isinstance(manifest, DatasetManifest) else list(manifest)
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > len(ids):
        raise ValueError(f"k={k} exceeds the {len(ids)} available subjects")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    folds = tuple(frozenset(shuffled[i::k]) for i in range(k))
    return FoldPlan(k=k, folds=folds, seed=seed)


# --- labelled epoch sets -----------------------------------------------------

@dataclass
class LabeledSet:
    """Pooled epochs with their provenance; rows align across all arrays."""

    x: np.ndarray
    y: np.ndarray
    subject: np.ndarray
    index: np.ndarray

    def __len__(self):
        return len(self.y)

    @classmethod
    def from_records(cls, records: Iterable[SubjectRecord]) -> "LabeledSet":
        records = list(records)
        if not records:
            raise ValueError("no records")
        return cls(
            x=np.concatenate([r.epochs for r in records]),
            y=np.concatenate([r.labels for r in records]).astype(np.int64),
            subject=np.concatenate([np.full(r.n_epochs, r.subject_id, dtype=object) for r in records]),
            index=np.concatenate([np.arange(r.n_epochs) for r in records]),
        )

    def take(self, rows) -> "LabeledSet":
        rows = np.asarray(rows)
        return LabeledSet(self.x[rows], self.y[rows], self.subject[rows], self.index[rows])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=N_STAGES)


@dataclass
class LabelBudget:
    fraction: float
    seed: int
    rows: np.ndarray
    selected: list[tuple[str, int]]

    def apply(self, data: LabeledSet) -> LabeledSet:
        return data.take(self.rows)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def select_label_fraction(train: LabeledSet, fraction: float, seed: int = 0) -> LabelBudget:
    """Stratified label budget.

    Each class is shuffled with a seed that does not depend on ``fraction`` and a
    prefix of ``round(fraction * n_c)`` (at least one) is kept, so budgets for the
    same seed are nested.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    chosen = []
    for c in range(N_STAGES):
        members = np.flatnonzero(train.y == c)
        if members.size == 0:
            continue
        rng = np.random.default_rng([seed, c])
        members = members[rng.permutation(members.size)]
        n_take = max(1, _round_half_up(fraction * members.size))
        chosen.append(members[:n_take])
    rows = np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, dtype=np.int64)
    selected = [(str(train.subject[r]), int(train.index[r])) for r in rows]
    return LabelBudget(fraction=fraction, seed=seed, rows=rows, selected=selected)


def oversample_balanced(train: LabeledSet, seed: int = 0) -> LabeledSet:
    """Duplicate minority-class rows (with replacement) up to the majority count."""
    counts = train.class_counts()
    present = np.flatnonzero(counts)
    if present.size == 0:
        raise ValueError("empty training set")
    if present.size < N_STAGES:
        missing = [STAGE_NAMES[c] for c in range(N_STAGES) if counts[c] == 0]
        raise ValueError(f"cannot balance: no epochs for classes {missing}")
    target = counts.max()
    rng = np.random.default_rng(seed)
    extra = []
    for c in range(N_STAGES):
        need = target - counts[c]
        if need:
            extra.append(rng.choice(np.flatnonzero(train.y == c), size=need, replace=True))
    rows = np.concatenate([np.arange(len(train))] + extra)
    return train.take(rows)
