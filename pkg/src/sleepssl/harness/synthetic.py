"""Seeded synthetic sleep recordings.

Each stage is rendered as an oscillation at a stage-specific base frequency
with an amplitude envelope, optional bursts and additive background noise.
Stage proportions default to the Sleep-EDF distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..dataio import (EPOCH_SECONDS, N_STAGES, STAGE_NAMES, DatasetManifest, SubjectEntry, SubjectRecord,
                      store_subject)

SLEEP_EDF_PRIORS = (0.196, 0.066, 0.421, 0.135, 0.182)


@dataclass
class StageGenerator:
    freq: float
    amplitude: float
    wave: str = "sine"
    burst_freq: float | None = None
    burst_amplitude: float = 0.0


@dataclass
class ClassSpec:
    # base frequencies sit more than 2 * freq_jitter apart, so jittered stage bands never overlap
    stages: list[StageGenerator] = field(default_factory=lambda: [
        StageGenerator(4.5, 0.6),                                # W
        StageGenerator(2.7, 0.5),                                # N1
        StageGenerator(1.8, 0.8, burst_freq=3.6, burst_amplitude=0.8),  # N2
        StageGenerator(0.7, 1.6),                                # N3
        StageGenerator(3.5, 0.5, wave="sawtooth"),               # REM
    ])
    freq_jitter: float = 0.25
    amplitude_jitter: float = 0.2
    noise_sd: float = 0.6
    priors: tuple = SLEEP_EDF_PRIORS

    def __post_init__(self):
        if len(self.stages) != N_STAGES:
            raise ValueError(f"need {N_STAGES} stage generators, got {len(self.stages)}")
        p = np.asarray(self.priors, dtype=float)
        if p.shape != (N_STAGES,) or (p < 0).any() or abs(p.sum() - 1) > 1e-6:
            raise ValueError(f"priors must be {N_STAGES} non-negative values summing to 1, got {self.priors}")


def stage_quota(n: int, priors) -> np.ndarray:
    """Largest-remainder apportionment of ``n`` epochs over the priors."""
    p = np.asarray(priors, dtype=float)
    raw = p * n
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return counts


def hypnogram(n: int, priors, rng: np.random.Generator, max_run: int = 10) -> np.ndarray:
    """Labels with exact per-stage quotas arranged in contiguous runs."""
    runs = []
    for stage, count in enumerate(stage_quota(n, priors)):
        while count > 0:
            length = min(count, int(rng.integers(1, max_run + 1)))
            runs.append(np.full(length, stage, dtype=np.uint8))
            count -= length
    order = rng.permutation(len(runs))
    return np.concatenate([runs[i] for i in order]) if runs else np.zeros(0, np.uint8)


def render_epoch(gen: StageGenerator, spec: ClassSpec, fs: int, rng: np.random.Generator,
                 freq_scale: float = 1.0, noise: bool = True) -> np.ndarray:
    t = np.arange(EPOCH_SECONDS * fs) / fs
    f = gen.freq * freq_scale + rng.uniform(-spec.freq_jitter, spec.freq_jitter)
    amp = gen.amplitude * (1 + rng.uniform(-spec.amplitude_jitter, spec.amplitude_jitter))
    phase = rng.uniform(0, 2 * np.pi)
    if gen.wave == "sawtooth":
        cycle = (f * t + phase / (2 * np.pi)) % 1.0
        wave = 2 * cycle - 1
    else:
        wave = np.sin(2 * np.pi * f * t + phase)
    # slow amplitude envelope
    env = 1 + 0.3 * np.sin(2 * np.pi * rng.uniform(0.02, 0.1) * t + rng.uniform(0, 2 * np.pi))
    x = amp * env * wave
    if gen.burst_freq is not None:
        for centre in rng.uniform(2, EPOCH_SECONDS - 2, size=int(rng.integers(1, 4))):
            burst = np.exp(-0.5 * ((t - centre) / 0.5) ** 2)
            x += gen.burst_amplitude * burst * np.sin(2 * np.pi * gen.burst_freq * freq_scale * t)
    if noise and spec.noise_sd > 0:
        x += rng.normal(0, spec.noise_sd, size=t.shape)
    return x


def synth_subject(subject_id: str, n_epochs: int, fs: int, spec: ClassSpec, rng: np.random.Generator,
                  freq_scale: float = 1.0) -> SubjectRecord:
    labels = hypnogram(n_epochs, spec.priors, rng)
    epochs = np.stack([render_epoch(spec.stages[c], spec, fs, rng, freq_scale) for c in labels])
    return SubjectRecord(subject_id, fs, epochs.astype(np.float32), labels, channel="synthetic")


def generate_synthetic(n_subjects: int, epochs_per_subject: int, epoch_len: int = 300,
                       class_spec: ClassSpec | None = None, shift: float | list[float] | None = None,
                       seed: int = 0, out_dir: Path | str | None = None,
                       name: str = "synthetic") -> tuple[DatasetManifest, list[SubjectRecord]]:
    """Generate subjects and, if ``out_dir`` is given, write them plus ``manifest.json``.

    ``shift`` is either one number (each subject's frequency scale is drawn from
    ``1 +/- shift``) or an explicit list of per-subject scale offsets.
    """
    if epoch_len % EPOCH_SECONDS:
        raise ValueError(f"epoch_len {epoch_len} is not a whole number of samples per second")
    spec = class_spec or ClassSpec()
    fs = epoch_len // EPOCH_SECONDS
    root = np.random.SeedSequence(seed)
    streams = root.spawn(n_subjects + 1)
    shift_rng = np.random.default_rng(streams[-1])
    if shift is None:
        offsets = np.zeros(n_subjects)
    elif np.ndim(shift) == 0:
        offsets = shift_rng.uniform(-shift, shift, size=n_subjects)
    else:
        offsets = np.asarray(shift, dtype=float)
        if offsets.shape != (n_subjects,):
            raise ValueError("per-subject shift list must have one entry per subject")
    width = max(2, len(str(n_subjects - 1)))
    records = [
        synth_subject(f"s{i:0{width}d}", epochs_per_subject, fs, spec, np.random.default_rng(streams[i]),
                      freq_scale=1.0 + offsets[i])
        for i in range(n_subjects)
    ]
    counts = np.zeros(N_STAGES, dtype=np.int64)
    for r in records:
        counts += np.bincount(r.labels, minlength=N_STAGES)
    entries = [SubjectEntry(r.subject_id, f"{r.subject_id}.ssb", r.n_epochs) for r in records]
    manifest = DatasetManifest(
        name=name, channel="synthetic", sampling_rate_hz=fs, subjects=entries,
        class_counts={n: int(c) for n, c in zip(STAGE_NAMES, counts)},
        root=Path(out_dir) if out_dir is not None else Path("."),
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for r in records:
            store_subject(r, out_dir / f"{r.subject_id}.ssb")
        manifest.save(out_dir / "manifest.json")
    return manifest, records
