"""Seeded signal transformations.

Every function takes a batch shaped ``[batch, epoch_len]`` (a single 1-D signal
is also accepted) and returns a new array of the same shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

KINDS = ("noise", "time_shift", "negate", "permute")

DEFAULTS = {
    "sigma": 0.8,
    "shift_fraction": 0.2,
    "n_segments": 5,
    "weak_sigma": 0.4,
    "weak_scale_sigma": 0.1,
    "strong_sigma": 0.8,
    "strong_segments": 5,
}


@dataclass(frozen=True)
class AugmentationSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS + ("scale",):
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        p = self.params
        if "sigma" in p and p["sigma"] <= 0:
            raise ValueError("noise sigma must be positive")
        if "shift_fraction" in p and not 0 < p["shift_fraction"] < 1:
            raise ValueError("shift_fraction must lie in (0, 1)")
        if "n_segments" in p and p["n_segments"] < 2:
            raise ValueError("n_segments must be at least 2")

    def apply(self, x: np.ndarray) -> np.ndarray:
        p = self.params
        if self.kind == "noise":
            return add_noise(x, p.get("sigma", DEFAULTS["sigma"]), seed=self.seed)
        if self.kind == "time_shift":
            return time_shift_rotate(x, p.get("shift_fraction", DEFAULTS["shift_fraction"]))
        if self.kind == "negate":
            return negate(x)
        if self.kind == "permute":
            return permute_segments(x, p.get("n_segments", DEFAULTS["n_segments"]), seed=self.seed)
        return scale(x, p.get("sigma", DEFAULTS["weak_scale_sigma"]), seed=self.seed)

    def to_json(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "seed": self.seed}


def _as_batch(x) -> tuple[np.ndarray, tuple]:
    arr = np.asarray(x)
    if arr.ndim == 1:
        return arr[None, :], arr.shape
    if arr.ndim != 2:
        raise ValueError(f"expected [batch, epoch_len], got shape {arr.shape}")
    return arr, arr.shape


def add_noise(x, sigma: float = 0.8, seed=None) -> np.ndarray:
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    arr = np.asarray(x)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=arr.shape)
    return (arr + noise).astype(arr.dtype if arr.dtype.kind == "f" else np.float64)


def time_shift_rotate(x, fraction: float = 0.2) -> np.ndarray:
    """Rotate right by ``round(fraction * epoch_len)`` samples."""
    if not 0 < fraction < 1:
        raise ValueError(f"shift fraction must lie in (0, 1), got {fraction}")
    arr, shape = _as_batch(x)
    s = int(np.floor(fraction * arr.shape[1] + 0.5))
    return np.roll(arr, s, axis=1).reshape(shape)


def negate(x) -> np.ndarray:
    return -np.asarray(x)


def segment_bounds(length: int, n_segments: int) -> np.ndarray:
    """Chunk boundaries whose lengths differ by at most one."""
    return np.linspace(0, length, n_segments + 1).round().astype(int)


def permute_segments(x, n_segments: int = 5, seed=None) -> np.ndarray:
    arr, shape = _as_batch(x)
    L = arr.shape[1]
    if not 2 <= n_segments <= L:
        raise ValueError(f"n_segments must lie in [2, {L}], got {n_segments}")
    bounds = segment_bounds(L, n_segments)
    rng = np.random.default_rng(seed)
    out = np.empty_like(arr)
    for i in range(arr.shape[0]):
        order = rng.permutation(n_segments)
        out[i] = np.concatenate([arr[i, bounds[j]:bounds[j + 1]] for j in order])
    return out.reshape(shape)


def scale(x, sigma: float = 0.1, seed=None) -> np.ndarray:
    """Multiply each signal by one factor drawn from N(1, sigma)."""
    arr, shape = _as_batch(x)
    rng = np.random.default_rng(seed)
    factors = rng.normal(1.0, sigma, size=(arr.shape[0], 1))
    return (arr * factors).astype(arr.dtype if arr.dtype.kind == "f" else np.float64).reshape(shape)


# --- pretext-level helpers ----------------------------------------------------

def apply_kind(x, kind: int, seed=None, params: dict | None = None) -> np.ndarray:
    """Apply the transformation whose pseudo label is ``kind``."""
    p = {**DEFAULTS, **(params or {})}
    name = KINDS[kind]
    if name == "noise":
        return add_noise(x, p["sigma"], seed=seed)
    if name == "time_shift":
        return time_shift_rotate(x, p["shift_fraction"])
    if name == "negate":
        return negate(x)
    return permute_segments(x, p["n_segments"], seed=seed)


def transform_by_labels(x: np.ndarray, labels: Sequence[int], seed=None,
                        params: dict | None = None) -> np.ndarray:
    """Row ``i`` of the output is ``x[i]`` under transformation ``labels[i]``."""
    x = np.asarray(x)
    labels = np.asarray(labels)
    out = np.empty(x.shape, dtype=np.result_type(x.dtype, np.float32))
    seeds = np.random.SeedSequence(seed).spawn(len(KINDS))
    for k in range(len(KINDS)):
        rows = np.flatnonzero(labels == k)
        if rows.size:
            out[rows] = apply_kind(x[rows], k, seed=seeds[k], params=params)
    return out


@dataclass
class ViewPair:
    view_a: np.ndarray
    view_b: np.ndarray
    recipe_a: list[AugmentationSpec]
    recipe_b: list[AugmentationSpec]


def _run(x: np.ndarray, recipe: list[AugmentationSpec]) -> np.ndarray:
    out = x
    for spec in recipe:
        out = spec.apply(out)
    return out


def _seed_ints(seed, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def view_recipes(mode: str, seed=None, params: dict | None = None):
    p = {**DEFAULTS, **(params or {})}
    s = _seed_ints(seed, 4)
    if mode == "simclr":
        def pipeline(noise_seed):
            return [AugmentationSpec("time_shift", {"shift_fraction": p["shift_fraction"]}),
                    AugmentationSpec("noise", {"sigma": p["sigma"]}, noise_seed)]
        return pipeline(s[0]), pipeline(s[1])
    if mode == "tstcc":
        weak = [AugmentationSpec("scale", {"sigma": p["weak_scale_sigma"]}, s[0]),
                AugmentationSpec("noise", {"sigma": p["weak_sigma"]}, s[1])]
        strong = [AugmentationSpec("noise", {"sigma": p["strong_sigma"]}, s[2]),
                  AugmentationSpec("permute", {"n_segments": p["strong_segments"]}, s[3])]
        return weak, strong
    raise ValueError(f"unknown view mode {mode!r}")


def make_view_pair(x, mode: str = "simclr", seed=None, params: dict | None = None) -> ViewPair:
    """Two augmented views of ``x``; in ``tstcc`` mode ``view_a`` is weak and ``view_b`` strong."""
    arr = np.asarray(x)
    recipe_a, recipe_b = view_recipes(mode, seed, params)
    return ViewPair(_run(arr, recipe_a), _run(arr, recipe_b), recipe_a, recipe_b)
