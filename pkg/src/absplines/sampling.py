"""Effective-model-space construction by response-sliced anchor sampling.

The anchor set is drawn by slicing the range of a per-observation
statistic (raw response for count families, the ratio y/total for
binomial data) into K equal-width intervals and sampling uniformly with
replacement within each slice.  K = 1 reduces to plain uniform sampling.

Randomness policy: numpy PCG64 generators seeded by
``SeedSequence(seed, spawn_key=(slice_index,))`` - one documented
substream per slice, so anchor draws are deterministic given the seed
and slices can be sampled in parallel.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .families import Family
from .model import Dataset

__all__ = [
    "EffectiveBasis",
    "slice_statistics",
    "scott_slice_count",
    "default_nstar",
    "allocate",
    "adaptive_sample",
    "uniform_sample",
]


@dataclass
class EffectiveBasis:
    """Sampled anchors with their slice provenance.

    `anchor_indices` index into the training dataset, so a stored basis
    plus the original data replays a fit exactly.
    """

    anchor_indices: np.ndarray
    slice_ids: np.ndarray
    n_slices: int
    slice_counts: np.ndarray      # |S_k|: observations per slice
    allocations: np.ndarray       # n_k: anchors drawn per slice
    boundaries: np.ndarray        # K + 1 interval edges on the statistic
    seed: int | None = None
    spawn_key: tuple = field(default_factory=tuple)

    def __post_init__(self):
        self.anchor_indices = np.asarray(self.anchor_indices, dtype=int)
        self.slice_ids = np.asarray(self.slice_ids, dtype=int)
        self.slice_counts = np.asarray(self.slice_counts, dtype=int)
        self.allocations = np.asarray(self.allocations, dtype=int)
        self.boundaries = np.asarray(self.boundaries, dtype=float)
        if self.anchor_indices.shape != self.slice_ids.shape:
            raise ValueError("anchor_indices and slice_ids must align")
        if int(self.allocations.sum()) != self.nstar:
            raise ValueError("slice allocations do not sum to the anchor count")

    @property
    def nstar(self) -> int:
        return int(self.anchor_indices.shape[0])

    def anchor_columns(self, dataset: Dataset) -> dict[str, np.ndarray]:
        return {k: v[self.anchor_indices] for k, v in dataset.columns.items()}

    def to_dict(self) -> dict:
        return {
            "anchor_indices": self.anchor_indices.tolist(),
            "slice_ids": self.slice_ids.tolist(),
            "n_slices": int(self.n_slices),
            "slice_counts": self.slice_counts.tolist(),
            "allocations": self.allocations.tolist(),
            "boundaries": self.boundaries.tolist(),
            "seed": self.seed,
            "spawn_key": list(self.spawn_key),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EffectiveBasis":
        return cls(
            anchor_indices=d["anchor_indices"],
            slice_ids=d["slice_ids"],
            n_slices=int(d["n_slices"]),
            slice_counts=d["slice_counts"],
            allocations=d["allocations"],
            boundaries=d["boundaries"],
            seed=d.get("seed"),
            spawn_key=tuple(d.get("spawn_key", ())),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, s: str) -> "EffectiveBasis":
        return cls.from_dict(json.loads(s))


def slice_statistics(stats: np.ndarray, n_slices: int):
    """Equal-width slicing of the statistic's range.

    Returns (slice index per observation, K+1 boundaries, per-slice
    counts).  The last interval is closed on the right; empty slices are
    permitted and show up as zero counts.  A constant statistic collapses
    to a single degenerate slice with a warning.
    """
    stats = np.asarray(stats, dtype=float)
    n = stats.shape[0]
    if n == 0:
        raise ValueError("cannot slice an empty statistic vector")
    if not np.all(np.isfinite(stats)):
        raise ValueError("slicing statistic must be finite")
    if not (1 <= n_slices <= n):
        raise ValueError(f"need 1 <= K <= n, got K={n_slices}, n={n}")
    lo, hi = float(np.min(stats)), float(np.max(stats))
    if hi <= lo:
        if n_slices > 1:
            warnings.warn("constant slicing statistic: collapsing to one slice")
        return (np.zeros(n, dtype=int), np.array([lo, hi]),
                np.array([n], dtype=int))
    edges = np.linspace(lo, hi, n_slices + 1)
    ids = np.minimum(((stats - lo) / (hi - lo) * n_slices).astype(int),
                     n_slices - 1)
    counts = np.bincount(ids, minlength=n_slices)
    return ids, edges, counts


def scott_slice_count(stats: np.ndarray) -> int:
    """Slice count from Scott's normal-reference bin width 3.49*sd*n^(-1/3)."""
    stats = np.asarray(stats, dtype=float)
    n = stats.shape[0]
    if n < 2:
        return 1
    sd = float(np.std(stats, ddof=1))
    rng = float(np.max(stats) - np.min(stats))
    if sd <= 0.0 or rng <= 0.0:
        return 1
    width = 3.49 * sd * n ** (-1.0 / 3.0)
    return int(min(max(int(np.ceil(rng / width)), 1), n))


def default_nstar(n: int, rule: str = "cubic", multiplier: float = 10.0,
                  null_dim: int = 1) -> int:
    """Effective-model-space dimension: round(c * n^(2/9)) for cubic
    smooths, round(c * n^(2/5)) for linear, clamped to [null_dim+1, n]."""
    if rule == "cubic":
        raw = multiplier * n ** (2.0 / 9.0)
    elif rule == "linear":
        raw = multiplier * n ** (2.0 / 5.0)
    else:
        raise ValueError(f"unknown dimension rule {rule!r}")
    return int(min(max(int(round(raw)), null_dim + 1), n))


def allocate(nstar: int, slice_counts: np.ndarray) -> np.ndarray:
    """Per-slice anchor allocations n_k.

    Base allocation nstar // K each, remainder to the most populous
    slices; allocations of empty slices are redistributed to non-empty
    slices proportionally to their populations (largest remainders win
    ties, lower index first).
    """
    counts = np.asarray(slice_counts, dtype=int)
    k = counts.shape[0]
    if nstar < 1:
        raise ValueError("nstar must be >= 1")
    nonempty = counts > 0
    if not np.any(nonempty):
        raise ValueError("all slices are empty")

    alloc = np.full(k, nstar // k, dtype=int)
    rem = nstar - int(alloc.sum())
    if rem > 0:
        order = np.lexsort((np.arange(k), -counts))
        alloc[order[:rem]] += 1

    lost = int(alloc[~nonempty].sum())
    alloc[~nonempty] = 0
    if lost > 0:
        weights = counts[nonempty] / counts[nonempty].sum()
        extra = np.floor(lost * weights).astype(int)
        short = lost - int(extra.sum())
        if short > 0:
            frac = lost * weights - extra
            idx = np.lexsort((np.arange(frac.shape[0]), -frac))
            extra[idx[:short]] += 1
        alloc[nonempty] += extra
    return alloc


def _sample_with_allocations(dataset, stats, n_slices, allocations, seed,
                             spawn_key=()):
    ids, edges, counts = slice_statistics(stats, n_slices)
    k_eff = counts.shape[0]
    if allocations is None:
        raise ValueError("allocations required")
    alloc = np.asarray(allocations, dtype=int)
    if alloc.shape[0] != k_eff:
        # the degenerate-statistic collapse can shrink K to 1
        if k_eff == 1:
            alloc = np.array([int(alloc.sum())])
        else:
            raise ValueError("allocations do not match the slice count")
    if np.any(alloc[counts == 0] > 0):
        alloc = allocate(int(alloc.sum()), counts)

    members = [np.flatnonzero(ids == k) for k in range(k_eff)]
    anchors: list[np.ndarray] = []
    anchor_slices: list[np.ndarray] = []
    for k in range(k_eff):
        if alloc[k] == 0:
            continue
        rng = np.random.default_rng(
            np.random.SeedSequence(seed, spawn_key=tuple(spawn_key) + (k,)))
        draw = members[k][rng.integers(0, members[k].shape[0], size=alloc[k])]
        anchors.append(draw)
        anchor_slices.append(np.full(alloc[k], k, dtype=int))
    return EffectiveBasis(
        anchor_indices=np.concatenate(anchors),
        slice_ids=np.concatenate(anchor_slices),
        n_slices=k_eff,
        slice_counts=counts,
        allocations=alloc,
        boundaries=edges,
        seed=seed,
        spawn_key=tuple(spawn_key),
    )


def adaptive_sample(dataset: Dataset, family: Family, n_slices: int | None = None,
                    nstar: int | None = None, allocations=None,
                    seed: int = 0, spawn_key=()) -> EffectiveBasis:
    """Response-sliced anchor sampling.

    `n_slices=None` applies Scott's rule to the family's slicing
    statistic.  Either `nstar` (split via `allocate`) or explicit
    per-slice `allocations` must be given.
    """
    stats = family.slicing_statistic(dataset.y, dataset.total)
    if n_slices is None:
        n_slices = scott_slice_count(stats)
    if allocations is None:
        if nstar is None:
            raise ValueError("give either nstar or explicit allocations")
        _, _, counts = slice_statistics(stats, n_slices)
        allocations = allocate(nstar, counts)
    else:
        allocations = np.asarray(allocations, dtype=int)
        if nstar is not None and int(allocations.sum()) != nstar:
            raise ValueError("allocations do not sum to nstar")
    return _sample_with_allocations(dataset, stats, n_slices, allocations,
                                    seed, spawn_key)


def uniform_sample(dataset: Dataset, nstar: int, seed: int = 0,
                   spawn_key=()) -> EffectiveBasis:
    """Uniform-with-replacement anchor sampling (the single-slice case)."""
    if nstar < 1:
        raise ValueError("nstar must be >= 1")
    stats = np.zeros(dataset.n)
    return _sample_with_allocations(dataset, stats, 1, np.array([nstar]),
                                    seed, spawn_key)
