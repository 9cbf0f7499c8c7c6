"""Block-set matching: reconstruction distance, ranking, and the resizing baseline.

The distance between a probe block set X (N blocks) and a gallery block
set Y (M blocks) is the mean squared reconstruction residual

    d = (1/N) * sum_n ||x_n - Y w_n||^2

where each w_n solves the sparse reconstruction subproblem.  The beta
penalty shapes w_n but is excluded from the reported distance; the
penalized objective is kept as a diagnostic.  Smaller is more similar,
and the measure is intentionally asymmetric.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .feature_maps import BlockSet, FeatureMap, bilinear_resize
from .sparse import DEFAULT_BETA, DEFAULT_MAX_ITERS, DEFAULT_TOL_KKT, solve_batch


@dataclass(frozen=True)
class MatchScore:
    """Distance plus per-block diagnostics for one probe/gallery pair."""

    distance: float
    per_block_residuals: np.ndarray
    code_sparsity: float  # mean number of active atoms per probe block
    wall_time: float
    mean_penalized_objective: float
    converged: bool


@dataclass(frozen=True)
class GalleryEntry:
    person_id: str
    shot_index: int
    blocks: BlockSet
    source: str = ""

    def __post_init__(self):
        if len(self.blocks) == 0:
            raise ValueError("gallery entry has no blocks")


@dataclass(frozen=True)
class RankedList:
    """(person_id, aggregated distance) pairs, ascending distance."""

    entries: tuple[tuple[str, float], ...]

    def __post_init__(self):
        dists = [d for _, d in self.entries]
        if any(b < a for a, b in zip(dists, dists[1:])):
            raise ValueError("ranked distances must be non-decreasing")
        ids = [p for p, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("each person_id may appear only once")

    def __len__(self) -> int:
        return len(self.entries)

    def rank_of(self, person_id: str) -> int:
        """1-indexed rank of a person; raises KeyError if absent."""
        for i, (pid, _) in enumerate(self.entries):
            if pid == person_id:
                return i + 1
        raise KeyError(person_id)

    def relevance(self, true_person_id: str) -> list[bool]:
        return [pid == true_person_id for pid, _ in self.entries]


def reconstruction_distance(
    probe: BlockSet,
    gallery: BlockSet,
    beta: float = DEFAULT_BETA,
    tol_kkt: float = DEFAULT_TOL_KKT,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> MatchScore:
    """Mean squared residual of sparse-reconstructing probe blocks from the gallery."""
    t0 = time.perf_counter()
    codes = solve_batch(gallery, probe, beta=beta, tol_kkt=tol_kkt, max_iters=max_iters)
    residuals = np.array([c.residual_sq for c in codes.columns])
    n_active = np.array([len(c.active_set) for c in codes.columns], dtype=np.float64)
    objectives = np.array([c.objective for c in codes.columns])
    return MatchScore(
        distance=float(residuals.mean()),
        per_block_residuals=residuals,
        code_sparsity=float(n_active.mean()),
        wall_time=time.perf_counter() - t0,
        mean_penalized_objective=float(objectives.mean()),
        converged=all(c.converged for c in codes.columns),
    )


def aggregate_multishot(scores: Sequence[MatchScore | float]) -> float:
    """Mean distance over the shots of one identity."""
    if not scores:
        raise ValueError("cannot aggregate an empty score list")
    vals = [s.distance if isinstance(s, MatchScore) else float(s) for s in scores]
    return float(np.mean(vals))


def rank_distances(pairs: Iterable[tuple[str, float]]) -> RankedList:
    """Group per-entry distances by identity, average, and sort ascending.

    Ties are broken lexicographically on person_id for determinism.
    """
    grouped: dict[str, list[float]] = {}
    for pid, d in pairs:
        grouped.setdefault(pid, []).append(float(d))
    ranked = sorted(
        ((pid, float(np.mean(ds))) for pid, ds in grouped.items()),
        key=lambda t: (t[1], t[0]),
    )
    return RankedList(entries=tuple(ranked))


def rank_gallery(
    probe: BlockSet,
    entries: Sequence[GalleryEntry],
    beta: float = DEFAULT_BETA,
    tol_kkt: float = DEFAULT_TOL_KKT,
    max_iters: int = DEFAULT_MAX_ITERS,
    workers: int = 1,
) -> RankedList:
    """Match a probe against every gallery entry and rank identities.

    Each shot is matched against its own dictionary; per-identity scores
    are the mean over shots.  Entries are read-only and independent, so
    they may be solved concurrently without changing the result.
    """
    if not entries:
        raise ValueError("gallery is empty")

    def score(entry: GalleryEntry) -> float:
        return reconstruction_distance(
            probe, entry.blocks, beta=beta, tol_kkt=tol_kkt, max_iters=max_iters
        ).distance

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            dists = list(pool.map(score, entries))
    else:
        dists = [score(e) for e in entries]
    return rank_distances((e.person_id, d) for e, d in zip(entries, dists))


def resizing_baseline_distance(
    probe: FeatureMap,
    gallery: FeatureMap,
    target_w: int,
    target_h: int,
) -> float:
    """Fixed-size baseline: resize both maps, flatten, squared Euclidean distance."""
    a = bilinear_resize(probe.data, target_w, target_h)
    b = bilinear_resize(gallery.data, target_w, target_h)
    diff = (a - b).ravel()
    return float(diff @ diff)
