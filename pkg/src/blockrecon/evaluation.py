"""Retrieval metrics (CMC, ROC, mAP) and the benchmark harnesses.

Metric functions are pure and deterministic: the same trials produce
bit-identical curves.  Nothing in here plots; the report module renders
figures from these results.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .feature_maps import BlockSet, FeatureMap, block_set
from .matching import (
    GalleryEntry,
    RankedList,
    rank_distances,
    rank_gallery,
    reconstruction_distance,
    resizing_baseline_distance,
)


@dataclass(frozen=True)
class TrialResult:
    probe_id: str
    true_person_id: str
    ranked: RankedList

    def __post_init__(self):
        if len(self.ranked) == 0:
            raise ValueError("trial carries an empty ranking")


@dataclass(frozen=True)
class CmcCurve:
    """values[r-1] = fraction of trials with the true identity at rank <= r."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size == 0:
            raise ValueError("CMC curve must be a non-empty vector")
        object.__setattr__(self, "values", v)

    def rank_accuracy(self, r: int) -> float:
        return float(self.values[min(r, self.values.size) - 1])


@dataclass(frozen=True)
class RocCurve:
    far: np.ndarray
    tar: np.ndarray
    auc: float


def cmc(trials: Sequence[TrialResult], max_rank: int | None = None) -> CmcCurve:
    """Cumulative match characteristic over closed-set trials."""
    if not trials:
        raise ValueError("no trials")
    depth = max_rank or max(len(t.ranked) for t in trials)
    counts = np.zeros(depth)
    for t in trials:
        try:
            r = t.ranked.rank_of(t.true_person_id)
        except KeyError:
            continue  # true identity absent: never counted at any rank
        if r <= depth:
            counts[r - 1] += 1
    return CmcCurve(values=np.cumsum(counts) / len(trials))


def roc(genuine_distances: Sequence[float], impostor_distances: Sequence[float]) -> RocCurve:
    """Verification ROC: accept when distance <= threshold.

    Thresholds sweep the union of observed scores; AUC is trapezoidal
    over (FAR, TAR).
    """
    gen = np.asarray(genuine_distances, dtype=np.float64)
    imp = np.asarray(impostor_distances, dtype=np.float64)
    if gen.size == 0 or imp.size == 0:
        raise ValueError("both genuine and impostor score lists must be non-empty")
    thresholds = np.unique(np.concatenate([gen, imp]))
    far = [0.0]
    tar = [0.0]
    for t in thresholds:
        far.append(float(np.mean(imp <= t)))
        tar.append(float(np.mean(gen <= t)))
    far_a = np.asarray(far)
    tar_a = np.asarray(tar)
    auc = float(np.trapz(tar_a, far_a))
    return RocCurve(far=far_a, tar=tar_a, auc=auc)


def average_precision(relevance: Sequence[bool]) -> float:
    """AP of one relevance-marked ranking (True = relevant at that rank)."""
    rel = np.asarray(relevance, dtype=bool)
    n_rel = int(rel.sum())
    if n_rel == 0:
        raise ValueError("ranking carries no relevant entries")
    hits = np.cumsum(rel)
    precisions = hits[rel] / (np.nonzero(rel)[0] + 1)
    return float(precisions.mean())


def mean_average_precision(rankings: Sequence[Sequence[bool]]) -> float:
    """Mean AP over relevance-marked rankings."""
    if not rankings:
        raise ValueError("no rankings")
    return float(np.mean([average_precision(r) for r in rankings]))


# ---------------------------------------------------------------------------
# retrieval harness over feature-map stores

@dataclass(frozen=True)
class GalleryItem:
    person_id: str
    shot_index: int
    fmap: FeatureMap


@dataclass(frozen=True)
class ProbeItem:
    probe_id: str
    true_person_id: str
    fmap: FeatureMap


@dataclass
class EvalRun:
    """Metrics for one benchmark configuration, averaged over repetitions."""

    cmc_mean: np.ndarray
    cmc_std: np.ndarray
    rank1_mean: float
    rank1_std: float
    rank3_mean: float
    rank3_std: float
    map_mean: float
    map_std: float
    roc_curve: RocCurve
    repetitions: int
    shots: int
    method: str
    trials: list[TrialResult] = field(default_factory=list)
    wall_time: float = 0.0


def _sample_shots(items: list[GalleryItem], shots: int, rng: np.random.Generator):
    by_id: dict[str, list[GalleryItem]] = {}
    for it in items:
        by_id.setdefault(it.person_id, []).append(it)
    chosen: list[GalleryItem] = []
    for pid in sorted(by_id):
        pool = sorted(by_id[pid], key=lambda g: g.shot_index)
        n = min(shots, len(pool))
        idx = rng.choice(len(pool), size=n, replace=False)
        chosen.extend(pool[i] for i in sorted(idx))
    return chosen


def run_retrieval_eval(
    gallery: Sequence[GalleryItem],
    probes: Sequence[ProbeItem],
    method: str = "recon",
    beta: float = 0.4,
    scales: Sequence[int] = (1, 2, 3),
    probe_scales: Sequence[int] | None = None,
    normalization: str = "none",
    shots: int = 1,
    repetitions: int = 1,
    seed: int = 7,
    workers: int = 1,
    max_rank: int | None = None,
) -> EvalRun:
    """Closed-set retrieval evaluation with seeded gallery-shot sampling.

    ``method`` is "recon" (sparse block reconstruction) or "resizing"
    (fixed-size bilinear baseline).  Repetitions resample the gallery
    shots; metric means and standard deviations are reported across
    repetitions.
    """
    if method not in ("recon", "resizing"):
        raise ValueError(f"unknown method {method!r}")
    if not gallery or not probes:
        raise ValueError("gallery and probes must be non-empty")
    gallery = list(gallery)
    probes = list(probes)
    gallery_ids = {g.person_id for g in gallery}
    missing = sorted({p.true_person_id for p in probes} - gallery_ids)
    if missing:
        raise ValueError(f"probe identities absent from gallery: {missing}")

    t0 = time.perf_counter()
    if probe_scales is None:
        probe_scales = scales
    probe_blocks: dict[int, BlockSet] = {}
    gal_blocks: dict[int, BlockSet] = {}
    if method == "recon":
        for i, p in enumerate(probes):
            probe_blocks[i] = block_set(p.fmap, probe_scales, normalization)
        for i, g in enumerate(gallery):
            gal_blocks[i] = block_set(g.fmap, scales, normalization)
    target_w = gallery[0].fmap.width
    target_h = gallery[0].fmap.height

    n_ids = len(gallery_ids)
    depth = max_rank or n_ids
    rng = np.random.default_rng(seed)
    cmcs, rank1s, rank3s, maps = [], [], [], []
    genuine: list[float] = []
    impostor: list[float] = []
    all_trials: list[TrialResult] = []
    gal_index = {id(g): i for i, g in enumerate(gallery)}

    for _ in range(repetitions):
        subset = _sample_shots(gallery, shots, rng)
        trials = []
        rankings = []
        for pi, p in enumerate(probes):
            pairs = []
            for g in subset:
                if method == "recon":
                    d = reconstruction_distance(
                        probe_blocks[pi], gal_blocks[gal_index[id(g)]], beta=beta
                    ).distance
                else:
                    d = resizing_baseline_distance(p.fmap, g.fmap, target_w, target_h)
                pairs.append((g.person_id, d))
            ranked = rank_distances(pairs)
            trials.append(TrialResult(p.probe_id, p.true_person_id, ranked))
            rankings.append(ranked.relevance(p.true_person_id))
            for pid, d in ranked.entries:
                (genuine if pid == p.true_person_id else impostor).append(d)
        curve = cmc(trials, max_rank=depth)
        cmcs.append(curve.values)
        rank1s.append(curve.rank_accuracy(1))
        rank3s.append(curve.rank_accuracy(3))
        maps.append(mean_average_precision(rankings))
        all_trials.extend(trials)

    cmc_arr = np.stack(cmcs)
    return EvalRun(
        cmc_mean=cmc_arr.mean(axis=0),
        cmc_std=cmc_arr.std(axis=0),
        rank1_mean=float(np.mean(rank1s)),
        rank1_std=float(np.std(rank1s)),
        rank3_mean=float(np.mean(rank3s)),
        rank3_std=float(np.std(rank3s)),
        map_mean=float(np.mean(maps)),
        map_std=float(np.std(maps)),
        roc_curve=roc(genuine, impostor),
        repetitions=repetitions,
        shots=shots,
        method=method,
        trials=all_trials,
        wall_time=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# timing benchmark: amortized gallery features vs recompute-per-probe

class _CountingExtractor:
    """Wraps an extractor callable, counting calls and accumulating time."""

    def __init__(self, fn: Callable[[np.ndarray], FeatureMap]):
        self.fn = fn
        self.calls = 0
        self.seconds = 0.0

    def __call__(self, image: np.ndarray) -> FeatureMap:
        t0 = time.perf_counter()
        out = self.fn(image)
        self.seconds += time.perf_counter() - t0
        self.calls += 1
        return out


@dataclass
class ModeTiming:
    mean_per_probe: float
    p95_per_probe: float
    total: float
    extract_seconds: float
    solve_seconds: float
    gallery_extraction_events: int
    gallery_extraction_passes: int
    per_probe: list[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "mean_per_probe_s": self.mean_per_probe,
            "p95_per_probe_s": self.p95_per_probe,
            "total_s": self.total,
            "extract_s": self.extract_seconds,
            "solve_s": self.solve_seconds,
            "gallery_extraction_events": self.gallery_extraction_events,
            "gallery_extraction_passes": self.gallery_extraction_passes,
        }


def _p95(values: list[float]) -> float:
    return float(np.percentile(np.asarray(values), 95))


def bench_matching(
    gallery_images: Sequence[np.ndarray],
    probe_images: Sequence[np.ndarray],
    extractor: Callable[[np.ndarray], FeatureMap],
    beta: float = 0.4,
    scales: Sequence[int] = (1,),
    normalization: str = "unit_l2",
    modes: Sequence[str] = ("recon_amortized", "recon_amortized_multiscale", "recompute_baseline"),
    multiscale: Sequence[int] = (1, 2),
    workers: int = 1,
    seed: int = 7,
) -> dict:
    """Time per-probe matching under amortized vs recompute cost structures.

    "recon_amortized" extracts each gallery feature once up front and
    reuses it for every probe; "recompute_baseline" re-extracts every
    gallery feature for every probe, emulating sliding-window methods
    that cannot share computation.  Extraction and solving are timed
    separately; disk I/O is excluded by construction (all in memory).
    """
    report: dict = {
        "meta": {
            "gallery_size": len(gallery_images),
            "probe_count": len(probe_images),
            "beta": beta,
            "scales": list(scales),
            "multiscale": list(multiscale),
            "normalization": normalization,
            "workers": workers,
            "seed": seed,
        },
        "modes": {},
    }

    def run_amortized(use_scales) -> ModeTiming:
        ext = _CountingExtractor(extractor)
        solve_s = 0.0
        t_setup0 = time.perf_counter()
        gal_sets = [block_set(ext(img), use_scales, normalization) for img in gallery_images]
        setup = time.perf_counter() - t_setup0
        gallery_events = ext.calls
        per_probe = []
        for img in probe_images:
            t0 = time.perf_counter()
            pset = block_set(ext(img), use_scales, normalization)
            for gset in gal_sets:
                s = reconstruction_distance(pset, gset, beta=beta)
                solve_s += s.wall_time
            per_probe.append(time.perf_counter() - t0)
        return ModeTiming(
            mean_per_probe=float(np.mean(per_probe)),
            p95_per_probe=_p95(per_probe),
            total=setup + float(np.sum(per_probe)),
            extract_seconds=ext.seconds,
            solve_seconds=solve_s,
            gallery_extraction_events=gallery_events,
            gallery_extraction_passes=1,
            per_probe=per_probe,
        )

    def run_recompute() -> ModeTiming:
        ext = _CountingExtractor(extractor)
        solve_s = 0.0
        per_probe = []
        gallery_events = 0
        for img in probe_images:
            t0 = time.perf_counter()
            pset = block_set(ext(img), scales, normalization)
            for gimg in gallery_images:
                before = ext.calls
                gset = block_set(ext(gimg), scales, normalization)
                gallery_events += ext.calls - before
                s = reconstruction_distance(pset, gset, beta=beta)
                solve_s += s.wall_time
            per_probe.append(time.perf_counter() - t0)
        return ModeTiming(
            mean_per_probe=float(np.mean(per_probe)),
            p95_per_probe=_p95(per_probe),
            total=float(np.sum(per_probe)),
            extract_seconds=ext.seconds,
            solve_seconds=solve_s,
            gallery_extraction_events=gallery_events,
            gallery_extraction_passes=len(probe_images),
            per_probe=per_probe,
        )

    for mode in modes:
        if mode == "recon_amortized":
            timing = run_amortized(scales)
        elif mode == "recon_amortized_multiscale":
            timing = run_amortized(multiscale)
        elif mode == "recompute_baseline":
            timing = run_recompute()
        else:
            raise ValueError(f"unknown benchmark mode {mode!r}")
        report["modes"][mode] = timing.as_dict()
    return report
