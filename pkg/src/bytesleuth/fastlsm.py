"""Hierarchical occlusion search for the single most influential region.

Level 0 splits the file into ``n`` sections and ranks them with a small
least-squares surrogate. Each later level splits the current region into
``n`` parts (the last part absorbs any remainder), occludes each part in
the original bytes, and descends into the part whose occlusion lowers the
score the most. Ties go to the lowest offset. The search stops once the
current region is no longer than ``beta``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .detector import DetectorHandle
from .errors import EmptyInput
from .explain import KernelConfig, explain_instance
from .segmentation import OcclusionPolicy, Superpixel, SuperpixelMap, Zero


@dataclass(frozen=True)
class FastLsmConfig:
    n: int = 2
    beta: int = 1024
    policy: OcclusionPolicy = field(default_factory=Zero)
    seed: int = 0
    ridge: float = 1e-3

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("branching factor n must be >= 2")
        if self.beta < 1:
            raise ValueError("beta must be >= 1")


@dataclass(frozen=True)
class HotRegion:
    start: int
    end: int
    drop: float
    queries_used: int
    lsm_queries: int = 0
    refinement_queries: int = 0
    levels: tuple[tuple[int, int, float], ...] = field(default=(), repr=False)

    def to_record(self) -> dict:
        return {"start": self.start, "end": self.end, "drop": self.drop, "queries": self.queries_used}


def split_region(start: int, end: int, n: int) -> list[tuple[int, int]]:
    """``n`` contiguous parts of ``[start, end)``; the last absorbs the remainder."""
    size = (end - start) // n
    if size == 0:
        return [(start, end)]
    bounds = [start + size * i for i in range(n)] + [end]
    return list(zip(bounds[:-1], bounds[1:]))


def occlude(data: bytes, start: int, end: int, policy: OcclusionPolicy) -> bytes:
    return data[:start] + policy.fill(start, end - start) + data[end:]


def fast_lsm(data: bytes, detector: DetectorHandle, cfg: FastLsmConfig = FastLsmConfig(), *, jobs: int = 1) -> HotRegion:
    if not data:
        raise EmptyInput("cannot search an empty input")
    L = len(data)
    q0 = detector.query_counter

    if L <= cfg.beta:
        base = detector.score(data)
        occluded = detector.score(cfg.policy.fill(0, L))
        return HotRegion(0, L, base - occluded, detector.query_counter - q0)

    sections = split_region(0, L, cfg.n)
    smap = SuperpixelMap(tuple(Superpixel(s, e - s) for s, e in sections), L)
    expl, samples = explain_instance(
        data, smap, detector, cfg.policy, KernelConfig(), count=4 * cfg.n,
        ridge=cfg.ridge, seed=cfg.seed, jobs=jobs, return_samples=True,
    )
    base = samples[0].score
    lsm_queries = detector.query_counter - q0
    best = int(np.argmax(expl.weights))
    start, end = sections[best]

    levels = []
    last_score = None
    while end - start > cfg.beta:
        parts = split_region(start, end, cfg.n)
        if len(parts) == 1:
            break
        scores = detector.score_many([occlude(data, s, e, cfg.policy) for s, e in parts], jobs=jobs)
        k = min(range(len(parts)), key=lambda i: (scores[i], parts[i][0]))
        start, end = parts[k]
        last_score = scores[k]
        levels.append((start, end, scores[k]))
    refinement = detector.query_counter - q0 - lsm_queries

    if last_score is None:
        last_score = detector.score(occlude(data, start, end, cfg.policy))
    return HotRegion(
        start, end, base - last_score, detector.query_counter - q0,
        lsm_queries=lsm_queries, refinement_queries=refinement, levels=tuple(levels),
    )


def brute_force_hot_region(data: bytes, detector: DetectorHandle, window: int,
                           policy: OcclusionPolicy = Zero()) -> HotRegion:
    """Occlude every ``window``-aligned block; return the largest drop (lowest offset on ties)."""
    if not data:
        raise EmptyInput("cannot search an empty input")
    if not 1 <= window <= len(data):
        raise ValueError("window must lie in [1, len(data)]")
    q0 = detector.query_counter
    base = detector.score(data)
    best = None
    for s in range(0, len(data), window):
        e = min(s + window, len(data))
        drop = base - detector.score(occlude(data, s, e, policy))
        if best is None or drop > best[2]:
            best = (s, e, drop)
    return HotRegion(best[0], best[1], best[2], detector.query_counter - q0)
