"""Explanation-guided evasion and the random-transformation baseline.

Each guided round fits a fresh surrogate (or runs the hierarchical search),
picks the pixels whose removal the surrogate expects to flip the verdict,
turns them into one transformation plan, verifies the plan, and only then
queries the detector. Every modification is kept for later rounds.
"""
from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from os import PathLike
from typing import Callable, Sequence

import numpy as np

from .detector import DetectorHandle
from .errors import BytesleuthError
from .explain import (
    DEFAULT_KEEP_PROB,
    DEFAULT_RIDGE,
    KernelConfig,
    LinearExplanation,
    explain_instance,
    mine_adversarial_data,
)
from .fastlsm import FastLsmConfig, fast_lsm
from .pe import PeError, PeImage, parse_pe, serialize
from .segmentation import (
    DEFAULT_CHUNK,
    Adversarial,
    OcclusionPolicy,
    SuperpixelMap,
    Zero,
    segment_by_sections,
    segment_from_listing,
)
from .transform import (
    JMP_LEN,
    TransformAction,
    TransformError,
    TransformPlan,
    action_record,
    check_datadisp_range,
    plan_append,
    plan_datadisp,
    plan_disp,
)
from .verifier import verify_preservation

ACTIONS = frozenset({"Append", "Disp", "DataDisp"})


class UnsupportedBinary(BytesleuthError, ValueError):
    pass


class NoPositiveWeights(BytesleuthError, ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    max_iterations: int = 200
    size_budget_fraction: float = 0.05
    chunk: int = DEFAULT_CHUNK
    fastlsm: FastLsmConfig | None = None
    filler: OcclusionPolicy = field(default_factory=Zero)
    allowed_actions: frozenset = ACTIONS
    seed: int = 0
    ridge: float = DEFAULT_RIDGE
    kernel: KernelConfig = field(default_factory=KernelConfig)
    samples: int | None = None
    keep_prob: float = DEFAULT_KEEP_PROB
    listing: tuple | None = None
    adversarial_pattern: bytes | None = None
    max_queries: int | None = None
    min_flips: int = 1
    mine_cutoff: float = 0.01
    top_k: int = 5
    jobs: int = 1

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0.0 <= self.size_budget_fraction <= 1.0:
            raise ValueError("size_budget_fraction must lie in [0, 1]")
        if not set(self.allowed_actions) <= ACTIONS:
            raise ValueError(f"unknown actions {set(self.allowed_actions) - ACTIONS}")
        object.__setattr__(self, "allowed_actions", frozenset(self.allowed_actions))

    def to_dict(self) -> dict:
        return {
            "max_iterations": self.max_iterations,
            "size_budget_fraction": self.size_budget_fraction,
            "chunk": self.chunk,
            "fastlsm": None if self.fastlsm is None else {"n": self.fastlsm.n, "beta": self.fastlsm.beta},
            "filler": self.filler.describe(),
            "allowed_actions": sorted(self.allowed_actions),
            "seed": self.seed,
            "ridge": self.ridge,
            "kernel": {"metric": self.kernel.metric, "sigma": self.kernel.sigma, "kind": self.kernel.kind},
            "samples": self.samples,
            "keep_prob": self.keep_prob,
            "listing_blocks": len(self.listing) if self.listing else 0,
            "max_queries": self.max_queries,
            "min_flips": self.min_flips,
        }


@dataclass(frozen=True)
class AttackRound:
    index: int
    explanation_summary: tuple[tuple[int, float], ...]
    chosen_region: tuple[int, int] | None
    action: object
    score_before: float
    score_after: float
    size_so_far: int
    queries_so_far: int
    verified: bool = True

    def to_record(self) -> dict:
        return {
            "index": self.index,
            "explanation_summary": [[i, w] for i, w in self.explanation_summary],
            "chosen_region": list(self.chosen_region) if self.chosen_region else None,
            "action": action_record(self.action) if self.action is not None else None,
            "score_before": self.score_before,
            "score_after": self.score_after,
            "size_so_far": self.size_so_far,
            "queries_so_far": self.queries_so_far,
            "verified": self.verified,
        }


@dataclass
class AttackTrace:
    rounds: list[AttackRound]
    outcome: str
    final_bytes: bytes = field(repr=False)
    total_queries: int
    original_size: int = 0
    plans: list[TransformPlan] = field(default_factory=list, repr=False)

    @property
    def size_growth(self) -> float:
        return len(self.final_bytes) / self.original_size - 1.0 if self.original_size else 0.0

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_record(), sort_keys=True) + "\n" for r in self.rounds)

    def write(self, path: str | PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())


# Perturbation selection -----------------------------------------------------

def select_perturbation(
    e: LinearExplanation,
    smap: SuperpixelMap,
    current_v,
    threshold: float,
    eligible=None,
) -> set[int]:
    """Greedy minimal removal set under the linear surrogate.

    Pixels that are present, eligible and carry positive weight are removed
    in descending weight order (lower index first on ties) until the
    predicted score drops below ``threshold``.
    """
    w = np.asarray(e.weights, dtype=float)
    v = np.asarray(current_v)
    if w.shape != (len(smap),) or v.shape != w.shape:
        raise ValueError("explanation, map and vector disagree on pixel count")
    mask = (v == 1) & (w > 0)
    if eligible is not None:
        mask &= np.asarray(eligible, dtype=bool)
    candidates = sorted(np.flatnonzero(mask), key=lambda i: (-w[i], i))
    if not candidates:
        raise NoPositiveWeights("no removable pixel pushes towards malware")
    g = e.intercept + float(w[v == 1].sum())
    removed = set()
    for i in candidates:
        if g < threshold:
            break
        removed.add(int(i))
        g -= w[i]
    return removed


# Shared plumbing ------------------------------------------------------------

@dataclass
class _Target:
    image: PeImage | None
    smap: SuperpixelMap | None
    kinds: list[str | None]  # per pixel: "DataDisp", "Disp" or None (not transformable)


def _sub_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([seed, *path]).generate_state(1)[0])


def _prepare(data: bytes, cfg: AttackConfig) -> _Target:
    try:
        image = parse_pe(data)
    except PeError:
        image = None
    if image is None or (image.has_relocations and "Append" in cfg.allowed_actions):
        if "Append" not in cfg.allowed_actions:
            raise UnsupportedBinary("input is not a transformable PE32 and Append is not allowed")
        return _Target(None, None, [])
    if image.has_relocations:
        raise UnsupportedBinary("image carries base relocations")

    code = [i for i, s in enumerate(image.sections) if s.is_executable]
    other = [i for i in range(len(image.sections)) if i not in code]
    maps = [segment_by_sections(image, cfg.chunk, file_length=len(data), sections=other)]
    if cfg.listing:
        maps.append(segment_from_listing(cfg.listing, len(data)))
    else:
        maps.append(segment_by_sections(image, cfg.chunk, file_length=len(data), sections=code))
    pixels = sorted((p for m in maps for p in m.pixels), key=lambda p: p.start)
    smap = SuperpixelMap(tuple(pixels), len(data))

    oep = image.section_at_rva(image.address_of_entry_point)
    oep_off = None if oep is None else oep.raw_offset + image.address_of_entry_point - oep.virtual_address
    kinds = []
    for p in smap.pixels:
        sec = image.section_at_offset(p.start)
        kind = None
        if sec is None or p.end > sec.raw_offset + sec.mapped_span:
            kind = None
        elif sec.is_executable:
            inside_oep = oep_off is not None and p.start < oep_off < p.end
            if cfg.listing and "Disp" in cfg.allowed_actions and p.length >= JMP_LEN and not inside_oep:
                kind = "Disp"
        elif "DataDisp" in cfg.allowed_actions:
            try:
                check_datadisp_range(image, (p.start, p.end))
                kind = "DataDisp"
            except (TransformError, PeError):
                kind = None
        kinds.append(kind)
    return _Target(image, smap, kinds)


def _with_length(smap: SuperpixelMap, n: int) -> SuperpixelMap:
    return smap if smap.file_length == n else SuperpixelMap(smap.pixels, n)


def _largest_fitting(items: Sequence, build: Callable[[Sequence], TransformPlan | None], budget: int):
    """Plan for the longest prefix of ``items`` whose size_delta fits ``budget``."""
    if not items:
        return None, 0
    plan = build(items)
    if plan is not None and plan.size_delta <= budget:
        return plan, len(items)
    lo, hi, best = 1, len(items) - 1, (None, 0)
    while lo <= hi:
        mid = (lo + hi) // 2
        plan = build(items[:mid])
        if plan is not None and plan.size_delta <= budget:
            best = (plan, mid)
            lo = mid + 1
        else:
            hi = mid - 1
    return best


def _datadisp_builder(image: PeImage, filler: OcclusionPolicy):
    def build(pixels):
        return plan_datadisp(image, [(p.start, p.end) for p in pixels], filler, only_changed=True)
    return build


def _append_payload(cfg: AttackConfig, mined: list, n: int, seed: int) -> bytes:
    benign = b"".join(d.data for d in mined if d.direction == "benign")
    if benign:
        return Adversarial(benign).fill(0, n)
    if cfg.adversarial_pattern:
        return Adversarial(cfg.adversarial_pattern).fill(0, n)
    return np.random.default_rng(seed).integers(0, 256, size=n, dtype=np.uint8).tobytes()


def _plan_round(image, smap, kinds, chosen, remaining, cfg, mined, seed):
    """One plan for this round: ``(plan or None, action, used pixels)``, or None when stuck.

    Data pixels go into a single DataDisp (lowest-weight pixels dropped until
    it fits the budget); otherwise the top code pixel is displaced. Append
    is the fallback, capped at the remaining budget.
    """
    data_px = [i for i in chosen if kinds[i] == "DataDisp"]
    code_px = [i for i in chosen if kinds[i] == "Disp"]
    if data_px:
        plan, k = _largest_fitting([smap[i] for i in data_px], _datadisp_builder(image, cfg.filler), remaining)
        if plan is not None:
            return plan, plan.action, data_px[:k]
    elif code_px:
        i = code_px[0]
        plan = plan_disp(image, (smap[i].start, smap[i].end), cfg.filler)
        if plan.size_delta <= remaining:
            return plan, plan.action, [i]
    if "Append" not in cfg.allowed_actions:
        return None
    payload = _append_payload(cfg, mined, min(remaining, cfg.chunk), seed)
    if image is None:
        return None, TransformAction("Append", payload=payload), []
    plan = plan_append(image, payload)
    return plan, plan.action, []


# Guided attack ---------------------------------------------------------------

def run_attack(b: bytes, d: DetectorHandle, cfg: AttackConfig = AttackConfig()) -> AttackTrace:
    b = bytes(b)
    target = _prepare(b, cfg)
    q0 = d.query_counter
    limit = len(b) + int(cfg.size_budget_fraction * len(b))

    def spent() -> int:
        return d.query_counter - q0

    current = b
    score = d.score(b)
    if score < d.threshold:
        return AttackTrace([], "AlreadyBenign", b, spent(), len(b))

    image = target.image
    eligible = np.array([k is not None for k in target.kinds], dtype=bool)
    rounds: list[AttackRound] = []
    plans: list[TransformPlan] = []
    mined: list = []
    outcome = "IterationsExhausted"

    for it in range(cfg.max_iterations):
        remaining = limit - len(current)
        if remaining <= 0:
            outcome = "BudgetExceeded"
            break
        summary: tuple = ()
        chosen: list[int] = []
        smap = None if target.smap is None else _with_length(target.smap, len(current))

        if smap is not None and eligible.any():
            if cfg.fastlsm is not None:
                if cfg.max_queries is not None and spent() + 4 * cfg.fastlsm.n + 64 > cfg.max_queries:
                    break
                region = fast_lsm(current, d, cfg.fastlsm, jobs=cfg.jobs)
                hits = [i for i, p in enumerate(smap.pixels)
                        if eligible[i] and p.start < region.end and region.start < p.end]
                overlap = {i: min(smap[i].end, region.end) - max(smap[i].start, region.start) for i in hits}
                chosen = sorted(hits, key=lambda i: (-overlap[i], i))
                summary = tuple((i, float(overlap[i])) for i in chosen[:cfg.top_k])
            else:
                count = cfg.samples or max(4 * len(smap), 256)
                if cfg.max_queries is not None and spent() + count + 1 > cfg.max_queries:
                    break
                expl = explain_instance(
                    current, smap, d, cfg.filler, cfg.kernel, count, cfg.ridge,
                    _sub_seed(cfg.seed, it, 0), keep_prob=cfg.keep_prob, jobs=cfg.jobs,
                )
                summary = tuple(expl.top(cfg.top_k))
                mined = mine_adversarial_data([(expl, smap, current)], cfg.mine_cutoff) + mined
                ones = np.ones(len(smap), dtype=np.uint8)
                try:
                    picked = select_perturbation(expl, smap, ones, d.threshold, eligible)
                    if not picked:
                        # The surrogate already predicts benign; push on the strongest positive pixel anyway.
                        pos = [i for i in np.flatnonzero(eligible & (expl.weights > 0))]
                        picked = {max(pos, key=lambda i: (expl.weights[i], -i))}
                    chosen = sorted(picked, key=lambda i: (-expl.weights[i], i))
                except NoPositiveWeights:
                    chosen = []

        step = _plan_round(image, smap, target.kinds, chosen, remaining, cfg, mined, _sub_seed(cfg.seed, it, 1))
        if step is None:
            outcome = "BudgetExceeded" if chosen else "IterationsExhausted"
            break
        plan, action, used = step
        new_image = plan.new_image if plan is not None else None

        if new_image is None:
            new_bytes, verified = current + action.payload, True
        else:
            verified = verify_preservation(image, new_image, plan).reconstructed_ok
            new_bytes = serialize(new_image)
        region = action.target or (len(current), len(current) + len(action.payload))
        if not verified:
            eligible[used] = False
            rounds.append(AttackRound(it, summary, region, action, score, score, len(current), spent(), False))
            continue

        after = d.score(new_bytes)
        rounds.append(AttackRound(it, summary, region, action, score, after, len(new_bytes), spent(), True))
        current, score = new_bytes, after
        if new_image is not None:
            image = new_image
            plans.append(plan)
        eligible[used] = False
        if score < d.threshold:
            outcome = "Evaded"
            break
        if cfg.max_queries is not None and spent() >= cfg.max_queries:
            break

    return AttackTrace(rounds, outcome, current, spent(), len(b), plans)


# Random baseline ---------------------------------------------------------------

@dataclass
class BaselineReport:
    success: bool
    outcome: str
    variants_tried: int
    flips: int
    total_queries: int
    best_score: float
    original_size: int
    best_bytes: bytes = field(repr=False)
    first_success: int | None = None

    @property
    def size_growth(self) -> float:
        return len(self.best_bytes) / self.original_size - 1.0 if self.original_size else 0.0

    def to_record(self) -> dict:
        return {
            "success": self.success,
            "outcome": self.outcome,
            "variants_tried": self.variants_tried,
            "flips": self.flips,
            "queries": self.total_queries,
            "best_score": self.best_score,
            "size_growth": self.size_growth,
            "first_success": self.first_success,
        }


def _random_variant(b: bytes, target: _Target, cfg: AttackConfig, rng: np.random.Generator, limit: int):
    """One variant: each transformable pixel is picked with probability 0.5."""
    image = target.image
    smap = target.smap
    picked = [i for i, k in enumerate(target.kinds) if k is not None and rng.random() < 0.5]
    picked = [picked[j] for j in rng.permutation(len(picked))]
    budget = limit - len(b)
    plans = []
    data_px = sorted(i for i in picked if target.kinds[i] == "DataDisp")
    if data_px:
        # Keep a random subset that fits: the shuffled order decides who is dropped.
        order = [i for i in picked if target.kinds[i] == "DataDisp"]
        plan, _ = _largest_fitting([smap[i] for i in order], _datadisp_builder(image, cfg.filler), budget)
        if plan is not None:
            plans.append(plan)
            image = plan.new_image
            budget -= plan.size_delta
    for i in (i for i in picked if target.kinds[i] == "Disp"):
        plan = plan_disp(image, (smap[i].start, smap[i].end), cfg.filler)
        if plan.size_delta <= budget:
            plans.append(plan)
            image = plan.new_image
            budget -= plan.size_delta
    return plans


def run_random_baseline(b: bytes, d: DetectorHandle, cfg: AttackConfig = AttackConfig(),
                        variants: int | None = None) -> BaselineReport:
    b = bytes(b)
    variants = cfg.max_iterations if variants is None else variants
    target = _prepare(b, cfg)
    q0 = d.query_counter
    limit = len(b) + int(cfg.size_budget_fraction * len(b))
    base = d.score(b)
    if base < d.threshold:
        return BaselineReport(False, "AlreadyBenign", 0, 0, d.query_counter - q0, base, len(b), b)

    best, best_bytes, flips, first, tried = base, b, 0, None, 0
    for k in range(variants):
        if cfg.max_queries is not None and d.query_counter - q0 >= cfg.max_queries:
            break
        tried += 1
        rng = np.random.default_rng(_sub_seed(cfg.seed, k, 2))
        if target.image is None:
            n = limit - len(b)
            if n <= 0:
                continue
            variant = b + rng.integers(0, 256, size=n, dtype=np.uint8).tobytes()
        else:
            plans = _random_variant(b, target, cfg, rng, limit)
            if not plans:
                continue
            prev = target.image
            ok = True
            for plan in plans:
                if not verify_preservation(prev, plan.new_image, plan).reconstructed_ok:
                    ok = False
                    break
                prev = plan.new_image
            if not ok:
                continue
            variant = serialize(plans[-1].new_image)
        s = d.score(variant)
        if s < best:
            best, best_bytes = s, variant
        if s < d.threshold:
            flips += 1
            first = k if first is None else first
            if flips >= cfg.min_flips:
                break
    success = flips >= cfg.min_flips and flips > 0
    return BaselineReport(success, "Evaded" if success else "IterationsExhausted", tried, flips,
                          d.query_counter - q0, best, len(b), best_bytes, first)


# Comparison ------------------------------------------------------------------

def compare_strategies(b: bytes, d: DetectorHandle, cfg: AttackConfig = AttackConfig(),
                       strategies: Sequence[str] = ("guided", "random", "append-only")) -> list[dict]:
    """Run each strategy under the same query and size budgets; one row per strategy."""
    rows = []
    for name in strategies:
        q0 = d.query_counter
        if name == "guided":
            t = run_attack(b, d, cfg)
            row = (t.outcome in ("Evaded", "AlreadyBenign"), len(t.rounds), t.total_queries, t.size_growth)
        elif name == "random":
            r = run_random_baseline(b, d, cfg)
            row = (r.success, r.variants_tried, r.total_queries, r.size_growth)
        elif name == "append-only":
            t = run_attack(b, d, _replace(cfg, allowed_actions=frozenset({"Append"})))
            row = (t.outcome in ("Evaded", "AlreadyBenign"), len(t.rounds), t.total_queries, t.size_growth)
        else:
            raise ValueError(f"unknown strategy {name!r}")
        assert row[2] == d.query_counter - q0
        rows.append({"strategy": name, "success": row[0], "rounds": row[1], "queries": row[2], "size_growth": row[3]})
    return rows


def _replace(cfg: AttackConfig, **changes) -> AttackConfig:
    return dataclasses.replace(cfg, **changes)


def write_comparison(path: str | PathLike, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["strategy", "success", "rounds", "queries", "size_growth"])
        for r in rows:
            out.writerow([r["strategy"], int(bool(r["success"])), r["rounds"], r["queries"], repr(float(r["size_growth"]))])
