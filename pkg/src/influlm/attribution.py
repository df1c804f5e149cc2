"""Rankings, group aggregates, robustness across query-set sizes, and the difficulty-flip planner."""
from __future__ import annotations

import logging
import math
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .influence import InfluenceRecord
from .tinylm import Example, InvalidInput

logger = logging.getLogger(__name__)

GROUP_KEYS = ("domain", "category", "difficulty")
DEFAULT_MATH_EASY_THRESHOLD = 2
DEFAULT_CODE_HARD_THRESHOLD = 4


@dataclass(frozen=True)
class GroupStats:
    key: str
    count: int
    mean: float
    stderr: float

    def to_dict(self) -> dict:
        return {"key": self.key, "count": self.count, "mean": self.mean, "stderr": self.stderr}


def _group_stats(key, values: Sequence[float]) -> GroupStats:
    v = np.asarray(values, dtype=np.float64)
    se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
    return GroupStats(str(key), len(v), float(v.mean()), se)


def _check_single_query_set(records: Sequence[InfluenceRecord]) -> None:
    ids = {r.query_set_id for r in records}
    if len(ids) > 1:
        raise InvalidInput(f"records mix query sets {sorted(ids)}")


def rank_examples(records: Sequence[InfluenceRecord], positive_only: bool = True) -> list[tuple[str, float]]:
    """Descending by score, ties by id; ``positive_only`` drops scores <= 0."""
    _check_single_query_set(records)
    pairs = [(r.example_id, r.instance_score) for r in records if not positive_only or r.instance_score > 0]
    return sorted(pairs, key=lambda p: (-p[1], p[0]))


def aggregate_by(records: Sequence[InfluenceRecord], dataset: Sequence[Example] | Mapping[str, Example],
                 key: str) -> list[GroupStats]:
    """Mean and standard error of instance scores per value of ``key``; unannotated examples are skipped."""
    if key not in GROUP_KEYS:
        raise InvalidInput(f"unknown group key {key!r}; expected one of {GROUP_KEYS}")
    by_id = dataset if isinstance(dataset, Mapping) else {e.id: e for e in dataset}
    groups: dict = defaultdict(list)
    for r in records:
        if r.example_id not in by_id:
            raise InvalidInput(f"record {r.example_id} has no example in the dataset")
        value = getattr(by_id[r.example_id], key)
        if value is not None:
            groups[value].append(r.instance_score)
    return [_group_stats(k, groups[k]) for k in sorted(groups, key=lambda k: (str(type(k)), k))]


def aggregate_behavior_influence(span_records: Sequence[InfluenceRecord],
                                 dataset: Sequence[Example] | Mapping[str, Example] | None = None) -> list[GroupStats]:
    """Mean span score per behavior label over every scored span."""
    by_id = None if dataset is None else (dataset if isinstance(dataset, Mapping) else {e.id: e for e in dataset})
    groups: dict[str, list[float]] = defaultdict(list)
    for r in span_records:
        if by_id is not None and r.example_id not in by_id:
            raise InvalidInput(f"record {r.example_id} has no example in the dataset")
        for s in r.span_scores or ():
            groups[s.label].append(s.score)
    if not groups:
        logger.warning("no annotated spans with scores; behavior aggregation is empty")
        return []
    return [_group_stats(label, groups[label]) for label in sorted(groups)]


def rank_correlation(records_by_n: Mapping[int, Sequence[InfluenceRecord]], reference_n: int) -> dict[int, float]:
    """Pearson correlation of each n's instance-score vector with the ``reference_n`` vector."""
    if reference_n not in records_by_n:
        raise InvalidInput(f"reference n={reference_n} missing")
    ref = {r.example_id: r.instance_score for r in records_by_n[reference_n]}
    ids = sorted(ref)
    ref_vec = np.array([ref[i] for i in ids])
    out = {}
    for n, recs in sorted(records_by_n.items()):
        scores = {r.example_id: r.instance_score for r in recs}
        if sorted(scores) != ids:
            raise InvalidInput(f"records for n={n} cover different example ids than the reference")
        if n == reference_n:
            out[n] = 1.0
            continue
        vec = np.array([scores[i] for i in ids])
        out[n] = float(np.corrcoef(vec, ref_vec)[0, 1])
    return out


# --------------------------------------------------------------------------
# difficulty flip


@dataclass
class ReweightPlan:
    removals: list[str]
    additions: list[str]
    histogram: dict[str, int]
    shortfall: dict[str, int] = field(default_factory=dict)
    reverse: bool = False

    def to_dict(self) -> dict:
        return {"removals": self.removals, "additions": self.additions, "histogram": self.histogram,
                "shortfall": self.shortfall, "reverse": self.reverse}


def _histogram(examples: Sequence[Example]) -> dict[str, int]:
    counts = Counter(f"{e.domain}:{e.difficulty if e.difficulty is not None else 'na'}" for e in examples)
    return dict(sorted(counts.items()))


def _draw(candidates: Sequence[Example], k: int, hardest_first: bool, rng: random.Random) -> list[Example]:
    """Take ``k`` candidates tier by tier, shuffling within each difficulty tier."""
    tiers: dict[int, list[Example]] = defaultdict(list)
    for e in candidates:
        tiers[e.difficulty].append(e)
    picked: list[Example] = []
    for d in sorted(tiers, reverse=hardest_first):
        tier = sorted(tiers[d], key=lambda e: e.id)
        rng.shuffle(tier)
        picked.extend(tier[:k - len(picked)])
        if len(picked) == k:
            break
    return picked


def _swap(dataset, pool, domain, remove_pred, add_pred, add_hardest_first, present, rng):
    # when the pool runs short, the examples furthest from the target side are swapped first
    targets = sorted((e for e in dataset if e.domain == domain and e.difficulty is not None and remove_pred(e.difficulty)),
                     key=lambda e: (e.difficulty if add_hardest_first else -e.difficulty, e.id))
    candidates = [e for e in pool if e.domain == domain and e.difficulty is not None
                  and add_pred(e.difficulty) and e.id not in present]
    adds = _draw(candidates, len(targets), add_hardest_first, rng)
    for e in adds:
        present.add(e.id)
    return targets[:len(adds)], adds, len(targets) - len(adds)


def difficulty_flip(dataset: Sequence[Example], pool: Sequence[Example],
                    math_easy_threshold: int = DEFAULT_MATH_EASY_THRESHOLD,
                    code_hard_threshold: int = DEFAULT_CODE_HARD_THRESHOLD,
                    reverse: bool = False, seed: int = 0) -> ReweightPlan:
    """Swap easy math for harder pool math and hard code for easier pool code, preserving size.

    Math with difficulty <= ``math_easy_threshold`` is replaced by pool math
    above it, hardest tier first; code with difficulty >= ``code_hard_threshold``
    by pool code below it, easiest tier first. ``reverse`` runs the control
    condition: hard math becomes easy math and easy code becomes hard code.
    When the pool runs short only as many removals as replacements are kept,
    and the missing count is reported in ``shortfall``.
    """
    for t in (math_easy_threshold, code_hard_threshold):
        if not 1 <= t <= 5:
            raise InvalidInput(f"threshold {t} outside [1, 5]")
    rng = random.Random(seed)
    present = {e.id for e in dataset}
    tm, tc = math_easy_threshold, code_hard_threshold
    if not reverse:
        math_rm, math_add, math_short = _swap(dataset, pool, "math", lambda d: d <= tm, lambda d: d > tm, True, present, rng)
        code_rm, code_add, code_short = _swap(dataset, pool, "code", lambda d: d >= tc, lambda d: d < tc, False, present, rng)
    else:
        math_rm, math_add, math_short = _swap(dataset, pool, "math", lambda d: d > tm, lambda d: d <= tm, False, present, rng)
        code_rm, code_add, code_short = _swap(dataset, pool, "code", lambda d: d < tc, lambda d: d >= tc, True, present, rng)
    removals = [e.id for e in math_rm + code_rm]
    additions = [e.id for e in math_add + code_add]
    shortfall = {k: v for k, v in (("math", math_short), ("code", code_short)) if v}
    if shortfall:
        logger.warning("pool too small for a full flip; shortfall %s", shortfall)
    removed = set(removals)
    result = [e for e in dataset if e.id not in removed] + math_add + code_add
    return ReweightPlan(removals, additions, _histogram(result), shortfall, reverse)


def apply_plan(dataset: Sequence[Example], pool: Sequence[Example], plan: ReweightPlan) -> list[Example]:
    removed = set(plan.removals)
    by_id = {e.id: e for e in pool}
    return [e for e in dataset if e.id not in removed] + [by_id[i] for i in plan.additions]
