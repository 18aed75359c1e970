"""Combined-score ranking, multi-label composition metrics and the bias sweep.

Pair scores are ``P(a|x) + P(o|x) [+ P((a,o)|x)]`` with each distribution a
softmax over ``logit_scale * cosine``. Rankings are descending by score with
ties broken by ``(attribute_id, object_id)`` ascending.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import (
    DatasetManifest,
    PairComposition,
    SampleRecord,
    SolutionSpace,
    build_pair_seen_set,
    build_solution_space,
    expand_pairs,
)
from .model import Scores, predict_scores


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass(frozen=True)
class RankedPrediction:
    pairs: tuple[PairComposition, ...]
    scores: np.ndarray

    def __len__(self):
        return len(self.pairs)

    @property
    def top1(self) -> PairComposition:
        return self.pairs[0]


def pair_scores(
    s_attr: np.ndarray | None,
    s_obj: np.ndarray | None,
    s_pair: np.ndarray | None,
    space: SolutionSpace,
    n_objects: int,
    logit_scale: float,
) -> np.ndarray:
    """Summed branch probabilities for every pair of ``space``.

    Inputs may be 1-D (one sample) or 2-D (batch). ``s_pair`` is indexed over
    the full attribute-major ``A x O`` pair table.
    """
    if s_attr is None and s_obj is None and s_pair is None:
        raise ValueError("no branch scores given")
    if not space.pairs:
        raise ValueError("empty solution space")
    a_idx, o_idx = space.index_arrays()
    ref = next(s for s in (s_attr, s_obj, s_pair) if s is not None)
    single = np.ndim(ref) == 1
    lead = () if single else (np.shape(ref)[0],)
    total = np.zeros(lead + (len(space.pairs),))
    if s_attr is not None:
        total += softmax(logit_scale * np.asarray(s_attr, dtype=np.float64))[..., a_idx]
    if s_obj is not None:
        total += softmax(logit_scale * np.asarray(s_obj, dtype=np.float64))[..., o_idx]
    if s_pair is not None:
        total += softmax(logit_scale * np.asarray(s_pair, dtype=np.float64))[..., a_idx * n_objects + o_idx]
    return total


def unseen_mask(space: SolutionSpace, pair_seen: Iterable[PairComposition]) -> np.ndarray:
    seen = frozenset(pair_seen)
    return np.array([p not in seen for p in space.pairs], dtype=bool)


def rank_order(scores: np.ndarray, space: SolutionSpace) -> np.ndarray:
    """Indices into ``space.pairs`` sorted by the ranking rule."""
    a_idx, o_idx = space.index_arrays()
    return np.lexsort((o_idx, a_idx, -scores))


def combine_and_rank(
    s_attr,
    s_obj,
    space: SolutionSpace,
    n_objects: int,
    s_pair=None,
    bias: float = 0.0,
    pair_seen: Iterable[PairComposition] = (),
    logit_scale: float = 1 / 0.07,
) -> RankedPrediction:
    scores = pair_scores(s_attr, s_obj, s_pair, space, n_objects, logit_scale)
    if bias:
        unseen = unseen_mask(space, pair_seen)
        if np.isinf(bias):
            # keep the ordering inside each group instead of collapsing to inf
            shift = (scores.max() - scores.min() + 1.0) * (1 if bias > 0 else -1)
            scores = scores + shift * unseen
        else:
            scores = scores + bias * unseen
    order = rank_order(scores, space)
    return RankedPrediction(tuple(space.pairs[i] for i in order), scores[order])


@dataclass(frozen=True)
class InstanceMetrics:
    exact_match: float
    top1_p: float
    top5_r: float
    coverage: int
    top1_p_attr: float
    top1_p_obj: float
    n_truth: int


def instance_metrics(ranked: RankedPrediction, truth: Iterable[PairComposition]) -> InstanceMetrics:
    truth = frozenset(truth)
    if not truth:
        raise ValueError("truth set must be non-empty")
    position = {p: i for i, p in enumerate(ranked.pairs)}
    missing = truth - position.keys()
    if missing:
        raise ValueError(f"truth pairs outside the solution space: {sorted(missing)[:5]}")
    coverage = max(position[p] for p in truth) + 1
    top = ranked.pairs[0]
    return InstanceMetrics(
        exact_match=float(coverage == len(truth)),
        top1_p=float(top in truth),
        top5_r=len(truth & set(ranked.pairs[:5])) / len(truth),
        coverage=coverage,
        top1_p_attr=float(top.attribute in {p.attribute for p in truth}),
        top1_p_obj=float(top.object in {p.object for p in truth}),
        n_truth=len(truth),
    )


@dataclass
class BiasSweepCurve:
    biases: np.ndarray
    seen_acc: np.ndarray
    unseen_acc: np.ndarray

    def to_list(self) -> list[dict]:
        def enc(b):
            return "-inf" if b == -np.inf else "+inf" if b == np.inf else float(b)

        return [
            {"bias": enc(b), "seen": float(s), "unseen": float(u)}
            for b, s, u in zip(self.biases, self.seen_acc, self.unseen_acc)
        ]


@dataclass
class MetricsReport:
    exact_match: float
    top1_p: float
    top5_r: float
    coverage: float
    top1_p_attr: float
    top1_p_obj: float
    n_samples: int
    world: str = ""
    auc: float = 0.0
    best_seen: float = 0.0
    best_unseen: float = 0.0
    sweep_degenerate: bool = False
    n_seen_samples: int = 0
    n_unseen_samples: int = 0
    curve: BiasSweepCurve | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k not in ("curve", "extra")}
        out["curve"] = self.curve.to_list() if self.curve is not None else []
        out.update(self.extra)
        return out


def aggregate_report(records: Sequence[InstanceMetrics], world: str = "") -> MetricsReport:
    if not records:
        raise ValueError("no instance records to aggregate")
    arr = {k: np.array([getattr(r, k) for r in records], dtype=np.float64) for k in InstanceMetrics.__dataclass_fields__}
    # fsum keeps the means independent of record order
    mean = lambda k: math.fsum(arr[k]) / len(records)  # noqa: E731
    return MetricsReport(
        exact_match=mean("exact_match"),
        top1_p=mean("top1_p"),
        top5_r=mean("top5_r"),
        coverage=mean("coverage"),
        top1_p_attr=mean("top1_p_attr"),
        top1_p_obj=mean("top1_p_obj"),
        n_samples=len(records),
        world=world,
    )


def _best_in_group(scores: np.ndarray, order: np.ndarray, group: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row best score and its pair index among columns where ``group`` holds."""
    n = scores.shape[0]
    best_idx = np.full(n, -1)
    best = np.full(n, -np.inf)
    for i in range(n):
        ranked = order[i][group[order[i]]]
        if ranked.size:
            best_idx[i] = ranked[0]
            best[i] = scores[i, ranked[0]]
    return best, best_idx


def bias_sweep_auc(
    scores: np.ndarray,
    truths: Sequence[frozenset[PairComposition]],
    seen_partition: np.ndarray,
    space: SolutionSpace,
    pair_seen: Iterable[PairComposition],
) -> tuple[BiasSweepCurve, float, float, float, bool]:
    """Seen/unseen top-1 accuracy as a bias on unseen pairs sweeps ``-inf..+inf``.

    ``scores`` is (N, |space|) at bias 0. A sample's top-1 moves from its best
    seen pair to its best unseen pair once the bias exceeds their score gap,
    so one evaluation per gap interval traces the whole curve.

    Returns ``(curve, auc, best_seen, best_unseen, degenerate)``.
    """
    scores = np.atleast_2d(scores)
    seen_partition = np.asarray(seen_partition, dtype=bool)
    unseen = unseen_mask(space, pair_seen)
    order = np.stack([rank_order(s, space) for s in scores])
    best_s, idx_s = _best_in_group(scores, order, ~unseen)
    best_u, idx_u = _best_in_group(scores, order, unseen)

    def hit(idx):
        return np.array([j >= 0 and space.pairs[j] in t for j, t in zip(idx, truths)], dtype=float)

    hit_s, hit_u = hit(idx_s), hit(idx_u)
    gaps = best_s - best_u  # +inf when no unseen pair, -inf when no seen pair
    finite = np.unique(gaps[np.isfinite(gaps)])
    biases = np.concatenate([[-np.inf], (finite[:-1] + finite[1:]) / 2, [np.inf]])

    seen_acc, unseen_acc = [], []
    for b in biases:
        # b = +/-inf picks the group even when a sample lacks the other one
        take_u = (gaps < b) if np.isfinite(b) else ((gaps < np.inf) if b > 0 else (gaps == -np.inf))
        correct = np.where(take_u, hit_u, hit_s)
        seen_acc.append(correct[seen_partition].mean() if seen_partition.any() else 0.0)
        unseen_acc.append(correct[~seen_partition].mean() if (~seen_partition).any() else 0.0)
    curve = BiasSweepCurve(biases, np.array(seen_acc), np.array(unseen_acc))

    degenerate = not (seen_partition.any() and (~seen_partition).any())
    best_seen, best_unseen = float(curve.seen_acc.max()), float(curve.unseen_acc.max())
    if degenerate:
        return curve, 0.0, best_seen, best_unseen, True
    return curve, envelope_auc(curve.unseen_acc, curve.seen_acc), best_seen, best_unseen, False


def envelope_auc(unseen_acc: np.ndarray, seen_acc: np.ndarray) -> float:
    """Trapezoid area under the monotone upper envelope of the sweep points.

    Points are sorted by unseen accuracy (ties: higher seen first) and each
    seen accuracy is raised to the best seen accuracy reachable at equal or
    higher unseen accuracy. The envelope is held flat down to unseen
    accuracy 0. On a curve that already falls monotonically from
    ``(0, s)`` this is the plain trapezoid.
    """
    order = np.lexsort((-seen_acc, unseen_acc))
    u = np.asarray(unseen_acc, dtype=np.float64)[order]
    s = np.maximum.accumulate(np.asarray(seen_acc, dtype=np.float64)[order][::-1])[::-1]
    if u[0] > 0:
        u, s = np.concatenate([[0.0], u]), np.concatenate([[s[0]], s])
    return float(np.trapezoid(s, u))


def evaluate_scores(
    scores: Scores,
    samples: Sequence[SampleRecord],
    manifest: DatasetManifest,
    world: str,
    logit_scale: float,
    primitive_top1: str = "composition",
    return_records: bool = False,
):
    space = build_solution_space(manifest, world)
    pair_seen = build_pair_seen_set(manifest)
    n_obj = manifest.vocab.n_objects
    combined = pair_scores(scores.attr, scores.obj, scores.pair, space, n_obj, logit_scale)
    truths = [frozenset(expand_pairs(s.label)) for s in samples]
    records = []
    for i, truth in enumerate(truths):
        order = rank_order(combined[i], space)
        ranked = RankedPrediction(tuple(space.pairs[j] for j in order), combined[i][order])
        rec = instance_metrics(ranked, truth)
        if primitive_top1 == "branch":
            if scores.attr is None or scores.obj is None:
                raise ValueError("branch top-1 needs attribute and object branches")
            # first index on ties, matching the id tie-break
            a = int(np.argmax(scores.attr[i]))
            o = int(np.argmax(scores.obj[i]))
            rec = InstanceMetrics(
                rec.exact_match, rec.top1_p, rec.top5_r, rec.coverage,
                float(a in samples[i].label.attr_set), float(o == samples[i].label.object), rec.n_truth,
            )
        elif primitive_top1 != "composition":
            raise ValueError(f"primitive_top1 must be 'composition' or 'branch', got {primitive_top1!r}")
        records.append(rec)

    report = aggregate_report(records, world)
    seen_part = np.array([s.label in manifest.seen_compositions for s in samples])
    curve, auc, best_seen, best_unseen, degenerate = bias_sweep_auc(combined, truths, seen_part, space, pair_seen)
    report.auc, report.best_seen, report.best_unseen = auc, best_seen, best_unseen
    report.sweep_degenerate = degenerate
    report.n_seen_samples = int(seen_part.sum())
    report.n_unseen_samples = int((~seen_part).sum())
    report.curve = curve
    report.extra = {
        "solution_space_size": len(space.pairs),
        "pair_seen_size": len(pair_seen),
        "primitive_top1": primitive_top1,
        # multi-attribute truths make the sweep non-monotone; Seen/Unseen are sweep maxima
        "seen_unseen_definition": "sweep_max",
    }
    if return_records:
        return report, records
    return report


def partition_report(records: Sequence[InstanceMetrics], seen_partition: np.ndarray, world: str = "") -> dict:
    """Metrics restricted to seen-partition and unseen-partition samples."""
    seen_partition = np.asarray(seen_partition, dtype=bool)
    out = {}
    for name, sel in (("seen", seen_partition), ("unseen", ~seen_partition)):
        chosen = [r for r, keep in zip(records, sel) if keep]
        out[name] = aggregate_report(chosen, world) if chosen else None
    return out


def evaluate(
    model,
    manifest: DatasetManifest,
    split: str = "test",
    world: str = "open",
    primitive_top1: str = "composition",
    batch_size: int = 256,
    return_records: bool = False,
):
    samples = manifest.split(split)
    if not samples:
        raise ValueError(f"split {split!r} is empty")
    scores = predict_scores(model, samples, batch_size=batch_size)
    return evaluate_scores(
        scores, samples, manifest, world, model.logit_scale, primitive_top1=primitive_top1, return_records=return_records
    )
