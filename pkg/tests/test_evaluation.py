import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvp_integrator.data import PairComposition, SolutionSpace, build_solution_space, expand_pairs
from mvp_integrator.encoders import SyntheticBackbone
from mvp_integrator.evaluation import (
    RankedPrediction,
    aggregate_report,
    bias_sweep_auc,
    combine_and_rank,
    envelope_auc,
    evaluate,
    evaluate_scores,
    instance_metrics,
    pair_scores,
    rank_order,
)
from mvp_integrator.model import MVPIntegrator, OracleScorer, Scores, predict_scores

from oracle import brute_metrics, brute_rank

P = PairComposition
TAU = 1 / 0.07


def _open(n_a, n_o):
    return SolutionSpace("open", tuple(P(a, o) for a in range(n_a) for o in range(n_o)))


def _logits_for(probs, scale=TAU):
    return np.log(np.asarray(probs)) / scale


def test_combined_score_example():
    ranked = combine_and_rank(_logits_for([0.7, 0.3]), _logits_for([0.6, 0.4]), _open(2, 2), 2)
    assert ranked.top1 == P(0, 0)
    assert ranked.scores[0] == pytest.approx(1.3)
    assert ranked.pairs == (P(0, 0), P(0, 1), P(1, 0), P(1, 1))


def test_pair_branch_is_added():
    space = _open(2, 2)
    s_pair = _logits_for([0.1, 0.1, 0.1, 0.7])
    ranked = combine_and_rank(_logits_for([0.5, 0.5]), _logits_for([0.5, 0.5]), space, 2, s_pair=s_pair)
    assert ranked.top1 == P(1, 1)
    assert ranked.scores[0] == pytest.approx(1.7)


def test_ties_break_on_ids():
    space = _open(3, 2)
    ranked = combine_and_rank(np.zeros(3), np.zeros(2), space, 2)
    assert ranked.pairs == space.pairs


def test_bias_limits():
    space = _open(3, 3)
    seen = {P(0, 0), P(1, 1), P(2, 2)}
    rng = np.random.default_rng(0)
    for _ in range(50):
        sa, so = rng.normal(size=3), rng.normal(size=3)
        assert combine_and_rank(sa, so, space, 3, bias=math.inf, pair_seen=seen).top1 not in seen
        assert combine_and_rank(sa, so, space, 3, bias=-math.inf, pair_seen=seen).top1 in seen
        big = combine_and_rank(sa, so, space, 3, bias=1e6, pair_seen=seen)
        assert big.top1 not in seen


def test_empty_space():
    with pytest.raises(ValueError):
        combine_and_rank(np.zeros(2), np.zeros(2), SolutionSpace("closed", ()), 2)


def test_closed_ranking_is_filtered_open(toy_manifest):
    rng = np.random.default_rng(1)
    closed = build_solution_space(toy_manifest, "closed")
    opened = build_solution_space(toy_manifest, "open")
    for _ in range(100):
        sa, so = rng.normal(size=2), rng.normal(size=2)
        o = combine_and_rank(sa, so, opened, 2)
        c = combine_and_rank(sa, so, closed, 2)
        assert c.pairs == tuple(p for p in o.pairs if p in closed)


RED, RIPE, APPLE, CAR = 0, 1, 0, 1


def _ranking(pairs):
    return RankedPrediction(tuple(P(*p) for p in pairs), np.arange(len(pairs))[::-1].astype(float))


def test_instance_metric_examples():
    truth = {P(RED, APPLE), P(RIPE, APPLE)}
    r = instance_metrics(_ranking([(RED, APPLE), (RIPE, APPLE), (RED, CAR)]), truth)
    assert (r.exact_match, r.top1_p, r.top5_r, r.coverage, r.top1_p_attr, r.top1_p_obj) == (1, 1, 1.0, 2, 1, 1)
    r = instance_metrics(_ranking([(RED, CAR), (RED, APPLE), (RIPE, APPLE)]), truth)
    assert (r.exact_match, r.top1_p, r.top5_r, r.coverage, r.top1_p_attr, r.top1_p_obj) == (0, 0, 1.0, 3, 1, 0)


def test_large_truth_bounds():
    space = _open(8, 2)
    truth = {P(a, 0) for a in range(7)}
    r = instance_metrics(combine_and_rank(np.arange(8.0), np.array([0.0, 5.0]), space, 2), truth)
    assert r.top5_r <= 5 / 7 and r.coverage >= 7


def test_truth_outside_space():
    with pytest.raises(ValueError):
        instance_metrics(_ranking([(0, 0)]), {P(0, 1)})
    with pytest.raises(ValueError):
        instance_metrics(_ranking([(0, 0)]), set())


def test_aggregate():
    good = instance_metrics(_ranking([(0, 0), (1, 0)]), {P(0, 0)})
    bad = instance_metrics(_ranking([(1, 0), (0, 0)]), {P(0, 0)})
    rep = aggregate_report([good, bad])
    assert rep.exact_match == 0.5 and rep.coverage == 1.5
    assert aggregate_report([bad, good]).to_dict() == rep.to_dict()
    with pytest.raises(ValueError):
        aggregate_report([])


instances = st.tuples(st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**32 - 1))


def _random_instance(n_a, n_o, seed):
    rng = np.random.default_rng(seed)
    sa = rng.normal(size=n_a)
    so = rng.normal(size=n_o)
    if rng.random() < 0.3:  # exercise ties
        sa, so = np.round(sa), np.round(so)
    o = int(rng.integers(n_o))
    k = int(rng.integers(1, n_a + 1))
    truth = {P(int(a), o) for a in rng.choice(n_a, size=k, replace=False)}
    return sa, so, truth


@settings(max_examples=150, deadline=None)
@given(instances)
def test_metrics_match_brute_force(case):
    n_a, n_o, seed = case
    sa, so, truth = _random_instance(n_a, n_o, seed)
    space = _open(n_a, n_o)
    ranked = combine_and_rank(sa, so, space, n_o)
    brute = brute_rank(sa, so, [(p.attribute, p.object) for p in space.pairs], TAU)
    assert [(p.attribute, p.object) for p in ranked.pairs] == brute
    got = instance_metrics(ranked, truth)
    want = brute_metrics(brute, {(p.attribute, p.object) for p in truth})
    for k, v in want.items():
        assert getattr(got, k) == pytest.approx(v, abs=1e-9)


@settings(max_examples=150, deadline=None)
@given(instances)
def test_metric_invariants(case):
    n_a, n_o, seed = case
    sa, so, truth = _random_instance(n_a, n_o, seed)
    r = instance_metrics(combine_and_rank(sa, so, _open(n_a, n_o), n_o), truth)
    assert (r.exact_match == 1) == (r.coverage == len(truth))
    assert r.exact_match <= r.top1_p <= 1
    if r.top1_p == 1:
        assert r.top1_p_attr == 1 and r.top1_p_obj == 1
    assert r.coverage >= len(truth)
    if r.top5_r == 1 and len(truth) <= 5:
        assert r.coverage <= 5


@settings(max_examples=200, deadline=None)
@given(instances)
def test_factorization(case):
    n_a, n_o, seed = case
    sa, so, _ = _random_instance(n_a, n_o, seed)
    top = combine_and_rank(sa, so, _open(n_a, n_o), n_o).top1
    assert top == P(int(np.argmax(sa)), int(np.argmax(so)))


def _toy_sweep():
    space = SolutionSpace("open", (P(0, 0), P(0, 1), P(1, 0), P(1, 1)))
    seen = {P(0, 0), P(0, 1)}
    scores = np.array([[0.9, 0.5, 0.7, 0.1], [0.6, 0.2, 0.5, 0.3], [0.4, 0.8, 0.2, 0.3]])
    truths = [frozenset({P(0, 0)}), frozenset({P(1, 0)}), frozenset({P(1, 1)})]
    return scores, truths, np.array([True, False, False]), space, seen


def test_sweep_hand_computed():
    # gaps 0.2, 0.1, 0.5 -> curve (u, s): (0,1) (.5,1) (.5,0) (1,0); area 0.5
    curve, auc, best_seen, best_unseen, degenerate = bias_sweep_auc(*_toy_sweep())
    assert not degenerate
    assert auc == pytest.approx(0.5, abs=1e-12)
    assert (best_seen, best_unseen) == (1.0, 1.0)
    assert list(curve.unseen_acc) == [0.0, 0.5, 0.5, 1.0]
    assert list(curve.seen_acc) == [1.0, 1.0, 0.0, 0.0]
    assert curve.biases[0] == -np.inf and curve.biases[-1] == np.inf
    assert np.all(np.diff(curve.biases) > 0)


def _brute_sweep(scores, truths, seen_part, space, seen):
    """Re-rank every sample under explicitly shifted scores for each bias."""
    pairs = list(space.pairs)
    best = {}
    for i in range(len(scores)):
        s_best = max((scores[i][j], -j) for j, p in enumerate(pairs) if p in seen)
        u_best = max((scores[i][j], -j) for j, p in enumerate(pairs) if p not in seen)
        best[i] = s_best[0] - u_best[0]
    gaps = sorted(set(best.values()))
    biases = [-1e9] + [(a + b) / 2 for a, b in zip(gaps, gaps[1:])] + [1e9]
    pts = []
    for b in biases:
        hits = []
        for i in range(len(scores)):
            shifted = [(scores[i][j] + (b if p not in seen else 0.0), p) for j, p in enumerate(pairs)]
            top = sorted(shifted, key=lambda t: (-t[0], t[1].attribute, t[1].object))[0][1]
            hits.append(top in truths[i])
        s = [h for h, k in zip(hits, seen_part) if k]
        u = [h for h, k in zip(hits, seen_part) if not k]
        pts.append((sum(u) / len(u), sum(s) / len(s)))
    return _envelope_area(pts), pts


def _envelope_area(pts):
    """Naive loop: raise each point to the best seen accuracy at >= unseen accuracy."""
    pts = sorted(pts, key=lambda t: (t[0], -t[1]))
    env = [(u, max(s2 for _, s2 in pts[i:])) for i, (u, _) in enumerate(pts)]
    if env[0][0] > 0:
        env.insert(0, (0.0, env[0][1]))
    return sum((x1 - x0) * (y0 + y1) / 2 for (x0, y0), (x1, y1) in zip(env, env[1:]))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 4), st.integers(2, 4), st.integers(3, 12), st.integers(0, 2**32 - 1))
def test_sweep_matches_brute_force(n_a, n_o, n, seed):
    rng = np.random.default_rng(seed)
    space = _open(n_a, n_o)
    pairs = list(space.pairs)
    idx = rng.permutation(len(pairs))
    n_seen = int(rng.integers(1, len(pairs)))
    seen = {pairs[i] for i in idx[:n_seen]}
    scores = rng.random((n, len(pairs)))
    truths = [frozenset({pairs[int(rng.integers(len(pairs)))]}) for _ in range(n)]
    seen_part = np.arange(n) % 2 == 0
    curve, auc, *_ = bias_sweep_auc(scores, truths, seen_part, space, seen)
    area, pts = _brute_sweep(scores, truths, seen_part, space, seen)
    assert auc == pytest.approx(area, abs=1e-12)
    assert sorted(zip(curve.unseen_acc, curve.seen_acc)) == sorted(pts)


def test_sweep_degenerate_partition():
    scores, truths, _, space, seen = _toy_sweep()
    curve, auc, best_seen, best_unseen, degenerate = bias_sweep_auc(scores, truths, np.ones(3, bool), space, seen)
    # seen accuracy peaks at 2/3 once s1 switches to its unseen truth (0.1 < b < 0.2)
    assert degenerate and auc == 0.0 and best_seen == pytest.approx(2 / 3)


def test_sweep_perfect_oracle():
    space = _open(3, 2)
    seen = {P(0, 0), P(1, 0), P(2, 0)}
    truths = [frozenset({P(0, 0), P(1, 0)}), frozenset({P(2, 1)}), frozenset({P(0, 1), P(1, 1)})]
    scores = np.array([[1.0 if p in t else 0.0 for p in space.pairs] for t in truths])
    _, auc, best_seen, best_unseen, _ = bias_sweep_auc(scores, truths, np.array([True, False, False]), space, seen)
    assert auc == best_seen == best_unseen == 1.0


def test_envelope_examples():
    # monotone curve from u=0: plain trapezoid
    assert envelope_auc(np.array([0.0, 0.5, 1.0]), np.array([1.0, 0.5, 0.0])) == pytest.approx(0.5)
    # non-monotone sweep that passes through (1, 1): full area
    assert envelope_auc(np.array([0.4, 1.0, 0.7]), np.array([1.0, 1.0, 0.0])) == 1.0
    # dominated dip is lifted by a later point: 0.5*1 (flat extension) + 0.5*(1+0.5)/2
    assert envelope_auc(np.array([0.5, 0.6, 1.0]), np.array([1.0, 0.0, 0.5])) == pytest.approx(
        _envelope_area([(0.5, 1.0), (0.6, 0.0), (1.0, 0.5)])
    )
    assert _envelope_area([(0.5, 1.0), (0.6, 0.0), (1.0, 0.5)]) == pytest.approx(0.5 + 0.1 * 0.75 + 0.4 * 0.5)


def test_multi_attribute_oracle_sweep(tiny_synth):
    # unseen-partition truths may consist only of seen pairs; the oracle still scores 1
    m, _ = tiny_synth
    rep = evaluate(OracleScorer(m.vocab), m, "test", "open")
    assert rep.auc == rep.best_seen == rep.best_unseen == 1.0


def test_evaluate_with_oracle_scorer(tiny_synth):
    m, _ = tiny_synth
    for world in ("closed", "open"):
        rep = evaluate(OracleScorer(m.vocab), m, "test", world)
        assert rep.exact_match == 1.0 and rep.top1_p == 1.0
        truths = [len(s.label.attr_set) for s in m.split("test")]
        assert rep.coverage == pytest.approx(np.mean(truths))
        assert rep.n_seen_samples + rep.n_unseen_samples == 30


def test_evaluate_is_deterministic_and_closed_consistent(tiny_synth):
    m, _ = tiny_synth
    model = MVPIntegrator(m.vocab, SyntheticBackbone(16), seed=0)
    a = evaluate(model, m, "test", "closed").to_dict()
    b = evaluate(model, m, "test", "closed").to_dict()
    assert a == b

    samples = m.split("test")
    scores = predict_scores(model, samples)
    opened = build_solution_space(m, "open")
    closed = build_solution_space(m, "closed")
    combined_open = pair_scores(scores.attr, scores.obj, None, opened, m.vocab.n_objects, model.logit_scale)
    _, direct = evaluate_scores(scores, samples, m, "closed", model.logit_scale, return_records=True)
    for i, s in enumerate(samples):
        order = rank_order(combined_open[i], opened)
        filtered = [opened.pairs[j] for j in order if opened.pairs[j] in closed]
        ranked = RankedPrediction(tuple(filtered), np.zeros(len(filtered)))
        assert instance_metrics(ranked, expand_pairs(s.label)) == direct[i]


def test_branch_top1_flag(tiny_synth):
    m, _ = tiny_synth
    samples = m.split("test")
    rng = np.random.default_rng(0)
    scores = Scores(rng.normal(size=(30, 5)), rng.normal(size=(30, 4)))
    comp = evaluate_scores(scores, samples, m, "open", TAU)
    branch = evaluate_scores(scores, samples, m, "open", TAU, primitive_top1="branch")
    # open world dual branch: rank-1 pair is the pair of branch argmaxes
    assert comp.top1_p_attr == branch.top1_p_attr and comp.top1_p_obj == branch.top1_p_obj
    assert branch.extra["primitive_top1"] == "branch"
    with pytest.raises(ValueError):
        evaluate_scores(scores, samples, m, "open", TAU, primitive_top1="argmax")
