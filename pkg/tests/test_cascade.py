import itertools
import json
import threading

import numpy as np
import pytest

from riskcascade.cascade import (
    AgentVoting,
    EnsembleWeights,
    EscalationReason,
    MlVoting,
    Provenance,
    RoutingConfig,
    check_feasibility,
    ensemble_f1,
    llm_vote,
    load_weights,
    ml_vote,
    optimize_weights,
    route,
    run_cascade,
    save_weights,
)
from riskcascade.core import Dataset, Label, Post
from riskcascade.errors import DegenerateDataError, DimensionError
from riskcascade.mlmodels import ModelKind, TrainedModel
from riskcascade.scorers import AgentPersona, MockChatClient, Verdict

DEFAULTS = RoutingConfig()


def post_with_tokens(n, pid="p0"):
    return Post(id=pid, text=" ".join(["word"] * n))


def test_route_accepts_confident_short_positive():
    decision = route(post_with_tokens(50), 0.999, DEFAULTS)
    assert decision.accepted and decision.label is Label.SUICIDE


def test_route_escalates_ambiguous():
    decision = route(post_with_tokens(50), 0.5, DEFAULTS)
    assert not decision.accepted and decision.reason is EscalationReason.AMBIGUOUS_PROB


def test_route_escalates_long_confident():
    decision = route(post_with_tokens(400), 0.999, DEFAULTS)
    assert not decision.accepted and decision.reason is EscalationReason.TOO_LONG


def test_route_escalates_long_ambiguous_as_both():
    decision = route(post_with_tokens(400), 0.5, DEFAULTS)
    assert decision.reason is EscalationReason.BOTH


def test_route_boundaries_are_inclusive():
    at_cap = post_with_tokens(DEFAULTS.max_tokens)
    assert route(at_cap, DEFAULTS.tau_high, DEFAULTS).accepted
    assert route(at_cap, DEFAULTS.tau_low, DEFAULTS).accepted
    low = route(at_cap, DEFAULTS.tau_low, DEFAULTS)
    assert low.label is Label.NON_SUICIDE
    over_cap = post_with_tokens(DEFAULTS.max_tokens + 1)
    assert not route(over_cap, DEFAULTS.tau_high, DEFAULTS).accepted
    inside_band = route(at_cap, np.nextafter(DEFAULTS.tau_low, 1.0), DEFAULTS)
    assert not inside_band.accepted


def test_route_monotone_in_probability():
    rng = np.random.default_rng(0)
    order = {"accept_non": 0, "escalate": 1, "accept_pos": 2}

    def rank(p):
        d = route(post_with_tokens(10), p, DEFAULTS)
        if d.accepted:
            return order["accept_pos"] if d.label is Label.SUICIDE else order["accept_non"]
        return order["escalate"]

    for _ in range(300):
        a, b = sorted(rng.uniform(0, 1, 2))
        assert rank(a) <= rank(b)


def test_routing_config_validation():
    with pytest.raises(ValueError):
        RoutingConfig(tau_low=0.9, tau_high=0.1)
    with pytest.raises(ValueError):
        RoutingConfig(max_tokens=0)


def brute_force_vote(verdicts, tie_breaker):
    counted = [v.label for v in verdicts if v.label is not None]
    s = counted.count(Label.SUICIDE)
    n = counted.count(Label.NON_SUICIDE)
    if s > n:
        return Label.SUICIDE
    if n > s:
        return Label.NON_SUICIDE
    return tie_breaker


def test_llm_vote_examples():
    s, n, a = Verdict.suicide(), Verdict.non_suicide(), Verdict.abstain("x")
    assert llm_vote([s, s, n], Label.NON_SUICIDE) is Label.SUICIDE
    assert llm_vote([s, n, a], Label.NON_SUICIDE) is Label.NON_SUICIDE
    assert llm_vote([a, a, a], Label.SUICIDE) is Label.SUICIDE


def test_llm_vote_matches_brute_force_over_all_triples():
    kinds = [Verdict.suicide(), Verdict.non_suicide(), Verdict.abstain("r")]
    cases = 0
    for triple in itertools.product(kinds, repeat=3):
        for tie in (Label.SUICIDE, Label.NON_SUICIDE):
            assert llm_vote(list(triple), tie) is brute_force_vote(triple, tie)
            cases += 1
    assert cases == 54


def test_llm_vote_requires_a_verdict():
    with pytest.raises(ValueError):
        llm_vote([], Label.SUICIDE)


def test_ml_vote_examples():
    w = EnsembleWeights((0.5, 0.3, 0.2))
    assert ml_vote([1.0, 1.0, 1.0], w) == (Label.SUICIDE, 1.0)
    w2 = EnsembleWeights((0.0, 1.0), cap=0.5)
    label, prob = ml_vote([0.99, 0.3], EnsembleWeights((0.5, 0.5)), threshold=0.5)
    # boundary: 0.5 * 0.99 + 0.5 * 0.3 = 0.645 -> suicide
    assert label is Label.SUICIDE
    label, prob = ml_vote([0.3, 0.99], w2)
    assert (label, prob) == (Label.SUICIDE, 0.99)
    label, prob = ml_vote([0.9, 0.1], EnsembleWeights((0.5, 0.5)))
    assert label is Label.SUICIDE and prob == 0.5  # >= rule at the boundary


def test_ml_vote_degenerate_weight_tracks_single_model():
    w = EnsembleWeights((1.0, 0.0), cap=1.0)
    assert ml_vote([0.3, 0.99], w) == (Label.NON_SUICIDE, 0.3)


def test_ml_vote_dimension_mismatch():
    with pytest.raises(DimensionError):
        ml_vote([0.5, 0.5], EnsembleWeights((0.4, 0.3, 0.3)))


def test_ml_vote_convexity_on_random_draws():
    rng = np.random.default_rng(123)
    for _ in range(1000):
        k = int(rng.integers(2, 7))
        raw = rng.dirichlet(np.ones(k))
        # keep the lead weight under the cap by construction
        w = EnsembleWeights(tuple(raw.tolist()), cap=1.0)
        scores = rng.uniform(0, 1, k).tolist()
        _, prob = ml_vote(scores, w)
        assert min(scores) - 1e-12 <= prob <= max(scores) + 1e-12


def test_ensemble_weights_invariants():
    with pytest.raises(ValueError):
        EnsembleWeights((0.7, 0.3))  # lead exceeds default cap
    with pytest.raises(ValueError):
        EnsembleWeights((0.5, 0.6))  # sum too large
    with pytest.raises(ValueError):
        EnsembleWeights((-0.1, 1.1))
    EnsembleWeights((0.5, 0.5))  # cap boundary is inclusive


def test_published_weight_fixture_feasible_with_rounding_tolerance():
    published = (0.5, 0.35, 0.09, 0.05, 0.02, 0.0)
    # printed values sum to 1.01; rounding tolerance applies to this fixture only
    check_feasibility(published, cap=0.5, sum_tol=0.02)
    with pytest.raises(ValueError):
        check_feasibility(published, cap=0.5, sum_tol=1e-6)


def grid_oracle(scores, labels, cap, step=0.05):
    """Exhaustive search over the capped simplex at a fixed step."""
    k = scores.shape[1]
    n = round(1.0 / step)
    best = -1.0

    def rec(prefix, remaining, slots):
        nonlocal best
        if slots == 1:
            w = np.array(prefix + [remaining]) * step
            if w[0] <= cap + 1e-9:
                best = max(best, ensemble_f1(scores, labels, w))
            return
        for units in range(remaining + 1):
            rec(prefix + [units], remaining - units, slots - 1)

    rec([], n, k)
    return best


def perfect_model_instance(seed=42, n=200):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    scores = np.zeros((n, 3))
    scores[:, 0] = rng.uniform(0, 1, n)
    scores[:, 1] = np.where(labels == 1, 0.9, 0.1)
    scores[:, 2] = rng.uniform(0, 1, n)
    return scores, labels


def test_optimizer_matches_grid_oracle_and_stays_feasible():
    scores, labels = perfect_model_instance()
    oracle = grid_oracle(scores, labels, cap=0.5)
    for seed in range(5):
        w = optimize_weights(scores, labels, cap=0.5, seed=seed)
        check_feasibility(w.values, cap=0.5, sum_tol=1e-6)
        achieved = ensemble_f1(scores, labels, w.as_array())
        assert achieved >= oracle - 0.01
        assert achieved >= 0.99


def test_optimizer_never_below_uniform_start():
    rng = np.random.default_rng(9)
    for seed in range(3):
        labels = rng.integers(0, 2, 120)
        scores = rng.uniform(0, 1, (120, 4))
        scores[:, 2] = np.where(labels == 1, 0.7, 0.35)  # weakly informative column
        uniform = np.full(4, 0.25)
        w = optimize_weights(scores, labels, cap=0.5, seed=seed)
        assert ensemble_f1(scores, labels, w.as_array()) >= ensemble_f1(scores, labels, uniform)


def test_optimizer_on_identical_scores_is_flat():
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 2, 150)
    column = rng.uniform(0, 1, 150)
    scores = np.tile(column[:, None], (1, 3))
    w = optimize_weights(scores, labels, cap=0.5, seed=0)
    check_feasibility(w.values, cap=0.5, sum_tol=1e-6)
    single = ensemble_f1(scores, labels, np.array([0.0, 1.0, 0.0]))
    assert abs(ensemble_f1(scores, labels, w.as_array()) - single) < 1e-12


def test_optimizer_rejects_single_class():
    scores = np.random.default_rng(0).uniform(0, 1, (30, 2))
    with pytest.raises(DegenerateDataError):
        optimize_weights(scores, np.ones(30), cap=0.5)


def test_weight_file_round_trip(tmp_path):
    w = EnsembleWeights((0.4, 0.35, 0.25))
    path = tmp_path / "weights.json"
    save_weights(path, w, ["stage1", "lr", "rf"], val_f1=0.91)
    loaded, roster, val_f1 = load_weights(path)
    assert loaded.values == w.values and roster == ["stage1", "lr", "rf"] and val_f1 == 0.91


# ---------------------------------------------------------------------------
# run_cascade
# ---------------------------------------------------------------------------


class TableScorer:
    def __init__(self, table, default=0.5):
        self.table = table
        self.default = default
        self.calls = 0

    def score(self, text):
        self.calls += 1
        return self.table.get(text, self.default)


class CountingProvider:
    def __init__(self, fn):
        self.fn = fn
        self.calls = 0
        self._lock = threading.Lock()

    def __call__(self, post):
        with self._lock:
            self.calls += 1
        return self.fn(post)


def zero_logistic():
    return TrainedModel(ModelKind.LOGISTIC_REGRESSION, weights=np.zeros(9), bias=0.0)


def test_always_confident_scorer_never_reaches_stage2():
    ds = Dataset(tuple(Post(id=f"p{i}", text=f"short text {i}") for i in range(20)))
    scorer = TableScorer({}, default=0.999)
    client = MockChatClient(lambda u: "Label: suicide")
    stage2 = AgentVoting((AgentPersona.BULLISH,), client)
    provider = CountingProvider(lambda post: np.zeros(9))
    results = run_cascade(ds, scorer, DEFAULTS, stage2)
    assert all(r.provenance is Provenance.STAGE1 for r in results)
    assert client.calls == 0

    ml = MlVoting([zero_logistic()], EnsembleWeights((0.5, 0.5)))
    results = run_cascade(ds, scorer, DEFAULTS, ml, feature_provider=provider)
    assert all(r.provenance is Provenance.STAGE1 for r in results)
    assert provider.calls == 0


def test_all_ambiguous_with_bullish_mocks_goes_suicide():
    ds = Dataset(tuple(Post(id=f"p{i}", text=f"post {i}") for i in range(10)))
    scorer = TableScorer({}, default=0.5)
    client = MockChatClient(lambda u: "Label: suicide")
    personas = (AgentPersona.BULLISH, AgentPersona.BULLISH, AgentPersona.BULLISH)
    results = run_cascade(ds, scorer, DEFAULTS, AgentVoting(personas, client))
    assert all(r.provenance is Provenance.STAGE2 and r.label is Label.SUICIDE for r in results)
    assert client.calls == 30


def test_exact_stage2_fraction_from_constructed_table():
    posts = tuple(Post(id=f"p{i}", text=f"post number {i}") for i in range(100))
    table = {}
    for i, post in enumerate(posts):
        table[post.text] = 0.5 if i < 32 else (0.999 if i % 2 == 0 else 0.001)
    ds = Dataset(posts)
    results = run_cascade(ds, TableScorer(table), DEFAULTS,
                          AgentVoting((AgentPersona.EXPERT,), MockChatClient(lambda u: "Label: suicide")))
    stage2 = sum(1 for r in results if r.provenance is Provenance.STAGE2)
    assert stage2 / len(results) == 0.32


def test_outputs_preserve_dataset_order_under_parallelism():
    posts = tuple(Post(id=f"p{i}", text=f"post {i}") for i in range(40))
    ds = Dataset(posts)
    results = run_cascade(ds, TableScorer({}, default=0.5), DEFAULTS,
                          AgentVoting((AgentPersona.BULLISH,), MockChatClient(lambda u: "Label: suicide")),
                          parallelism=8)
    assert [r.post_id for r in results] == [p.id for p in posts]


def test_tie_breaker_follows_stage1_probability():
    posts = (Post(id="hi", text="hi"), Post(id="lo", text="lo"))
    table = {"hi": 0.7, "lo": 0.3}
    client = MockChatClient(lambda u: "no label here")  # every agent abstains
    results = run_cascade(Dataset(posts), TableScorer(table), DEFAULTS,
                          AgentVoting((AgentPersona.BULLISH, AgentPersona.BEARISH), client))
    assert results[0].label is Label.SUICIDE
    assert results[1].label is Label.NON_SUICIDE


def test_ml_pathway_combines_scores():
    posts = (Post(id="a", text="ambiguous"),)
    model = TrainedModel(ModelKind.LOGISTIC_REGRESSION, weights=np.zeros(9), bias=50.0)  # always ~1.0
    stage2 = MlVoting([model], EnsembleWeights((0.5, 0.5)))
    results = run_cascade(Dataset(posts), TableScorer({}, default=0.2), DEFAULTS, stage2,
                          features=np.zeros((1, 9)))
    r = results[0]
    assert r.provenance is Provenance.STAGE2
    assert r.label is Label.SUICIDE
    assert abs(r.ensemble_prob - (0.5 * 0.2 + 0.5 * 1.0)) < 1e-9


def test_stage2_failure_falls_back_to_stage1_label():
    posts = (Post(id="a", text="boom"), Post(id="b", text="fine"))

    def provider(post):
        if post.text == "boom":
            raise RuntimeError("feature service down")
        return np.zeros(9)

    stage2 = MlVoting([zero_logistic()], EnsembleWeights((0.5, 0.5)))
    results = run_cascade(Dataset(posts), TableScorer({"boom": 0.8, "fine": 0.4}), DEFAULTS,
                          stage2, feature_provider=provider)
    failed = results[0]
    assert failed.provenance is Provenance.STAGE2_FAILED
    assert failed.label is Label.SUICIDE  # stage-1 prob 0.8 thresholded at 0.5
    assert "down" in failed.error
    ok = results[1]
    assert ok.provenance is Provenance.STAGE2 and ok.error is None


def test_stage1_failure_escalates_with_maximal_uncertainty():
    class ExplodingScorer:
        def score(self, text):
            raise RuntimeError("scorer offline")

    posts = (Post(id="a", text="text"),)
    results = run_cascade(Dataset(posts), ExplodingScorer(), DEFAULTS,
                          AgentVoting((AgentPersona.BULLISH,),
                                      MockChatClient(lambda u: "Label: non_suicide")))
    r = results[0]
    assert r.stage1_prob == 0.5
    assert r.provenance is Provenance.STAGE2
    assert r.label is Label.NON_SUICIDE
    assert "offline" in r.error


def test_ml_voting_requires_features():
    ds = Dataset((Post(id="a", text="x"),))
    stage2 = MlVoting([zero_logistic()], EnsembleWeights((0.5, 0.5)))
    with pytest.raises(ValueError):
        run_cascade(ds, TableScorer({}), DEFAULTS, stage2)


def test_ml_voting_roster_alignment_checked():
    with pytest.raises(DimensionError):
        MlVoting([zero_logistic(), zero_logistic()], EnsembleWeights((0.5, 0.5)))


def test_result_records_serialize():
    posts = (Post(id="a", text="x"),)
    results = run_cascade(Dataset(posts), TableScorer({}, default=0.5), DEFAULTS,
                          AgentVoting((AgentPersona.BULLISH,),
                                      MockChatClient(lambda u: "Label: suicide")))
    record = results[0].to_record()
    assert record["id"] == "a"
    assert record["label"] == "suicide"
    assert record["provenance"] == "stage2"
    assert record["reason"] == "ambiguous_prob"
    assert record["verdicts"] == ["suicide"]
    json.dumps(record)
