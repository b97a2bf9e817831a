import json
from dataclasses import replace

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from droid.causal import RiskReport, assess_risk, identify_risk_object, model_predictor, oracle_predictor
from droid.cli import load_schema
from droid.errors import DroidError
from droid.model import Model, ModelConfig
from droid.simulator import SimConfig, generate_scenario
from stubs import mark_object, presence_stub


class Counting:
    def __init__(self, inner):
        self.inner = inner
        self.interventions = 0
        self.calls = 0

    def __call__(self, scenario, interventions):
        self.calls += 1
        self.interventions += len(interventions)
        return self.inner(scenario, interventions)


def test_single_tracklet_is_returned():
    sc = generate_scenario(0, kind="test2", n_objects=0)
    assert len(sc.clip.tracklets) == 1
    model = Model.create(ModelConfig(dim=6, hidden=5))
    k, report = identify_risk_object(sc, model_predictor(model))
    assert k == sc.clip.tracklets[0].id
    assert len(report.objects) == 1


def test_evaluates_n_plus_one_interventions():
    sc = generate_scenario(3, kind="test2", n_objects=3)
    pred = Counting(oracle_predictor)
    assess_risk(sc, pred)
    assert pred.interventions == len(sc.clip.tracklets) + 1


def test_oracle_finds_ground_truth_cause():
    for seed in range(30):
        sc = generate_scenario(seed, kind="test2")
        assert identify_risk_object(sc, oracle_predictor)[0] == sc.truth.cause_id


def test_stub_recovers_marked_object_in_any_order():
    stub = model_predictor(presence_stub())
    sc = generate_scenario(11, kind="test2", n_objects=3)
    ids = [t.id for t in sc.clip.tracklets]
    rng = np.random.default_rng(0)
    for c in ids:
        marked = mark_object(sc, c)
        for _ in range(3):
            order = rng.permutation(ids).tolist()
            assert identify_risk_object(marked, stub, order=order)[0] == c


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 5000), st.randoms(use_true_random=False))
def test_ranking_independent_of_evaluation_order(seed, rnd):
    sc = generate_scenario(seed, kind="test2")
    model = Model.create(ModelConfig(dim=6, hidden=5, seed=seed % 7))
    pred = model_predictor(model)
    ids = [t.id for t in sc.clip.tracklets]
    shuffled = list(ids)
    rnd.shuffle(shuffled)
    a = assess_risk(sc, pred)
    b = assess_risk(sc, pred, order=shuffled)
    assert a.to_json() == b.to_json()


def test_isolated_object_scores_equal_baseline():
    model = Model.create(ModelConfig(dim=6, hidden=5))
    sc = generate_scenario(2, SimConfig(isolated_bystander=True))
    bid = max(sc.trajectories)
    report = assess_risk(sc, model_predictor(model))
    score = next(o.go_score for o in report.objects if o.id == bid)
    assert abs(score - report.baseline_p_go) < 1e-9


def test_ties_broken_by_lowest_id():
    sc = generate_scenario(3, kind="test2", n_objects=3)
    flat = lambda s, ks: np.full((len(ks), 2), 0.5)
    assert identify_risk_object(sc, flat)[0] == min(t.id for t in sc.clip.tracklets)


def test_report_roundtrip_and_schema():
    sc = generate_scenario(6, kind="test2", n_objects=2)
    report = assess_risk(sc, oracle_predictor)
    doc = json.loads(report.to_json())
    jsonschema.validate(doc, load_schema("riskreport"))
    assert RiskReport.from_dict(doc) == report
    assert report.baseline_predicted_go is False
    scores = [o.go_score for o in report.objects]
    assert scores == sorted(scores, reverse=True)


def test_errors():
    sc = generate_scenario(6, kind="test2", n_objects=2)
    with pytest.raises(DroidError):
        assess_risk(sc, oracle_predictor, categories=("bicycle_rider_that_never_exists",))
    with pytest.raises(DroidError):
        assess_risk(sc, oracle_predictor, order=[999])
    with pytest.raises(DroidError):
        assess_risk(sc, lambda s, ks: np.zeros((1, 2)))
    empty = replace(sc, clip=replace(sc.clip, tracklets=[]))
    with pytest.raises(DroidError):
        assess_risk(empty, oracle_predictor)
