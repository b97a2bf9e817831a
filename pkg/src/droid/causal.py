"""Counterfactual risk-object identification.

Each candidate tracklet is removed in turn (masked in every frame and
dropped from the Ego-Thing graph) and the model's Go confidence is
recorded. The object whose removal makes Go most likely is the risk object.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from droid.errors import DroidError
from droid.features import prepare_scene
from droid.model import Model
from droid.scene import THING_CATEGORIES, Response
from droid.simulator import Scenario, counterfactual_response

# (scenario, interventions) -> (len(interventions), 2) array of (p_go, p_stop)
Predictor = Callable[[Scenario, Sequence["int | None"]], np.ndarray]

DEFAULT_CANDIDATES = THING_CATEGORIES


def model_predictor(model: Model, chunk: int = 32) -> Predictor:
    """Predictor that runs the behaviour model on the intervened scenes."""

    def predict(scenario: Scenario, interventions):
        scenes = [prepare_scene(scenario.clip, k, model.config.grid) for k in interventions]
        out = [model.run(scenes[i:i + chunk]).response_probs for i in range(0, len(scenes), chunk)]
        return np.concatenate(out) if out else np.zeros((0, 2))

    return predict


def oracle_predictor(scenario: Scenario, interventions) -> np.ndarray:
    """Perfect predictor backed by the simulator's generative rule."""
    out = []
    for k in interventions:
        r = scenario.truth.response if k is None else counterfactual_response(scenario, k)
        out.append([1.0, 0.0] if r == Response.GO else [0.0, 1.0])
    return np.array(out)


@dataclass
class ObjectScore:
    id: int
    category: str
    box_last_frame: list[float] | None
    go_score: float


@dataclass
class RiskReport:
    baseline_p_go: float
    baseline_p_stop: float
    objects: list[ObjectScore]   # ranked: descending go_score, ties by id
    risk_object_id: int
    baseline_predicted_go: bool

    def to_dict(self) -> dict:
        return {
            "baseline": {"p_go": self.baseline_p_go, "p_stop": self.baseline_p_stop},
            "baseline_predicted_go": self.baseline_predicted_go,
            "objects": [asdict(o) for o in self.objects],
            "risk_object_id": self.risk_object_id,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> RiskReport:
        return cls(
            d["baseline"]["p_go"], d["baseline"]["p_stop"],
            [ObjectScore(**o) for o in d["objects"]],
            d["risk_object_id"], d["baseline_predicted_go"],
        )


def _last_box(tracklet) -> list[float] | None:
    for b in reversed(tracklet.boxes):
        if b is not None:
            return b.as_list()
    return None


def assess_risk(scenario: Scenario, predictor: Predictor, order: Sequence[int] | None = None,
                categories: Sequence[str] = DEFAULT_CANDIDATES) -> RiskReport:
    """Baseline plus per-object counterfactual Go scores.

    ``order`` only changes the sequence in which interventions are
    evaluated; the result is computed from the collected score table.
    """
    candidates = [t for t in scenario.clip.tracklets if t.category in categories]
    if not candidates:
        raise DroidError("no_candidates", "scenario has no candidate Thing tracklets")
    ids = [t.id for t in candidates]
    if order is not None:
        if sorted(order) != sorted(ids):
            raise DroidError("invalid_order", "evaluation order must be a permutation of the candidate ids")
        ids = list(order)
    probs = np.asarray(predictor(scenario, [None] + ids), dtype=np.float64)
    if probs.shape != (len(ids) + 1, 2):
        raise DroidError("bad_predictor", f"predictor returned shape {probs.shape}")
    table = {k: float(probs[i + 1, 0]) for i, k in enumerate(ids)}
    objects = [ObjectScore(t.id, t.category, _last_box(t), table[t.id]) for t in candidates]
    objects.sort(key=lambda o: (-o.go_score, o.id))
    p_go, p_stop = float(probs[0, 0]), float(probs[0, 1])
    return RiskReport(p_go, p_stop, objects, objects[0].id, p_go >= 0.5)


def identify_risk_object(scenario: Scenario, predictor: Predictor, order: Sequence[int] | None = None,
                         categories: Sequence[str] = DEFAULT_CANDIDATES) -> tuple[int, RiskReport]:
    report = assess_risk(scenario, predictor, order, categories)
    return report.risk_object_id, report
