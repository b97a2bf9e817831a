"""Response-prediction and risk-object identification metrics, plus the benchmark."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from droid.causal import Predictor, identify_risk_object, model_predictor
from droid.errors import DroidError
from droid.features import prepare_scene
from droid.graphs import correlation_identify
from droid.model import Model
from droid.scene import BoundingBox, Response, iou
from droid.simulator import STOP_CLASSES, Scenario

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))


def _nonempty(x, what: str):
    if len(x) == 0:
        raise DroidError("empty_input", f"{what} needs at least one sample")


def perplexity(probs, labels) -> float:
    """Mean negative natural log-likelihood of the true class.

    ``probs`` is ``(n, classes)``.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    _nonempty(y, "perplexity")
    if p.shape[0] != y.shape[0]:
        raise DroidError("count_mismatch", f"{p.shape[0]} predictions vs {y.shape[0]} labels")
    return float(-np.log(p[np.arange(len(y)), y]).mean())


def macro_micro_accuracy(predictions, labels) -> tuple[float, float]:
    """(macro, micro): mean per-class recall over classes present, overall accuracy."""
    pred = np.asarray(predictions)
    y = np.asarray(labels)
    _nonempty(y, "accuracy")
    if pred.shape != y.shape:
        raise DroidError("count_mismatch", f"{pred.shape} predictions vs {y.shape} labels")
    correct = pred == y
    recalls = [correct[y == c].mean() for c in np.unique(y)]
    return float(np.mean(recalls)), float(correct.mean())


def per_frame_ap(scores, labels) -> float:
    """Non-interpolated average precision of the positive class.

    Frames are ranked by descending score (stable, so ties keep input
    order) and precision is averaged over the ranks of the positives.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    _nonempty(y, "average precision")
    if not y.any():
        raise DroidError("no_positives", "average precision is undefined without positive frames")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    ranks = np.nonzero(hits)[0] + 1
    precision = np.arange(1, len(ranks) + 1) / ranks
    return float(precision.mean())


def mean_ap(probs, labels) -> float:
    """Macro mean of per-class AP over the classes present in ``labels``."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    _nonempty(y, "mAP")
    return float(np.mean([per_frame_ap(p[:, c], y == c) for c in np.unique(y)]))


def droid_accuracy(predicted: Sequence[BoundingBox], truth: Sequence[BoundingBox],
                   thresholds: Sequence[float] = IOU_THRESHOLDS) -> tuple[float, float, float]:
    """(Acc@0.5, Acc@0.75, mAcc) where a hit needs IoU >= threshold."""
    if len(predicted) != len(truth):
        raise DroidError("count_mismatch", f"{len(predicted)} predictions vs {len(truth)} ground-truth boxes")
    _nonempty(truth, "DROID accuracy")
    ious = np.array([iou(a, b) for a, b in zip(predicted, truth)])
    acc = {t: float((ious >= t).mean()) for t in thresholds}

    def at(t):
        return acc[t] if t in acc else float((ious >= t).mean())

    return at(0.5), at(0.75), float(np.mean([acc[t] for t in thresholds]))


@dataclass
class DroidRow:
    scenario_class: str
    count: int
    acc50: float
    acc75: float
    macc: float


@dataclass
class MetricsReport:
    mode: str
    test1_count: int
    perplexity: float
    macro_accuracy: float
    micro_accuracy: float
    response_map: float
    intention_map: float
    intention_accuracy: float
    test2_count: int
    droid: list[DroidRow] = field(default_factory=list)

    @property
    def overall(self) -> DroidRow:
        return next(r for r in self.droid if r.scenario_class == "overall")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["section", "column", "count", "value"])
        w.writerow(["response", "perplexity", self.test1_count, repr(self.perplexity)])
        w.writerow(["response", "macro_accuracy", self.test1_count, repr(self.macro_accuracy)])
        w.writerow(["response", "micro_accuracy", self.test1_count, repr(self.micro_accuracy)])
        w.writerow(["response", "stop_map", self.test1_count, repr(self.response_map)])
        w.writerow(["intention", "macro_class_map", self.test1_count, repr(self.intention_map)])
        w.writerow(["intention", "accuracy", self.test1_count, repr(self.intention_accuracy)])
        for r in self.droid:
            for col, v in (("acc@0.5", r.acc50), ("acc@0.75", r.acc75), ("macc", r.macc)):
                w.writerow([f"droid:{self.mode}:{r.scenario_class}", col, r.count, repr(v)])
        return buf.getvalue()


def _predict_plain(model: Model, scenarios: list[Scenario], chunk: int = 64):
    resp, intent, affinity = [], [], []
    for i in range(0, len(scenarios), chunk):
        part = scenarios[i:i + chunk]
        out = model.run([prepare_scene(s.clip, None, model.config.grid) for s in part])
        resp.append(out.response_probs)
        intent.append(out.intention_probs)
        for b, s in enumerate(part):
            n = len(s.clip.tracklets)
            g = out.thing_affinity[b, -1]
            affinity.append(np.concatenate([g[-1, :n], g[-1, -1:]]))
    return np.concatenate(resp), np.concatenate(intent), affinity


def response_metrics(resp: np.ndarray, intent: np.ndarray, scenarios: list[Scenario]) -> dict:
    y = np.array([int(s.labels[1]) for s in scenarios])
    yi = np.array([int(s.labels[0]) for s in scenarios])
    macro, micro = macro_micro_accuracy(resp.argmax(axis=1), y)
    return {
        "perplexity": perplexity(resp, y),
        "macro_accuracy": macro,
        "micro_accuracy": micro,
        "response_map": per_frame_ap(resp[:, Response.STOP], y == Response.STOP),
        "intention_map": mean_ap(intent, yi),
        "intention_accuracy": float((intent.argmax(axis=1) == yi).mean()),
    }


def droid_rows(picks: list[int], scenarios: list[Scenario]) -> list[DroidRow]:
    pred, truth, cls = [], [], []
    for k, s in zip(picks, scenarios):
        if s.truth.cause_id is None:
            raise DroidError("no_cause", f"scenario {s.seed} has no ground-truth cause")
        pred.append(s.clip.tracklet(k).last_box or BoundingBox(0, 0, 0, 0))
        truth.append(s.clip.tracklet(s.truth.cause_id).last_box)
        cls.append(s.truth.scenario_class)
    rows = []
    for c in [c for c in STOP_CLASSES if c in cls] + ["overall"]:
        idx = [i for i, x in enumerate(cls) if c == "overall" or x == c]
        a50, a75, macc = droid_accuracy([pred[i] for i in idx], [truth[i] for i in idx])
        rows.append(DroidRow(c, len(idx), a50, a75, macc))
    return rows


def benchmark(model: Model, test1: list[Scenario], test2: list[Scenario], mode: str = "causation",
              predictor: Predictor | None = None) -> MetricsReport:
    """Response metrics on test1 and per-class DROID accuracy on test2.

    ``causation`` removes each object in turn; ``correlation`` picks the
    object with the largest last-frame affinity into Ego. ``predictor``
    overrides the model in causation mode (e.g. the simulator oracle).
    """
    if mode not in ("causation", "correlation"):
        raise DroidError("invalid_mode", f"unknown benchmark mode {mode!r}")
    _nonempty(test1, "test1")
    _nonempty(test2, "test2")
    resp, intent, _ = _predict_plain(model, test1)
    metrics = response_metrics(resp, intent, test1)
    if mode == "causation":
        pred = predictor or model_predictor(model)
        picks = [identify_risk_object(s, pred)[0] for s in test2]
    else:
        _, _, rows = _predict_plain(model, test2)
        picks = [correlation_identify(r, [t.id for t in s.clip.tracklets]) for r, s in zip(rows, test2)]
    return MetricsReport(mode, len(test1), test2_count=len(test2), droid=droid_rows(picks, test2), **metrics)
