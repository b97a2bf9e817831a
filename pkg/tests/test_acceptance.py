"""One test per acceptance criterion; each records a PASS/FAIL line.

The lines are printed as they happen (visible with ``-s``) and again in
the terminal summary. Criteria 7 and 8 train full-size models and take
roughly 30 minutes together on one core.
"""

import json
import math
import time
import zlib

import numpy as np
import pytest
import scipy.sparse as sp

import conftest
from droid import diffcore as dc
from droid import graphs
from droid.causal import identify_risk_object, model_predictor, oracle_predictor
from droid.evaluation import benchmark, droid_accuracy, macro_micro_accuracy, per_frame_ap, perplexity
from droid.features import prepare_scene
from droid.model import Model, ModelConfig, checkpoint_bytes, compute_loss, forward, make_batch
from droid.scene import BoundingBox, Response
from droid.simulator import SimConfig, counterfactual_response, generate_dataset, generate_scenario
from droid.training import Sample, TrainConfig, augment_sample, train
from oracles import affinity_double_loop
from stubs import mark_object, presence_stub
from test_diffcore import OPS


def record(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  criterion {n}: {detail}"
    print(line)
    conftest.ACCEPTANCE_LINES.append(line)
    assert ok, line


# ------------------------------------------------------------------ 1


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    worst = {}
    ops = dict(OPS)
    ops["relu"] = lambda a, b: dc.mul(dc.relu(a), b)
    ops["sum"] = lambda a, b: dc.mul(dc.sum_(a, axis=0, keepdims=True), b)
    for name, op in sorted(ops.items()):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        w = 0.0
        for _ in range(20):
            a = dc.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
            b = dc.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
            if name == "max":
                a.value = np.abs(a.value) + np.arange(4) * 0.5
                b.value = np.ones((3, 4))
            if name == "relu":
                a.value = np.where(np.abs(a.value) < 1e-2, 0.5, a.value)
            w = max(w, dc.finite_diff_check(lambda: dc.sum_(op(a, b)), [a, b]))
        worst[name] = w
    rng = np.random.default_rng(0)
    m = sp.random(6, 5, density=0.4, random_state=0)
    x = dc.Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    worst["spmm"] = dc.finite_diff_check(lambda: dc.sum_(dc.tanh(dc.spmm(m, x))), [x])

    cfg = ModelConfig(dim=3, hidden=3, frames=10, grid=7, step_loss=True, seed=1)
    # first seed whose toy scene keeps all three objects visible
    scene = next(sc for sc in (generate_scenario(k, SimConfig(frames=10), kind="test2", n_objects=2)
                               for k in range(1, 50)) if len(sc.clip.tracklets) == 3)
    n_obj = len(scene.clip.tracklets)
    model = Model.create(cfg)
    batch = make_batch([prepare_scene(scene.clip, grid=7)], cfg)
    loss = lambda: compute_loss(forward(model.params, batch, cfg), [int(scene.labels[0])],
                                [int(scene.labels[1])], 2, cfg)
    worst["full_model"] = dc.finite_diff_check(loss, list(model.params.values()))
    elapsed = time.perf_counter() - t0
    top = max(worst.values())
    record(1, top < 1e-4 and elapsed < 120 and n_obj == 3,
           f"max relative error {top:.2e} over {len(worst)} checks ({n_obj}-object model loss), {elapsed:.1f}s")


# ------------------------------------------------------------------ 2


def test_criterion_2_affinity():
    rng = np.random.default_rng(2024)
    rows_err = brute_err = 0.0
    gated_ok = True
    for _ in range(500):
        n, d = int(rng.integers(1, 8)), int(rng.integers(2, 6))
        x = rng.normal(size=(n, d))
        pos = rng.uniform(-4, 4, size=(n, 3))
        w, wp = rng.normal(size=(d, d)), rng.normal(size=(d, d))
        g = graphs.build_affinity(x, "ego_thing", w, wp, positions=pos, mu=3.0)
        dist = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
        gate = (dist <= 3.0) | np.eye(n, dtype=bool)
        gated_ok &= bool(np.all(g[~gate] == 0.0))
        rows_err = max(rows_err, float(np.abs(g.sum(axis=1) - 1).max()))
        brute_err = max(brute_err, float(np.abs(g - affinity_double_loop(x, pos, 3.0, w, wp)).max()))
    record(2, rows_err <= 1e-6 and gated_ok and brute_err <= 1e-9,
           f"500 graphs: row-sum error {rows_err:.1e}, gated entries zero={gated_ok}, brute-force error {brute_err:.1e}")


# ------------------------------------------------------------------ 3


def test_criterion_3_locality():
    model = Model.create(ModelConfig(seed=3))
    cfg = SimConfig(isolated_bystander=True)
    worst, ok = 0.0, 0
    for seed in range(100):
        s = generate_scenario(10_000 + seed, cfg)
        bid = max(s.trajectories)
        r0, i0 = model.predict(s.clip)
        r1, i1 = model.predict(s.clip, bid)
        diff = max(np.abs(r0 - r1).max(), np.abs(i0 - i1).max())
        worst = max(worst, diff)
        ok += diff < 1e-9
    record(3, ok == 100, f"{ok}/100 isolated-object interventions below 1e-9 (max change {worst:.1e})")


# ------------------------------------------------------------------ 4


def stub_identification_runs():
    stub = model_predictor(presence_stub())
    rng = np.random.default_rng(4)
    hits, reports = 0, []
    for seed in range(200):
        s = generate_scenario(20_000 + seed, kind="test2")
        ids = [t.id for t in s.clip.tracklets]
        c = int(rng.choice(ids))
        marked = mark_object(s, c)
        picks = []
        for order in (ids, ids[::-1], rng.permutation(ids).tolist()):
            k, rep = identify_risk_object(marked, stub, order=order)
            picks.append(k)
            reports.append(rep.to_json())
        hits += all(k == c for k in picks)
    return hits, "\n".join(reports)


@pytest.fixture(scope="module")
def stub_run():
    return stub_identification_runs()


def test_criterion_4_stub_identification(stub_run):
    hits, _ = stub_run
    record(4, hits == 200, f"stub recovered object c in {hits}/200 scenarios under 3 evaluation orders each")


# ------------------------------------------------------------------ 5


def test_criterion_5_metric_fixtures():
    ln2 = perplexity(np.full((10, 2), 0.5), [0, 1] * 5) == math.log(2)
    labels = np.array([0] * 100 + [1] * 10)
    pred = np.array([0] * 90 + [1] * 10 + [0] * 10)
    macro, micro = macro_micro_accuracy(pred, labels)
    mm = abs(macro - 0.45) < 1e-12 and abs(micro - 90 / 110) < 1e-12
    _, _, macc = droid_accuracy([BoundingBox(0, 0, 10, 8)] * 4, [BoundingBox(0, 0, 10, 10)] * 4)
    ap = per_frame_ap([0.9, 0.8, 0.7, 0.1], [0, 0, 0, 1]) == 0.25
    ok = ln2 and mm and abs(macc - 0.7) < 1e-12 and ap
    record(5, ok, f"ln2={ln2}, macro={macro:.3f} micro={micro:.3f}, mAcc={macc:.3f}, AP={ap}")


# ------------------------------------------------------------------ 6


def test_criterion_6_augmentation_soundness():
    total = sound = 0
    rng = np.random.default_rng(6)
    for seed in range(500):
        s = generate_scenario(30_000 + seed, kind="go")
        a = augment_sample(Sample.from_scenario(0, s), rng)
        if a.removed is None:
            continue
        total += 1
        sound += counterfactual_response(s, a.removed) == Response.GO
    record(6, total > 0 and sound == total, f"{sound}/{total} augmented Go samples remain Go under the generative rule")


# ------------------------------------------------------------------ 7 / 8

COUNTS = (2000, 500, 200)


def end_to_end(tmp_path):
    t0 = time.perf_counter()
    data = generate_dataset(SimConfig(), COUNTS, seed=0)
    cfg = TrainConfig(seed=0)
    s1, _ = train(data["train"], cfg, 1, model_config=ModelConfig(seed=0))
    s1_bytes = checkpoint_bytes(s1.params, s1.config)
    models = {}
    for aug in (True, False):
        m = Model(s1.config, {k: dc.Tensor(v.value.copy(), requires_grad=True) for k, v in s1.params.items()})
        models[aug], _ = train(data["train"], TrainConfig(seed=0, augment=aug), 2, model=m)
    causation = benchmark(models[True], data["test1"], data["test2"], "causation")
    correlation = benchmark(models[True], data["test1"], data["test2"], "correlation")
    no_aug = benchmark(models[False], data["test1"], data["test2"], "correlation")
    elapsed = time.perf_counter() - t0
    return {
        "elapsed": elapsed,
        "causation": causation,
        "correlation": correlation,
        "no_aug": no_aug,
        "checkpoints": [s1_bytes] + [checkpoint_bytes(models[a].params, models[a].config) for a in (True, False)],
    }


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    return end_to_end(tmp_path_factory.mktemp("e2e"))


@pytest.mark.slow
def test_criterion_7_end_to_end(e2e):
    c, r, n = e2e["causation"], e2e["correlation"], e2e["no_aug"]
    checks = {
        "time < 30 min": e2e["elapsed"] < 1800,
        "micro >= 0.85": c.micro_accuracy >= 0.85,
        "perplexity <= 0.45": c.perplexity <= 0.45,
        "causation mAcc >= 0.70": c.overall.macc >= 0.70,
        "causation > correlation": c.overall.macc > r.overall.macc,
        "aug perplexity < no-aug": c.perplexity < n.perplexity,
    }
    failed = [k for k, v in checks.items() if not v]
    detail = (f"{e2e['elapsed'] / 60:.1f} min; micro {c.micro_accuracy:.3f}, perplexity {c.perplexity:.3f} "
              f"(no-aug {n.perplexity:.3f}); mAcc causation {c.overall.macc:.3f} vs correlation {r.overall.macc:.3f}")
    if failed:
        detail += "; failed: " + ", ".join(failed)
    record(7, not failed, detail)


@pytest.mark.slow
def test_criterion_8_determinism(e2e, stub_run, tmp_path):
    again = end_to_end(tmp_path)
    reports = all(again[k].to_json() == e2e[k].to_json() and again[k].to_csv() == e2e[k].to_csv()
                  for k in ("causation", "correlation", "no_aug"))
    ckpts = again["checkpoints"] == e2e["checkpoints"]
    stub = stub_identification_runs()[1] == stub_run[1]
    record(8, reports and ckpts and stub,
           f"repeat run: metric reports identical={reports}, checkpoints identical={ckpts}, risk reports identical={stub}")
