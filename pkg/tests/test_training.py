import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from droid.diffcore import backward
from droid.errors import DroidError
from droid.features import prepare_scene
from droid.model import Model, ModelConfig, checkpoint_bytes, compute_loss, forward, make_batch
from droid.scene import Response
from droid.simulator import SimConfig, counterfactual_response, generate_dataset, generate_scenario
from droid.training import Sample, TrainConfig, Trainer, augment_sample, train, write_log
from stubs import zero_model

SMALL = ModelConfig(dim=6, hidden=5)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(SimConfig(), (100, 1, 1), seed=3)["train"]


def test_augment_skips_stop_and_single_tracklet():
    rng = np.random.default_rng(0)
    stop = generate_scenario(1, kind="test2")
    s = Sample.from_scenario(0, stop)
    assert augment_sample(s, rng) is s
    single = generate_scenario(2, kind="go", n_objects=1)
    if len(single.clip.tracklets) == 1:
        s = Sample.from_scenario(0, single)
        assert augment_sample(s, rng) is s


def test_augment_keeps_label_and_masks_removed_object():
    rng = np.random.default_rng(0)
    sc = generate_scenario(4, kind="go", n_objects=3)
    s = Sample.from_scenario(0, sc)
    a = augment_sample(s, rng)
    assert a.response == Response.GO and a.intention == s.intention
    tr = sc.clip.tracklet(a.removed)
    for b, m in zip(tr.boxes, a.masks):
        if b is None:
            assert m is None
        else:
            assert m[int(b.y1), int(b.x1)] == 0 and m.sum() < m.size


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 2**31 - 1))
def test_augmentation_is_sound(seed, rng_seed):
    sc = generate_scenario(seed, kind="go")
    a = augment_sample(Sample.from_scenario(0, sc), np.random.default_rng(rng_seed))
    if a.removed is not None:
        assert counterfactual_response(sc, a.removed) == Response.GO


def test_augment_deterministic():
    sc = generate_scenario(5, kind="go", n_objects=4)
    a = augment_sample(Sample.from_scenario(0, sc), np.random.default_rng(7))
    b = augment_sample(Sample.from_scenario(0, sc), np.random.default_rng(7))
    assert a.removed == b.removed


def test_loss_values(data):
    m = zero_model(SMALL)
    scenes = [prepare_scene(s.clip) for s in data[:4]]
    out = forward(m.params, make_batch(scenes, SMALL), SMALL)
    assert compute_loss(out, [0] * 4, [0] * 4, 2, SMALL).item() == pytest.approx(np.log(2) + np.log(12))


def test_loss_is_batch_mean(data):
    m = Model.create(SMALL)
    scenes = [prepare_scene(s.clip) for s in data[:3]]
    labels = [s.labels for s in data[:3]]
    full = forward(m.params, make_batch(scenes, SMALL), SMALL)
    lfull = compute_loss(full, [int(l[0]) for l in labels], [int(l[1]) for l in labels], 2, SMALL).item()
    parts = []
    for sc, (i, r) in zip(scenes, labels):
        out = forward(m.params, make_batch([sc], SMALL), SMALL)
        parts.append(compute_loss(out, [int(i)], [int(r)], 2, SMALL).item())
    assert lfull == pytest.approx(np.mean(parts), rel=1e-10)


def test_stage2_without_model_fails(data):
    with pytest.raises(DroidError) as exc:
        train(data, TrainConfig(stage2_steps=1), 2)
    assert exc.value.code == "missing_checkpoint"


def test_invalid_config():
    with pytest.raises(DroidError):
        TrainConfig(lr_stage1=0.0)
    with pytest.raises(DroidError):
        TrainConfig(aug_prob=1.5)


def test_short_training_reduces_loss(data):
    cfg = TrainConfig(batch_size=16, stage1_steps=200, lr_stage1=3e-3)
    _, log = train(data, cfg, 1, model_config=SMALL)
    first = np.mean([r.loss for r in log[:20]])
    last = np.mean([r.loss for r in log[-20:]])
    assert last < first


def test_stage2_step_touches_every_parameter(data):
    m = Model.create(ModelConfig(dim=6, hidden=5, step_loss=True))
    cfg = TrainConfig(batch_size=16)
    trainer = Trainer(data, cfg, m)
    batch = next(trainer.batches(2, np.random.default_rng(0)))
    out = forward(m.params, make_batch([trainer.prepared(s) for s in batch], m.config), m.config)
    loss = compute_loss(out, [int(s.intention) for s in batch], [int(s.response) for s in batch], 2, m.config)
    grads = backward(loss)
    groups = {name.split(".")[0] for name, p in m.params.items() if p in grads and np.abs(grads[p]).sum() > 0}
    assert groups == {"backbone", "ego_thing", "ego_stuff", "encoder", "trn", "heads"}


def test_training_is_deterministic(tmp_path, data):
    cfg = TrainConfig(batch_size=8, stage1_steps=5, stage2_steps=5)
    blobs = []
    for run in range(2):
        m, _ = train(data[:30], cfg, 1, model_config=SMALL)
        m, log = train(data[:30], cfg, 2, model=m)
        write_log(tmp_path / f"log{run}.csv", log)
        blobs.append(checkpoint_bytes(m.params, m.config))
    assert blobs[0] == blobs[1]
    assert (tmp_path / "log0.csv").read_bytes() == (tmp_path / "log1.csv").read_bytes()
