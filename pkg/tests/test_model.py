import numpy as np
import pytest

from droid.diffcore import Tensor, backward, finite_diff_check, softmax
from droid.errors import DroidError
from droid.features import prepare_scene
from droid.model import (
    Model,
    ModelConfig,
    checkpoint_bytes,
    compute_loss,
    encode_interactions,
    forward,
    init_params,
    load_checkpoint,
    make_batch,
    parse_checkpoint,
    save_checkpoint,
)
from droid.simulator import SimConfig, generate_scenario
from stubs import mark_object, presence_stub, zero_model

SMALL = ModelConfig(dim=6, hidden=5)


@pytest.fixture(scope="module")
def scenarios():
    return [generate_scenario(s, SimConfig(isolated_bystander=True)) for s in range(4)]


@pytest.fixture(scope="module")
def model():
    return Model.create(SMALL)


def test_encoder_zero_inputs_zero_weights():
    p = zero_model(SMALL).params
    h, states = encode_interactions(p, Tensor(np.zeros((2, 7, 6))), 5)
    assert len(states) == 7
    assert not h.value.any() and not any(s.value.any() for s in states)


def test_zero_weight_network_is_uniform(scenarios):
    m = zero_model(SMALL)
    resp, intent = m.predict(scenarios[0].clip)
    assert np.array_equal(resp, [0.5, 0.5])
    assert np.allclose(intent, 1 / 12, atol=1e-15)


def test_accumulator_input_width(model):
    assert model.params["trn.sta.W"].shape[0] == 2 * SMALL.hidden


def test_distributions_valid(model, scenarios):
    out = model.run([prepare_scene(s.clip) for s in scenarios])
    assert np.allclose(out.response_probs.sum(axis=1), 1.0, atol=1e-9)
    assert np.allclose(out.intention_probs.sum(axis=1), 1.0, atol=1e-9)
    assert (out.response_probs >= 0).all()


def test_intention_argmax_shift_invariant():
    logits = np.random.default_rng(0).normal(size=12)
    a = softmax(Tensor(logits)).value
    b = softmax(Tensor(logits + 7.5)).value
    assert a.argmax() == b.argmax()


def test_predict_pure_and_batch_consistent(model, scenarios):
    a = model.predict(scenarios[1].clip)
    b = model.predict(scenarios[1].clip)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    batched = model.run([prepare_scene(s.clip) for s in scenarios]).response_probs[1]
    assert np.allclose(batched, a[0], atol=1e-12)


def test_predict_unknown_tracklet(model, scenarios):
    with pytest.raises(DroidError):
        model.predict(scenarios[0].clip, intervention=12345)


def test_isolated_intervention_changes_nothing(model, scenarios):
    for s in scenarios:
        bid = max(s.trajectories)
        r0, i0 = model.predict(s.clip)
        r1, i1 = model.predict(s.clip, bid)
        assert np.abs(r0 - r1).max() < 1e-9 and np.abs(i0 - i1).max() < 1e-9


def test_tracklet_order_does_not_matter(model, scenarios):
    from dataclasses import replace

    s = scenarios[2]
    flipped = replace(s.clip, tracklets=list(reversed(s.clip.tracklets)))
    a, _ = model.predict(s.clip)
    b, _ = model.predict(flipped)
    assert np.allclose(a, b, atol=1e-12)


def test_presence_stub_stop_iff_object_present():
    stub = presence_stub()
    s = generate_scenario(9, kind="test2")
    for tr in s.clip.tracklets:
        marked = mark_object(s, tr.id)
        assert stub.predict(marked.clip)[0].argmax() == 1
        assert stub.predict(marked.clip, tr.id)[0].argmax() == 0


def test_loss_stage_terms(scenarios):
    m = zero_model(SMALL)
    batch = make_batch([prepare_scene(s.clip) for s in scenarios[:2]], SMALL)
    out = forward(m.params, batch, SMALL)
    l1 = compute_loss(out, [0, 3], [0, 1], 1, SMALL).item()
    l2 = compute_loss(out, [0, 3], [0, 1], 2, SMALL).item()
    assert l1 == pytest.approx(np.log(12))
    assert l2 - l1 == pytest.approx(np.log(2))


def test_full_model_gradient_check():
    cfg = ModelConfig(dim=3, hidden=3, frames=10, grid=7, step_loss=True, seed=1)
    sim = SimConfig(frames=10)
    scenes = [generate_scenario(s, sim, kind="test2") for s in (1, 2)]
    model = Model.create(cfg)
    batch = make_batch([prepare_scene(s.clip, grid=7) for s in scenes], cfg)
    f = lambda: compute_loss(forward(model.params, batch, cfg), [1, 2], [1, 0], 2, cfg)
    assert finite_diff_check(f, list(model.params.values())) < 1e-4


def test_checkpoint_roundtrip_byte_identical(tmp_path, model):
    path = tmp_path / "m.bin"
    save_checkpoint(path, model.params, model.config)
    params, config = load_checkpoint(path)
    assert config == model.config
    assert checkpoint_bytes(params, config) == path.read_bytes()


def test_checkpoint_corrupt():
    with pytest.raises(DroidError):
        parse_checkpoint(b"NOTACKPT")
    good = checkpoint_bytes(init_params(SMALL), SMALL)
    with pytest.raises(DroidError):
        parse_checkpoint(good[:-3])


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(DroidError):
        load_checkpoint(tmp_path / "nope.bin")
