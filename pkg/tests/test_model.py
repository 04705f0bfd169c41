import math

import numpy as np
import pytest

from gfnet.errors import CheckpointHashError, CheckpointMagicError, CheckpointVersionError, ConfigurationError, UsageError
from gfnet.model import (
    GfModel,
    ModelConfig,
    checkpoint_bytes,
    load_checkpoint,
    param_hash,
    save_checkpoint,
)
from gfnet.numcore import Tensor, no_grad, softmax

from .test_numcore import gru_reference


@pytest.fixture(scope="module")
def tiny():
    return GfModel(ModelConfig(channels=(4, 8), strides=(2, 2), classifier_hidden=16, policy_hidden=8, T=3))


def rand_input(n=2, seed=0, size=16):
    return np.random.default_rng(seed).standard_normal((n, 3, size, size)).astype(np.float32)


def test_encode_shapes_and_pooling_oracle(tiny):
    e, pooled = tiny.encode(rand_input(), "local")
    assert e.shape == (2, 8, 4, 4)
    np.testing.assert_allclose(pooled.data, e.data.astype(np.float64).mean(axis=(2, 3)), rtol=1e-6, atol=1e-7)


def test_encode_zero_model_is_bias_only():
    model = GfModel(ModelConfig(channels=(4, 8), strides=(2, 2), T=2))
    for layer in model.global_encoder.layers:
        layer.weight.data[:] = 0
        layer.bias.data[:] = 0.25
    _, pooled = model.encode(np.zeros((1, 3, 16, 16), dtype=np.float32), "global")
    np.testing.assert_array_equal(pooled.data, np.full((1, 8), 0.25, dtype=np.float32))


def test_shared_weights_give_identical_outputs():
    model = GfModel(ModelConfig(channels=(4, 8), strides=(2, 2), T=2))
    for g, l in zip(model.global_encoder.parameters(), model.local_encoder.parameters()):
        l.data = g.data.copy()
    x = rand_input(seed=1)
    assert model.encode(x, "global")[1].data.tobytes() == model.encode(x, "local")[1].data.tobytes()


def test_encode_wrong_size(tiny):
    with pytest.raises(ConfigurationError):
        tiny.encode(rand_input(size=12), "global")


def test_fresh_model_predictions_near_uniform():
    model = GfModel(ModelConfig())
    x = np.random.default_rng(2).standard_normal((100, 3, 16, 16)).astype(np.float32)
    with no_grad():
        out = model.step(x, 1, None)
    p = out.probs
    assert p.shape == (100, 10)
    assert p.max() < 0.25
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_classify_step_matches_gru_oracle(tiny):
    cls = tiny.classifier
    pooled = Tensor(np.random.default_rng(3).standard_normal((2, 8)).astype(np.float32))
    with no_grad():
        logits1, h1 = tiny.classify_step(pooled, None, 1)
        logits2, h2 = tiny.classify_step(pooled, h1, 2)
    d = lambda p: p.data.astype(np.float64)
    ref1 = gru_reference(d(pooled), np.zeros((2, 16)), d(cls.cell.w_ih), d(cls.cell.w_hh), d(cls.cell.b_ih), d(cls.cell.b_hh))
    ref2 = gru_reference(d(pooled), ref1, d(cls.cell.w_ih), d(cls.cell.w_hh), d(cls.cell.b_ih), d(cls.cell.b_hh))
    np.testing.assert_allclose(h1.data, ref1, atol=1e-5)
    np.testing.assert_allclose(h2.data, ref2, atol=1e-5)
    assert not np.allclose(softmax(logits1.data), softmax(logits2.data))
    for lg in (logits1, logits2):
        np.testing.assert_allclose(softmax(lg.data.astype(np.float64)).sum(axis=1), 1.0, atol=1e-6)


def test_classify_step_beyond_T(tiny):
    with pytest.raises(UsageError):
        tiny.classify_step(Tensor(np.zeros((1, 8))), None, 4)


def test_cascaded_fc_widths():
    model = GfModel(ModelConfig(channels=(4, 8), strides=(2, 2), classifier="cascaded_fc", T=3))
    assert [h.weight.shape for h in model.classifier.heads] == [(10, 8), (10, 16), (10, 24)]
    state = None
    for t in range(1, 4):
        logits, state = model.classify_step(Tensor(np.ones((2, 8))), state, t)
        assert logits.shape == (2, 10)
        assert len(state) == t


def test_propose_deterministic_and_logprob(tiny):
    e, _ = tiny.encode(rand_input(seed=4), "global")
    a = tiny.propose_step(e, None, "deterministic")
    b = tiny.propose_step(e, None, "deterministic")
    np.testing.assert_array_equal(a[0], b[0])
    assert np.all((a[0] > 0) & (a[0] < 1))
    # action == mean: each coordinate contributes -ln(sigma sqrt(2 pi))
    per_coord = -math.log(0.1 * math.sqrt(2 * math.pi))
    assert per_coord == pytest.approx(1.3836, abs=1e-4)
    np.testing.assert_allclose(a[2].data, 2 * per_coord, rtol=1e-6)


def test_propose_mean_independent_of_rng(tiny):
    e, _ = tiny.encode(rand_input(seed=5), "global")
    m1 = tiny.propose_step(e, None, "stochastic", np.random.default_rng(1))[5]
    m2 = tiny.propose_step(e, None, "stochastic", np.random.default_rng(2))[5]
    np.testing.assert_array_equal(m1.data, m2.data)


def test_propose_stochastic_spread(tiny):
    e, _ = tiny.encode(np.zeros((1, 3, 16, 16), dtype=np.float32), "global")
    e = Tensor(np.repeat(e.data, 10_000, axis=0))
    loc, raw, _, _, _, mean = tiny.propose_step(e, None, "stochastic", np.random.default_rng(6))
    std = (raw - mean.data).std(axis=0)
    assert np.all((0.095 <= std) & (std <= 0.105))
    assert loc.min() >= 0 and loc.max() <= 1


def test_cascaded_feature_count_assertion():
    model = GfModel(ModelConfig(channels=(4, 8), strides=(2, 2), classifier="cascaded_fc", T=3))
    with pytest.raises(ConfigurationError):
        model.classifier(Tensor(np.ones((1, 8))), [Tensor(np.ones((1, 8)))], 3)


def test_synthetic_codes_vanish_under_glance_resize():
    from gfnet.dataio import PatchSpec, resize_glance
    from gfnet.synth import class_codes, render_code

    rendered = [render_code(c).astype(np.float32) for c in class_codes()]
    for i, a in enumerate(rendered):
        np.testing.assert_array_equal(resize_glance(a[None], PatchSpec(4, 4)), np.full((1, 4, 4), 130.0))
        for b in rendered[:i]:
            assert np.sum(a != b) >= 6 * 4  # >= 6 differing tiles, 4 pixels each


# -- checkpoints ---------------------------------------------------------------------

def test_checkpoint_roundtrip_bytes_and_forward(tmp_path, tiny):
    p1 = save_checkpoint(tiny, tmp_path / "a.gfck", stage="stage1", rng_state={"seed": 3})
    ck = load_checkpoint(p1)
    assert ck.stage == "stage1" and ck.meta["rng"] == {"seed": 3}
    p2 = save_checkpoint(ck.model, tmp_path / "b.gfck", stage="stage1", rng_state={"seed": 3})
    assert p1.read_bytes() == p2.read_bytes()
    assert param_hash(ck.model) == param_hash(tiny)
    x = rand_input(seed=7)
    with no_grad():
        a = tiny.step(x, 1, None).logits.data
        b = ck.model.step(x, 1, None).logits.data
    assert a.tobytes() == b.tobytes()


def test_checkpoint_errors(tmp_path, tiny):
    raw = bytearray(checkpoint_bytes(tiny))
    bad = tmp_path / "bad.gfck"
    bad.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(CheckpointMagicError, match="bad magic"):
        load_checkpoint(bad)
    ver = bytearray(raw)
    ver[4] = 9
    bad.write_bytes(bytes(ver))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(bad)
    flip = bytearray(raw)
    flip[len(flip) // 2] ^= 0xFF
    bad.write_bytes(bytes(flip))
    with pytest.raises(CheckpointHashError):
        load_checkpoint(bad)
