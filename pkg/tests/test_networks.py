import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcon import numerics as nx
from tcon.networks import (ATTENTION, CLASSIFIER, DISC_SEGMENT, DISC_VIDEO, PROJECTOR, ArchConfig,
                           Mlp, MlpSpec, Projector, build_networks, network_specs, predicted_attention,
                           segment_forward, uniform_attention, video_prediction)
from tcon.numerics import ShapeError, Tensor


def _nets(d=4, c=3, kt=3, **arch):
    return build_networks(network_specs(d, c, kt, ArchConfig(**arch)), seed=0, in_dim=d)


# ---------------------------------------------------------------- MlpSpec


def test_mlpspec_rejects_bad_widths():
    with pytest.raises(ValueError):
        MlpSpec((4,))
    with pytest.raises(ValueError):
        MlpSpec((4, 0, 2))
    with pytest.raises(ValueError):
        MlpSpec((4, 2), output_activation="tanh")


@given(st.lists(st.integers(1, 9), min_size=2, max_size=5))
def test_param_count_matches_width_arithmetic(widths):
    spec = MlpSpec(tuple(widths))
    mlp = Mlp(spec, "m")
    expected = sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
    assert spec.num_params == expected
    assert sum(p.size for p in mlp.params) == expected


def test_default_network_shapes():
    nets = _nets(d=16, c=4, kt=8)
    assert nets.specs[PROJECTOR].widths == (16, 16, 16)
    assert nets.specs[ATTENTION].widths == (16, 64, 1)
    assert nets.specs[CLASSIFIER].widths == (16, 64, 4)
    assert nets.specs[DISC_SEGMENT].widths == (16, 64, 1)
    assert nets.specs[DISC_VIDEO].widths == (128, 128, 1)
    assert len(nets.all_params()) == 20
    assert all(p.requires_grad for p in nets.all_params())
    assert len(set(nets.named_params())) == 20


def test_glorot_limits_and_zero_biases():
    mlp = Mlp(MlpSpec((10, 30, 5)), "m", np.random.default_rng(1))
    w0, b0, w1, b1 = mlp.params
    assert np.abs(w0.data).max() <= np.sqrt(6 / 40)
    assert np.abs(w1.data).max() <= np.sqrt(6 / 35)
    assert not b0.data.any() and not b1.data.any()


def test_role_streams_are_independent_of_other_widths():
    a = _nets(classifier_hidden=8)
    b = _nets(classifier_hidden=16)
    np.testing.assert_array_equal(a.attention.params[0].data, b.attention.params[0].data)


# ---------------------------------------------------------------- projector


def test_projector_disabled_is_identity():
    nets = _nets(use_projector=False)
    x = Tensor(np.arange(8.0).reshape(2, 4))
    assert nets.projector(x) is x
    assert nets.projector.params == []


def test_projector_zero_weights_give_zero():
    mlp = Mlp(MlpSpec((3, 3, 3)), PROJECTOR)
    for p in mlp.params:
        p.data[...] = 0.0
    out = Projector(mlp, 3)(Tensor(np.ones((2, 3))))
    np.testing.assert_array_equal(out.data, 0.0)


def test_single_layer_identity_relu():
    mlp = Mlp(MlpSpec((3, 3), output_activation="relu"), PROJECTOR)
    mlp.params[0].data[...] = np.eye(3)
    x = np.array([[-1.0, 0.5, 2.0]])
    np.testing.assert_array_equal(Projector(mlp, 3)(Tensor(x)).data, np.maximum(x, 0))


def test_dimension_mismatch_raises():
    nets = _nets(d=4)
    with pytest.raises(ShapeError):
        nets.projector(Tensor(np.ones((2, 5))))
    with pytest.raises(ShapeError):
        nets.disc_video(Tensor(np.ones((1, 4))))
    with pytest.raises(ShapeError):
        nets.disc_segment(Tensor(np.ones((1, 12))))


# ---------------------------------------------------------------- attention net


def test_zero_last_layer_gives_uniform_attention():
    nets = _nets()
    f = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)))
    raw = segment_forward(nets.attention, f)
    np.testing.assert_array_equal(raw.data, 0.5)
    np.testing.assert_allclose(predicted_attention(nets.attention, f).data, 1 / 3, atol=1e-15)


def test_identical_segments_give_uniform_attention():
    nets = _nets()
    for p in nets.attention.params:
        p.data[...] = np.random.default_rng(3).normal(size=p.shape)
    f = Tensor(np.tile(np.random.default_rng(4).normal(size=4), (1, 5, 1)))
    np.testing.assert_allclose(predicted_attention(nets.attention, f).data, 0.2, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_predicted_attention_sums_to_one(seed):
    rng = np.random.default_rng(seed)
    nets = _nets()
    for p in nets.attention.params:
        p.data[...] = rng.normal(size=p.shape) * 2
    att = predicted_attention(nets.attention, Tensor(rng.normal(size=(3, 3, 4)))).data
    assert np.all(att > 0)
    np.testing.assert_allclose(att.sum(axis=1), 1.0, atol=1e-9)


# ---------------------------------------------------------------- classifier


def test_zero_classifier_is_uniform():
    nets = _nets(c=4)
    for p in nets.classifier.params:
        p.data[...] = 0.0
    out = nets.classifier(Tensor(np.random.default_rng(0).normal(size=(5, 4))))
    np.testing.assert_allclose(out.data, 0.25, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-20, 20))
def test_classifier_sums_to_one_and_bias_shift_invariant(seed, shift):
    rng = np.random.default_rng(seed)
    nets = _nets()
    x = Tensor(rng.normal(size=(6, 4)) * 3)
    before = nets.classifier(x).data
    np.testing.assert_allclose(before.sum(axis=1), 1.0, atol=1e-12)
    nets.classifier.params[-1].data += shift
    np.testing.assert_allclose(nets.classifier(x).data, before, atol=1e-12)


# ---------------------------------------------------------------- video prediction


def test_video_prediction_one_hot_and_uniform():
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(3), size=(1, 4))
    one_hot = np.zeros((1, 4))
    one_hot[0, 2] = 1.0
    np.testing.assert_array_equal(video_prediction(Tensor(probs), one_hot).data[0], probs[0, 2])
    np.testing.assert_allclose(video_prediction(Tensor(probs), uniform_attention(1, 4)).data[0],
                               probs[0].mean(axis=0), atol=1e-15)


def test_video_prediction_length_mismatch():
    with pytest.raises(ShapeError):
        video_prediction(Tensor(np.full((1, 4, 3), 1 / 3)), np.full((1, 3), 1 / 3))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_video_prediction_simplex_and_permutation_covariant(seed):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(4), size=(2, 5))
    att = rng.dirichlet(np.ones(5), size=2)
    out = video_prediction(Tensor(probs), att).data
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
    perm = rng.permutation(5)
    np.testing.assert_allclose(video_prediction(Tensor(probs[:, perm]), att[:, perm]).data, out,
                               atol=1e-12)


# ---------------------------------------------------------------- discriminators


def test_zero_initialised_discriminators_output_half():
    nets = _nets()
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(nets.disc_video(Tensor(rng.normal(size=(2, 12)))).data, 0.5)
    np.testing.assert_array_equal(nets.disc_segment(Tensor(rng.normal(size=(2, 4)))).data, 0.5)


def test_discriminator_output_strictly_inside_unit_interval():
    # float64 sigmoid only rounds to 0 or 1 beyond |logit| ~ 37; the losses clamp those
    nets = _nets()
    for p in nets.disc_segment.params:
        p.data[...] = np.random.default_rng(1).normal(size=p.shape) * 0.2
    out = nets.disc_segment(Tensor(np.random.default_rng(2).normal(size=(50, 4)) * 3)).data
    assert np.all((out > 0) & (out < 1))


def test_network_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    nets = _nets(attention_hidden=3, classifier_hidden=3, disc_segment_hidden=3, disc_video_hidden=3)
    for p in nets.all_params():
        p.data[...] = rng.normal(size=p.shape)
    x = rng.normal(size=(2, 3, 4))

    def loss():
        f = segment_forward(nets.projector, Tensor(x))
        att = predicted_attention(nets.attention, f)
        pred = video_prediction(segment_forward(nets.classifier, f), att)
        dv = nets.disc_video(nx.reshape(f, (2, 12)))
        ds = nets.disc_segment(nx.reshape(f, (6, 4)))
        return nx.sum(nx.log(pred)) + nx.sum(dv) + nx.sum(ds * ds)

    params = nets.all_params()
    with nx.Tape() as tape:
        tape.backward(loss(), params)
    for p in params:
        num = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + 1e-6
            up = loss().item()
            flat[i] = orig - 1e-6
            down = loss().item()
            flat[i] = orig
            num.reshape(-1)[i] = (up - down) / 2e-6
        np.testing.assert_allclose(p.grad, num, rtol=1e-5, atol=1e-8, err_msg=p.name)
