import math
import warnings

import numpy as np
import pytest

from tcon import losses
from tcon import numerics as nx
from tcon.losses import EmptyDomainBatch
from tcon.networks import ArchConfig
from tcon.numerics import ShapeError, Tape, Tensor
from tcon.trainer import TrainConfig, compute_losses, init_state, total_loss

LN2 = math.log(2.0)


class _Const:
    """Stand-in discriminator returning fixed probabilities."""

    def __init__(self, value):
        self.value = value

    def __call__(self, x):
        return Tensor(np.full((x.shape[0], 1), self.value))


# ---------------------------------------------------------------- attention loss


def test_attention_loss_examples():
    gt = np.array([[0.2, 0.3, 0.5]])
    assert losses.attention_loss(Tensor(gt), gt).item() == 0.0
    assert losses.attention_loss(Tensor([[1.0, 0.0]]), [[0.0, 1.0]]).item() == pytest.approx(1.0)


def test_attention_loss_uniform_perturbation_is_second_order():
    eps = 1e-3
    u = np.full((1, 4), 0.25)
    p = u + np.array([[eps, 0, 0, 0]])
    p = p / p.sum()
    expected = np.mean((p - u) ** 2)
    got = losses.attention_loss(Tensor(p), u).item()
    assert got == pytest.approx(expected, rel=1e-12)
    assert got < 10 * eps ** 2


def test_attention_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        losses.attention_loss(Tensor(np.full((1, 3), 1 / 3)), np.full((1, 4), 0.25))


# ---------------------------------------------------------------- classification


def test_classification_loss_examples():
    assert losses.classification_loss(Tensor([[0.0, 1.0, 0.0]]), [1]).item() == pytest.approx(0.0, abs=1e-11)
    assert losses.classification_loss(Tensor(np.full((2, 4), 0.25)), [0, 3]).item() == pytest.approx(
        math.log(4), abs=1e-12)


def test_empty_pseudo_set_leaves_source_term():
    src = Tensor([[0.7, 0.3], [0.2, 0.8]])
    base = losses.classification_loss(src, [0, 1]).item()
    with_empty = losses.classification_loss(src, [0, 1], Tensor(np.zeros((0, 2))), np.zeros(0, int)).item()
    assert with_empty == base
    with_one = losses.classification_loss(src, [0, 1], Tensor([[0.5, 0.5]]), [0]).item()
    assert with_one == pytest.approx(base + LN2)


def test_cross_entropy_is_finite_for_zero_probability():
    assert math.isfinite(losses.cross_entropy(Tensor([[0.0, 1.0]]), [0]).item())


# ---------------------------------------------------------------- pseudo labels


def test_pseudo_label_examples():
    assert losses.pseudo_label([0.95, 0.05], 0.9) == 0
    assert losses.pseudo_label([0.6, 0.4], 0.9) is None
    assert losses.pseudo_label([0.5, 0.5], 0.5) == 0


def test_pseudo_labels_vectorised_agrees():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(3) * 0.3, size=200)
    rows, labels = losses.pseudo_labels(p, 0.8)
    single = [losses.pseudo_label(row, 0.8) for row in p]
    assert rows.tolist() == [i for i, s in enumerate(single) if s is not None]
    assert labels.tolist() == [s for s in single if s is not None]


# ---------------------------------------------------------------- domain losses


def test_untrained_discriminators_give_two_ln2():
    x = Tensor(np.ones((3, 6)))
    assert losses.video_domain_loss(_Const(0.5), x, x).item() == pytest.approx(2 * LN2)
    assert losses.segment_domain_loss(_Const(0.5), x, x).item() == pytest.approx(2 * LN2)


def test_domain_loss_hand_values():
    got_v = losses.domain_loss(Tensor([[0.8]]), Tensor([[0.2]])).item()
    assert got_v == pytest.approx(-math.log(0.8) - math.log(0.8), abs=1e-12)
    assert got_v == pytest.approx(0.4463, abs=1e-4)
    got_s = losses.domain_loss(Tensor([[0.9]]), Tensor([[0.1]])).item()
    assert got_s == pytest.approx(0.2107, abs=1e-4)


def test_perfect_discriminator_tends_to_zero():
    assert losses.domain_loss(Tensor([[1 - 1e-9]]), Tensor([[1e-9]])).item() < 1e-8


def test_copied_segments_are_indistinguishable():
    rng = np.random.default_rng(0)
    src = rng.normal(size=(3, 4))
    aligned = src[[2, 0, 1]]  # one-hot columns copy source segments
    disc = _Const(0.5)
    assert losses.segment_domain_loss(disc, Tensor(src), Tensor(aligned)).item() == pytest.approx(2 * LN2)


def test_empty_domain_set_warns_and_returns_zero():
    with pytest.warns(EmptyDomainBatch):
        out = losses.video_domain_loss(_Const(0.5), Tensor(np.zeros((0, 4))), Tensor(np.ones((1, 4))))
    assert out.item() == 0.0


# ---------------------------------------------------------------- objectives


def test_objectives_examples():
    gen, disc = losses.objectives(1.0, 0.5, 2.0, 1.0, 1.0, 1.0, "paper")
    assert gen == pytest.approx(0.5)
    assert disc == pytest.approx(3.0)
    gen_s, disc_s = losses.objectives(1.0, 0.5, 2.0, 1.0, 1.0, 1.0, "symmetric")
    assert gen_s == pytest.approx(-1.5)
    assert disc_s == disc
    for mode in losses.SIGN_MODES:
        assert losses.objectives(1.0, 0.5, 2.0, 1.0, 2.0, 0.0, mode)[0] == pytest.approx(2.0)
        assert losses.objectives(1.0, 0.5, 2.0, 1.0, 0.0, 0.0, mode)[0] == pytest.approx(1.0)


def test_objectives_reject_negative_lambda_and_unknown_mode():
    with pytest.raises(ValueError):
        losses.objectives(1, 1, 1, 1, -1.0, 1.0)
    with pytest.raises(ValueError):
        losses.objectives(1, 1, 1, 1, 1.0, -0.1)
    with pytest.raises(ValueError):
        losses.objectives(1, 1, 1, 1, 1.0, 1.0, "other")


def test_reversal_lambdas():
    assert losses.reversal_lambdas(0.3, "paper") == (0.3, -0.3)
    assert losses.reversal_lambdas(0.3, "symmetric") == (0.3, 0.3)


# ---------------------------------------------------------------- min-max realisation


def _micro_state(sign_mode="paper", seed=0):
    cfg = TrainConfig(seed=seed, batch_size=2, sign_mode=sign_mode, pair_threshold=0.0,
                      arch=ArchConfig(attention_hidden=5, classifier_hidden=5,
                                      disc_segment_hidden=5, disc_video_hidden=5))
    state = init_state(cfg, in_dim=4, num_classes=3, k_target=3)
    rng = np.random.default_rng(seed + 10)
    for p in state.nets.all_params():
        p.data[...] = rng.normal(size=p.shape) * 0.5
    state.gate_open = True
    xs = rng.normal(size=(2, 3, 4))
    xt = rng.normal(size=(2, 3, 4))
    return state, xs, np.array([0, 2]), xt


@pytest.mark.parametrize("sign_mode", losses.SIGN_MODES)
def test_grad_reverse_matches_two_phase_gradients(sign_mode):
    state, xs, ys, xt = _micro_state(sign_mode)
    cfg = state.config
    lam_d = 0.7
    gen = state.nets.generator_params()
    disc = state.nets.discriminator_params()
    params = gen + disc

    # single backward through gradient reversal
    lam_v, lam_s = losses.reversal_lambdas(lam_d, sign_mode)
    with Tape() as tape:
        terms = compute_losses(state, xs, ys, xt, lam_v, lam_s)
        for p in params:
            p.grad = None
        tape.backward(total_loss(terms, cfg.lambda_a), params)
    single = {p.name: p.grad.copy() for p in params}
    fixed = dict(pairs=terms.pairs, pseudo=(terms.pseudo_rows, terms.pseudo_labels), frozen=terms.frozen)

    # phase 1: generator objective, discriminators frozen
    with Tape() as tape:
        t = compute_losses(state, xs, ys, xt, -1.0, -1.0, **fixed)
        gen_obj, _ = losses.objectives(t.c_y, t.c_a, t.c_dv, t.c_ds, cfg.lambda_a, lam_d, sign_mode)
        for p in params:
            p.grad = None
        tape.backward(gen_obj, gen)
    for p in gen:
        np.testing.assert_allclose(single[p.name], p.grad, rtol=0, atol=1e-10, err_msg=p.name)

    # phase 2: discriminator objective, generator frozen
    with Tape() as tape:
        t = compute_losses(state, xs, ys, xt, -1.0, -1.0, **fixed)
        _, disc_obj = losses.objectives(t.c_y, t.c_a, t.c_dv, t.c_ds, cfg.lambda_a, lam_d, sign_mode)
        for p in params:
            p.grad = None
        tape.backward(disc_obj, disc)
    for p in disc:
        np.testing.assert_allclose(single[p.name], p.grad, rtol=0, atol=1e-10, err_msg=p.name)


def test_discriminator_objective_decreases_under_discriminator_steps():
    state, xs, ys, xt = _micro_state("symmetric", seed=3)
    state.gen_opt = None
    opt = nx.Optimizer(state.nets.discriminator_params(), kind="sgd", lr=0.05)
    first = compute_losses(state, xs, ys, xt, 0.0, 0.0)
    fixed = dict(pairs=first.pairs, pseudo=(first.pseudo_rows, first.pseudo_labels), frozen=first.frozen)
    history = []
    for _ in range(8):
        with Tape() as tape:
            t = compute_losses(state, xs, ys, xt, 0.0, 0.0, **fixed)
            obj = t.c_dv + t.c_ds
            opt.zero_grad()
            tape.backward(obj, opt.params)
        history.append(obj.item())
        opt.step()
    assert all(b <= a + 1e-9 for a, b in zip(history, history[1:])), history
    assert history[-1] < history[0]


def test_loss_terms_nonnegative_and_finite():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        for seed in range(5):
            state, xs, ys, xt = _micro_state(seed=seed)
            t = compute_losses(state, xs, ys, xt, 1.0, -1.0)
            for v in (t.c_y, t.c_a, t.c_dv, t.c_ds):
                assert math.isfinite(v.item()) and v.item() >= 0
