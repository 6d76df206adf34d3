import numpy as np
import pytest

from gfss import autodiff as ad
from gfss.autodiff import value_and_grad
from gfss.errors import ContractError, ShapeError
from gfss.head import ClassPartition
from gfss.losses import (ClassPrior, cross_entropy, estimate_class_prior, floor_pi, image_proportions,
                         kd_loss, ldam_loss, ldam_margins, pi_regularizer, pi_schedule, project_new2old,
                         query_proportions, total_loss)

P11 = ClassPartition(1, 1)


def test_prior_counting():
    prior = estimate_class_prior([100, 900], [(np.array([1] * 10 + [0] * 5), 2)], P11)
    np.testing.assert_array_equal(prior.counts, [100, 900, 10])


def test_prior_clamps_missing_novel():
    with pytest.warns(UserWarning):
        prior = estimate_class_prior([100, 900], [(np.zeros(5), 2)], P11)
    assert prior.counts[2] == 1


def test_prior_is_additive():
    masks = [(np.array([1, 1, 1, 0]), 2), (np.array([1] * 7), 2)]
    assert estimate_class_prior([5, 5], masks, P11).counts[2] == 10


def test_prior_rejects_base_mask():
    with pytest.raises(ContractError):
        estimate_class_prior([5, 5], [(np.ones(3), 1)], P11)


def test_margins():
    np.testing.assert_array_equal(ldam_margins(ClassPrior(np.array([5.0, 7.0])), 0.0).deltas, [0, 0])
    assert ldam_margins(ClassPrior(np.array([16.0])), 2.0).deltas[0] == 1.0
    np.testing.assert_allclose(ldam_margins(ClassPrior(np.array([10000.0, 10.0])), 0.5).deltas,
                               [0.05, 0.2811706625951745], rtol=1e-12)
    d = ldam_margins(ClassPrior(np.array([3.0, 30.0, 300.0])), 0.5).deltas
    assert d[0] > d[1] > d[2] > 0


def test_ldam_zero_margins_is_cross_entropy(rng):
    z = rng.normal(size=(7, 4))
    y = rng.integers(0, 4, size=7)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    ref = -logp[np.arange(7), y].mean()
    assert abs(ldam_loss(z, y, np.zeros(4)).item() - ref) < 1e-12
    assert abs(cross_entropy(z, y).item() - ref) < 1e-12


def test_ldam_uniform_logits():
    assert abs(ldam_loss(np.zeros((3, 5)), [0, 1, 2], np.zeros(5)).item() - np.log(5)) < 1e-12


def test_ldam_scalar_oracle():
    value = ldam_loss(np.array([[1.0, 0.0, 0.0]]), [0], np.array([0.5, 0.0, 0.0])).item()
    assert abs(value - 0.7944) < 1e-4
    assert abs(value + np.log(np.exp(0.5) / (np.exp(0.5) + 2))) < 1e-12


def test_ldam_mask_selects_pixels(rng):
    z = rng.normal(size=(5, 3))
    y = np.array([0, 1, 2, 0xFFFF, 1])
    keep = y != 0xFFFF
    np.testing.assert_allclose(ldam_loss(z, y, np.zeros(3), keep).item(),
                               cross_entropy(z[keep], y[keep]).item(), rtol=1e-15)


def test_ldam_empty_mask():
    with pytest.raises(ContractError):
        ldam_loss(np.zeros((2, 2)), [0, 1], np.zeros(2), np.zeros(2, bool))


def test_larger_margin_pulls_harder():
    z = np.array([[0.3, 0.1]])
    _, (g_small,) = value_and_grad(lambda t: ldam_loss(t, [0], np.array([0.1, 0.0])), [z])
    _, (g_large,) = value_and_grad(lambda t: ldam_loss(t, [0], np.array([0.6, 0.0])), [z])
    assert g_large[0, 0] < g_small[0, 0] < 0


def test_proportions():
    np.testing.assert_array_equal(query_proportions(np.tile([0, 0, 1.0], (4, 1))).data, [0, 0, 1])
    np.testing.assert_array_equal(query_proportions(np.array([[1.0, 0], [0, 1.0]])).data, [0.5, 0.5])


def test_image_proportions_split_by_image(rng):
    p = rng.dirichlet(np.ones(3), size=6)
    idx = np.array([0, 0, 1, 1, 1, 0])
    out = image_proportions(p, idx).data
    np.testing.assert_allclose(out[0], p[idx == 0].mean(axis=0))
    np.testing.assert_allclose(out[1], p[idx == 1].mean(axis=0))


def test_pi_regularizer_values(rng):
    p = rng.dirichlet(np.ones(4))
    assert abs(pi_regularizer(p, p).item()) < 1e-12
    assert abs(pi_regularizer(np.array([1.0, 0.0]), np.array([0.5, 0.5])).item() - np.log(2)) < 1e-12
    for _ in range(20):
        assert pi_regularizer(rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(4))).item() >= 0


def test_pi_floor():
    out = floor_pi(np.array([1.0, 0.0]))
    assert out[1] > 0 and abs(out.sum() - 1) < 1e-15


def test_no_gradient_reaches_pi(rng):
    pi = ad.Tensor(rng.dirichlet(np.ones(3)), requires_grad=True)
    with ad.Tape() as tape:
        p = ad.Tensor(rng.dirichlet(np.ones(3)), requires_grad=True)
        out = pi_regularizer(p, pi)
    assert id(pi) not in tape.backward(out)


def test_pi_schedule():
    a, b = np.array([0.5, 0.5]), np.array([0.9, 0.1])
    np.testing.assert_array_equal(pi_schedule(0, 20, a, b), a)
    np.testing.assert_array_equal(pi_schedule(20, 20, a, b), a)  # boundary inclusive
    np.testing.assert_array_equal(pi_schedule(21, 20, a, b), b)
    with pytest.raises(ContractError):
        pi_schedule(21, 20, a, None)


def test_project_new2old():
    part = ClassPartition(2, 2)
    np.testing.assert_allclose(project_new2old(np.array([0.1, 0.2, 0.3, 0.25, 0.15]), part).data,
                               [0.5, 0.2, 0.3], rtol=1e-15)
    np.testing.assert_array_equal(project_new2old(np.eye(5)[1], part).data, [0, 1, 0])
    np.testing.assert_array_equal(project_new2old(np.eye(5)[4], part).data, [1, 0, 0])
    with pytest.raises(ShapeError):
        project_new2old(np.ones(4) / 4, part)


def test_kd_loss(rng):
    part = ClassPartition(2, 1)
    frozen = rng.dirichlet(np.ones(3), size=4)
    lifted = np.hstack([frozen, np.zeros((4, 1))])
    assert abs(kd_loss(lifted, frozen, part).item()) < 1e-12
    assert kd_loss(rng.dirichlet(np.ones(4), size=4), frozen, part).item() >= 0
    p = np.array([[0.2, 0.3, 0.1, 0.4]])
    q = np.array([[0.5, 0.25, 0.25]])
    expected = 0.6 * np.log(0.6 / 0.5) + 0.3 * np.log(0.3 / 0.25) + 0.1 * np.log(0.1 / 0.25)
    assert abs(kd_loss(p, q, part).item() - expected) < 1e-12


def test_total_loss():
    assert total_loss(0.7, 123.0, 0.0) == 0.7
    assert total_loss(1.0, 0.5, 4.0) == 3.0
    assert abs(total_loss(0.7944, 0.6931, 1.0) - 1.4875) < 1e-12
    with pytest.raises(ContractError):
        total_loss(1.0, 1.0, -1.0)
