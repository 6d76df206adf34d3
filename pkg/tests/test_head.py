import numpy as np
import pytest

from gfss import autodiff as ad
from gfss.errors import ContractError, ShapeError
from gfss.head import (ClassPartition, HeadParams, MergeConfig, MLPParams, base_posterior,
                       classification_logits, head_logits, init_beta, merge_logits, mlp_forward,
                       predict, transition_logits, transition_matrices, transition_matrix_at)


def zero_mlp(F, out, hidden=2):
    return MLPParams(np.zeros((F, hidden)), np.zeros(hidden), np.zeros((hidden, out)), np.zeros(out))


def make_head(part, F=5, seed=0, **kw):
    rng = np.random.default_rng(seed)
    return HeadParams.init(rng.normal(size=(part.n_base_side, F)), part, rng, **kw)


def test_partition_layout():
    p = ClassPartition(3, 2)
    assert p.n_classes == 6 and p.n_base_side == 4
    assert list(p.base_ids) == [1, 2, 3] and list(p.novel_ids) == [4, 5]
    assert not set(p.base_ids) & set(p.novel_ids)
    with pytest.raises(ContractError):
        ClassPartition(0, 1)


def test_identity_classifier():
    W_b = np.eye(3, 4)
    logits = classification_logits(np.eye(4)[[0]], W_b, np.zeros((2, 4))).data
    np.testing.assert_array_equal(logits, [[1, 0, 0, 0, 0]])


def test_zero_features_zero_logits(rng):
    out = classification_logits(np.zeros((2, 4)), rng.normal(size=(3, 4)), rng.normal(size=(2, 4)))
    np.testing.assert_array_equal(out.data, np.zeros((2, 5)))


def test_classification_equals_matmul(rng):
    X, Wb, Wn = rng.normal(size=(2, 4)), rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
    np.testing.assert_allclose(classification_logits(X, Wb, Wn).data, X @ np.vstack([Wb, Wn]).T)


def test_dominant_diagonal_gives_one_hot_columns(part):
    F = 4
    beta = init_beta(part, kappa=10.0)
    S = transition_matrix_at(np.ones(F), zero_mlp(F, part.n_base_side), zero_mlp(F, part.n_classes), beta).data
    for b in range(part.n_base_side):
        assert S[b, b] > 0.99


def test_zero_everything_gives_uniform_columns(part):
    F = 4
    S = transition_matrix_at(np.ones(F), zero_mlp(F, part.n_base_side), zero_mlp(F, part.n_classes),
                             np.zeros((part.n_classes, part.n_base_side))).data
    np.testing.assert_allclose(S, np.full_like(S, 1 / part.n_classes))


def test_batched_matrices_match_single_pixel(part, rng):
    h = make_head(part)
    X = rng.normal(size=(3, 5))
    batch = transition_matrices(X, h.theta_r, h.theta_c, h.beta)
    for j in range(3):
        np.testing.assert_allclose(batch[j], transition_matrix_at(X[j], h.theta_r, h.theta_c, h.beta).data,
                                   rtol=1e-12, atol=1e-15)


def test_one_hot_posterior_selects_column(part, rng):
    h = make_head(part)
    x = rng.normal(size=5)
    S = transition_matrix_at(x, h.theta_r, h.theta_c, h.beta).data
    W = np.zeros((part.n_base_side, 5))
    W[1] = 1000.0 * x / (x @ x)  # posterior is e_1 to machine precision
    out = transition_logits(x, W, h.theta_r, h.theta_c, h.beta).data
    np.testing.assert_allclose(out, S[:, 1], atol=1e-12)


def test_uniform_columns_ignore_posterior(part, rng):
    F = 4
    zr, zc = zero_mlp(F, part.n_base_side), zero_mlp(F, part.n_classes)
    out = transition_logits(rng.normal(size=(3, F)), rng.normal(size=(part.n_base_side, F)), zr, zc,
                            np.zeros((part.n_classes, part.n_base_side))).data
    np.testing.assert_allclose(out, np.full_like(out, 1 / part.n_classes))


def test_transition_rows_sum_to_one(part, rng):
    h = make_head(part, out_std=1.0)
    out = transition_logits(rng.normal(size=(10, 5)), h.W_b_t, h.theta_r, h.theta_c, h.beta).data
    np.testing.assert_allclose(out.sum(axis=1), np.ones(10), atol=1e-12)


def test_merge_gamma_zero_is_identity(rng):
    cls = rng.normal(size=(3, 4))
    tr = rng.dirichlet(np.ones(4), size=3)
    for mode in ("log-prob-sum", "raw-sum"):
        np.testing.assert_array_equal(merge_logits(cls, tr, MergeConfig(mode, 0.0)).data, cls)


def test_raw_sum_with_zero_logits(rng):
    tr = rng.dirichlet(np.ones(4), size=3)
    np.testing.assert_array_equal(merge_logits(np.zeros((3, 4)), tr, MergeConfig("raw-sum", 1.0)).data, tr)


def test_log_prob_sum_oracle(rng):
    cls = rng.normal(size=(3, 4))
    tr = rng.dirichlet(np.ones(4), size=3)
    cfg = MergeConfig(gamma=1.7)
    p = ad.row_softmax(merge_logits(cls, tr, cfg)).data
    expected = np.exp(cls) / np.exp(cls).sum(axis=1, keepdims=True) * (tr + cfg.epsilon) ** cfg.gamma
    np.testing.assert_allclose(p, expected / expected.sum(axis=1, keepdims=True), rtol=1e-12)


def test_merge_config_validation():
    with pytest.raises(ContractError):
        MergeConfig(mode="product")
    with pytest.raises(ContractError):
        MergeConfig(gamma=-1.0)


def test_gamma_zero_matches_frozen_argmax(part, rng):
    h = make_head(part)
    h = h.with_flat({"W_n_f": np.full_like(h.W_n_f, -1e6)})
    X = np.abs(rng.normal(size=(50, 5))) + 0.1  # positive features: novel logits hugely negative
    pred = np.argmax(head_logits(X, h, MergeConfig(gamma=0.0)).data, axis=1)
    np.testing.assert_array_equal(pred, np.argmax(X @ h.W_b_t.T, axis=1))


def test_gamma_zero_ignores_transition_params(part, rng):
    h = make_head(part)
    X = rng.normal(size=(6, 5))
    other = h.with_flat({k: v + 1.0 for k, v in h.flat().items() if k.startswith(("r_", "c_", "beta"))})
    cfg = MergeConfig(gamma=0.0)
    np.testing.assert_array_equal(predict(X, h, cfg).data, predict(X, other, cfg).data)


def test_predict_is_composition(part, rng):
    h = make_head(part, out_std=0.5)
    X = rng.normal(size=(4, 5))
    cfg = MergeConfig()
    cls = classification_logits(X, h.W_b_f, h.W_n_f)
    tr = transition_logits(X, h.W_b_t, h.theta_r, h.theta_c, h.beta)
    expected = ad.row_softmax(merge_logits(cls, tr, cfg)).data
    np.testing.assert_allclose(predict(X, h, cfg).data, expected, rtol=1e-12)
    np.testing.assert_allclose(expected.sum(axis=1), np.ones(4), atol=1e-12)


def test_init_shapes_and_copy(part):
    h = make_head(part, F=8)
    assert h.W_b_f.shape == (3, 8) and h.W_n_f.shape == (2, 8)
    assert h.beta.shape == (part.n_classes, part.n_base_side)
    assert h.theta_r.w2.shape[1] == part.n_base_side and h.theta_c.w2.shape[1] == part.n_classes
    assert h.theta_r.w1.shape == (8, 2)  # hidden F // 4
    np.testing.assert_array_equal(h.W_b_f, h.W_b_t)
    assert h.W_b_f is not h.W_b_t


def test_init_beta_modes(part):
    b = init_beta(part, 4.0)
    np.testing.assert_array_equal(b[:3, :3], 4.0 * np.eye(3))
    assert not b[3:].any()
    assert not init_beta(part, 4.0, "uniform").any()


def test_with_flat_rejects_frozen(part):
    with pytest.raises(ContractError):
        make_head(part).with_flat({"W_b_t": np.zeros((3, 5))})


def test_shape_errors(part, rng):
    h = make_head(part)
    with pytest.raises(ShapeError):
        transition_matrix_at(rng.normal(size=5), h.theta_r, h.theta_c, np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        base_posterior(rng.normal(size=(2, 4)), h.W_b_t)
    with pytest.raises(ShapeError):
        merge_logits(np.zeros((2, 3)), np.zeros((2, 4)))


def test_rank_escape(part, rng):
    h = make_head(part, out_std=1.0)
    x = rng.normal(size=5)
    core = np.outer(mlp_forward(x, h.theta_c).data, mlp_forward(x, h.theta_r).data)
    assert np.linalg.matrix_rank(core) <= 1
    assert np.linalg.matrix_rank(core + rng.normal(size=core.shape)) > 1


def test_init_agreement_with_frozen_classifier(part, rng):
    h = make_head(part, F=16, seed=3)
    X = rng.normal(size=(500, 16))
    tr = transition_logits(X, h.W_b_t, h.theta_r, h.theta_c, h.beta).data
    agree = np.argmax(tr[:, :part.n_base_side], axis=1) == np.argmax(X @ h.W_b_t.T, axis=1)
    assert agree.mean() >= 0.99
