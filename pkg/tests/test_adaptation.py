import dataclasses

import numpy as np
import pytest

from gfss.adaptation import (CLASSIFIER_PARAMS, AdaptationConfig, adapt, evaluate, frozen_report,
                             run_adaptation)
from gfss.errors import ConfigError, ContractError, NumericalError
from gfss.head import HeadParams, MergeConfig
from gfss.losses import pi_schedule
from gfss.synthgen import Episode, QueryImage, TaskSpec, generate_task, train_base_classifier

FAST = dict(epochs=40, lr=0.05, t_pi=5)


def test_separable_support_is_fit():
    spec = TaskSpec(n_base=1, n_novel=1, noise_std=0.05, image_size=(8, 8), head_budget=16,
                    n_base_images=2, n_support_images=2, n_query_images=1)
    episode, base = generate_task(spec)
    W = train_base_classifier(base, epochs=50)
    _, trace = run_adaptation(episode, W, AdaptationConfig(lam=0.0, arm="classifier-only", epochs=200,
                                                           lr=0.5))
    assert trace.column("support_miou")[-1] == pytest.approx(100.0)


def test_gamma_zero_transition_equals_classifier_only(small_task):
    _, episode, _, W = small_task
    a = adapt(episode, W, AdaptationConfig(**FAST, arm="transition", merge=MergeConfig(gamma=0.0)))
    b = adapt(episode, W, AdaptationConfig(**FAST, arm="classifier-only"))
    assert a.report == b.report
    np.testing.assert_array_equal(a.params.W_n_f, b.params.W_n_f)


def test_same_seed_bit_identical_trace(small_task):
    _, episode, _, W = small_task
    cfg = AdaptationConfig(**FAST)
    _, t1 = run_adaptation(episode, W, cfg)
    _, t2 = run_adaptation(episode, W, cfg)
    assert t1.rows() == t2.rows()


def test_frozen_weights_untouched(small_task):
    _, episode, _, W = small_task
    before = W.copy()
    params, _ = run_adaptation(episode, W, AdaptationConfig(**FAST))
    np.testing.assert_array_equal(W, before)
    np.testing.assert_array_equal(params.W_b_t, before)


def test_distillation_arm_isolated(small_task):
    _, episode, _, W = small_task
    cfg = AdaptationConfig(**FAST, arm="distillation-baseline")
    assert cfg.effective_merge.gamma == 0.0
    assert cfg.trainable() == CLASSIFIER_PARAMS
    params, trace = run_adaptation(episode, W, cfg)
    assert all(r.kd > 0 for r in trace.records)
    init = HeadParams.init(W, episode.partition, np.random.default_rng(cfg.seed))
    np.testing.assert_array_equal(params.beta, init.beta)
    np.testing.assert_array_equal(params.theta_c.w2, init.theta_c.w2)


def test_pi_follows_schedule(small_task):
    _, episode, _, W = small_task
    cfg = AdaptationConfig(**FAST)
    _, trace = run_adaptation(episode, W, cfg)
    initial = np.array(trace.records[0].pi)
    after = np.array(trace.records[cfg.t_pi + 1].pi)
    for r in trace.records:
        expected = pi_schedule(r.epoch, cfg.t_pi, initial, after)
        np.testing.assert_array_equal(np.array(r.pi), expected)
    assert not np.array_equal(initial, after)


def test_query_labels_never_drive_gradients(small_task):
    _, episode, _, W = small_task
    shuffled = Episode(episode.support,
                       [QueryImage(q.features, np.zeros_like(q.labels)) for q in episode.query],
                       episode.partition, episode.train_histogram, episode.image_size)
    cfg = AdaptationConfig(**FAST)
    a, _ = run_adaptation(episode, W, cfg)
    b, _ = run_adaptation(shuffled, W, cfg)
    np.testing.assert_array_equal(a.W_n_f, b.W_n_f)
    np.testing.assert_array_equal(a.beta, b.beta)


def test_lambda_zero_ignores_query(small_task):
    _, episode, _, W = small_task
    _, trace = run_adaptation(episode, W, AdaptationConfig(**FAST, lam=0.0))
    np.testing.assert_array_equal(trace.column("total"), trace.column("ldam"))


def test_loss_decreases_over_windows(small_task):
    _, episode, _, W = small_task
    _, trace = run_adaptation(episode, W, AdaptationConfig(epochs=800))
    total = trace.column("total")
    assert np.all(np.isfinite(total))
    means = total.reshape(-1, 50).mean(axis=1)
    assert np.mean(np.diff(means) <= 0) >= 0.9


def test_divergence_aborts(small_task):
    _, episode, _, W = small_task
    with pytest.raises(NumericalError):
        run_adaptation(episode, W, AdaptationConfig(epochs=30, lr=1e9, arm="classifier-only", lam=0.0))


def test_empty_support(small_task):
    _, episode, _, W = small_task
    empty = dataclasses.replace(episode, support=[])
    with pytest.raises(ContractError):
        run_adaptation(empty, W, AdaptationConfig(**FAST))


@pytest.mark.parametrize("kw, key", [
    ({"epochs": 0}, "epochs"), ({"lr": 0.0}, "lr"), ({"lam": -1.0}, "lambda"),
    ({"t_pi": 800}, "t_pi"), ({"arm": "nope"}, "arm"), ({"C": -0.1}, "C"),
])
def test_config_validation(kw, key):
    with pytest.raises(ConfigError) as err:
        AdaptationConfig(**kw)
    assert err.value.key == key


def test_trace_epochs_monotone(small_task):
    _, episode, _, W = small_task
    _, trace = run_adaptation(episode, W, AdaptationConfig(**FAST, trace_every=7))
    epochs = trace.column("epoch")
    assert np.all(np.diff(epochs) > 0) and epochs[-1] == FAST["epochs"] - 1


def test_frozen_report_never_predicts_novel(small_task):
    _, episode, _, W = small_task
    assert frozen_report(W, episode).novel_miou == 0.0
    result = adapt(episode, W, AdaptationConfig(**FAST))
    assert evaluate(result.params, episode, result.config.effective_merge) == result.report
