"""Acceptance suite: one test per criterion, each reporting PASS/FAIL with its measured values."""
import time

import numpy as np

from gfss import experiments as ex
from gfss.adaptation import AdaptationConfig, run_adaptation
from gfss.gradcheck import gradient_suite
from gfss.head import ClassPartition, HeadParams, MergeConfig, head_logits, predict, transition_logits, \
    transition_matrices
from gfss.io import FeatureMap, decode_feature_map, encode_feature_map
from gfss.losses import cross_entropy, ldam_loss, ldam_margins, project_new2old, total_loss, ClassPrior
from gfss.metrics import aggregate, combine_miou
from gfss.synthgen import TaskSpec

SUITE_START = time.perf_counter()


def test_01_metric_arithmetic(record):
    rows = [(37.41, 4.13, 20.77, 17.44), (55.46, 21.71, 38.58, 35.21), (37.37, 10.19, 23.78, 21.06)]
    errors = []
    for b, n, avg, w in rows:
        a, ww = combine_miou(b, n)
        errors += [abs(a - avg), abs(ww - w)]
    report = aggregate([0.0, 60.22, 59.32, 35.98, 75.47, 55.06, 40.29, 61.86, 0.44, 39.13, 0.00, 47.28],
                       ClassPartition(7, 4))
    errors += [abs(report.base_miou - 55.46), abs(report.novel_miou - 21.71)]
    worst = max(errors)
    assert record(1, "metric arithmetic vectors", worst <= 0.01,
                  f"max abs error {worst:.4f} (tol 0.01); per-class base {report.base_miou:.3f}, "
                  f"novel {report.novel_miou:.4f}")


def test_02_gradient_suite(record):
    t0 = time.perf_counter()
    reports = gradient_suite(100, seed=2024, epsilon=1e-5)
    elapsed = time.perf_counter() - t0
    worst = max(r.max_rel_error for _, r in reports)
    kinds = sorted({k for k, _ in reports})
    ok = len(reports) >= 100 and worst < 1e-4 and elapsed < 30
    assert record(2, "gradient suite", ok,
                  f"{len(reports)} instances over {kinds}, max rel err {worst:.2e} (tol 1e-4), {elapsed:.1f}s")


def test_03_reduction_identities(record, small_task):
    rng = np.random.default_rng(3)
    ce_gap = 0.0
    for _ in range(50):
        K, N = rng.integers(2, 7), rng.integers(1, 12)
        z, y = rng.normal(size=(N, K)) * 4, rng.integers(0, K, N)
        margins = ldam_margins(ClassPrior(rng.integers(1, 5000, K).astype(float)), 0.0)
        ce_gap = max(ce_gap, abs(ldam_loss(z, y, margins).item() - cross_entropy(z, y).item()))

    _, episode, _, W = small_task
    fast = dict(epochs=30, lr=0.05, t_pi=5)
    a, _ = run_adaptation(episode, W, AdaptationConfig(**fast, merge=MergeConfig(gamma=0.0)))
    b, _ = run_adaptation(episode, W, AdaptationConfig(**fast, arm="classifier-only"))
    Xq, _, _ = episode.query_arrays()
    same_pred = np.array_equal(predict(Xq, a, MergeConfig(gamma=0.0)).data,
                               predict(Xq, b, MergeConfig(gamma=0.0)).data)

    _, trace = run_adaptation(episode, W, AdaptationConfig(**fast, lam=0.0))
    lam0 = np.array_equal(trace.column("total"), trace.column("ldam")) and total_loss(0.8, 5.0, 0.0) == 0.8
    ok = ce_gap <= 1e-12 and same_pred and lam0
    assert record(3, "reduction identities", ok,
                  f"C=0 vs CE max gap {ce_gap:.1e} (tol 1e-12); gamma=0 predictions identical={same_pred}; "
                  f"lambda=0 objective is LDAM={lam0}")


def test_04_simplex_invariants(record):
    rng = np.random.default_rng(4)
    part = ClassPartition(3, 2)
    head = HeadParams.init(rng.normal(size=(4, 8)), part, rng, out_std=1.0)
    X = rng.normal(size=(1000, 8)) * 2
    S = transition_matrices(X, head.theta_r, head.theta_c, head.beta)
    col_err = float(np.abs(S.sum(axis=1) - 1).max())
    positive = bool(np.all(S > 0))
    tr = transition_logits(X, head.W_b_t, head.theta_r, head.theta_c, head.beta).data
    pr = predict(X, head).data
    row_err = float(max(np.abs(tr.sum(axis=1) - 1).max(), np.abs(pr.sum(axis=1) - 1).max()))
    p = rng.dirichlet(np.ones(part.n_classes), size=1000)
    mass_err = float(np.abs(project_new2old(p, part).data.sum(axis=1) - p.sum(axis=1)).max())
    ok = col_err <= 1e-6 and positive and row_err <= 1e-6 and mass_err <= 1e-15
    assert record(4, "stochasticity and simplex invariants", ok,
                  f"1000 matrices: column-sum err {col_err:.1e}, all positive={positive}; "
                  f"row-sum err {row_err:.1e} (tol 1e-6); new2old mass err {mass_err:.1e}")


def test_05_base_preservation(record):
    r = ex.base_preservation_study(n_episodes=10, kappa=4.0)
    assert record(5, "base preservation at init", r.passed,
                  f"agreement {100 * r.summary['agreement']:.2f}% over 10 episodes "
                  f"(min {100 * r.summary['min_episode']:.2f}%, need >= 99%)")


def test_06_imbalance(record):
    t0 = time.perf_counter()
    r = ex.imbalance_study()
    elapsed = time.perf_counter() - t0
    s = r.summary
    ok = r.passed and elapsed < 300
    assert record(6, "LDAM imbalance benefit", ok,
                  f"median novel mIoU C=0.5 {s['novel_ldam']:.2f} vs C=0 {s['novel_ce']:.2f}, "
                  f"gain {s['gain']:+.2f} (need >= 2); head:tail >= {s['min_head_tail_ratio']:.0f}:1; "
                  f"{elapsed:.0f}s")


def test_07_similarity(record):
    r = ex.similarity_study()
    s = r.summary
    assert record(7, "similarity benefit", r.passed,
                  f"median novel gap transition - classifier-only: cos 0.9 {s['gap_similar']:+.2f} vs "
                  f"cos 0 {s['gap_orthogonal']:+.2f} (need strictly larger at 0.9)")


def test_08_overfitting(record):
    r = ex.overfitting_study()
    s = r.summary
    assert record(8, "overfitting delay", r.passed,
                  f"median peak epoch lambda=1 {s['peak_epoch_lam1']:.0f} vs lambda=0 "
                  f"{s['peak_epoch_lam0']:.0f}; median peak query mIoU {s['peak_lam1']:.2f} vs "
                  f"{s['peak_lam0']:.2f}")


def test_09_forgetting(record):
    r = ex.forgetting_study()
    s = r.summary
    assert record(9, "forgetting control", r.passed,
                  f"median base-mIoU drop: transition {s['drop_transition']:.2f} (need <= 5), "
                  f"no-preservation {s['drop_no_preservation']:.2f} (need > transition)")


def test_10_determinism_io_runtime(record, small_task):
    _, episode, _, W = small_task
    cfg = AdaptationConfig(epochs=40, lr=0.05, t_pi=5)
    t1, t2 = run_adaptation(episode, W, cfg)[1], run_adaptation(episode, W, cfg)[1]
    identical = t1.rows() == t2.rows() and [r.pi for r in t1.records] == [r.pi for r in t2.records]

    rng = np.random.default_rng(10)
    feats = rng.normal(size=(16, 16, 32)).astype(np.float32).astype(np.float64)
    mask = rng.integers(0, 0xFFFF + 1, size=(16, 16))
    back = decode_feature_map(encode_feature_map(FeatureMap(feats, mask)))
    q = episode.query[0]
    h, w = episode.image_size
    back_q = decode_feature_map(encode_feature_map(FeatureMap(q.features.reshape(h, w, -1),
                                                              q.labels.reshape(h, w))))
    roundtrip = (np.array_equal(back.features, feats) and np.array_equal(back.mask, mask)
                 and np.array_equal(back_q.features.reshape(h * w, -1), q.features))
    elapsed = time.perf_counter() - SUITE_START
    ok = identical and roundtrip and elapsed < 600
    assert record(10, "determinism and I/O", ok,
                  f"bit-identical traces={identical}; bit-exact round trip={roundtrip}; "
                  f"acceptance suite so far {elapsed:.0f}s (limit 600s)")
