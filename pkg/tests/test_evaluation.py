import csv
import io

import numpy as np
import pytest

from anchorpc.cloud import PointCloud, apply_rigid, random_rigid, rotation_from_euler
from anchorpc.codec import encode
from anchorpc.anchors import select_anchors
from anchorpc.completion import CompletionConfig
from anchorpc.errors import DegenerateConfiguration, EmptyCloud, TooFewRemaining
from anchorpc.evaluation import (
    EvalReport,
    add_gaussian_noise,
    aggregate,
    chamfer_l1,
    chamfer_l2,
    encode_deviation,
    equivariance_report,
    fidelity,
    pca_canonicalize,
    removal_split,
    remove_points,
    reports_to_csv,
)

from conftest import random_cloud, sphere_cloud

O = PointCloud([[0, 0, 0]])
X = PointCloud([[1, 0, 0]])


def brute_chamfer(a, b, power):
    d = np.linalg.norm(a[:, None] - b[None], axis=2) ** power
    return 1000 * (d.min(axis=1).mean() + d.min(axis=0).mean())


# --- metrics -----------------------------------------------------------------------

def test_metric_hand_cases():
    assert chamfer_l1(O, O) == 0.0
    assert chamfer_l1(O, X) == 2000.0
    assert chamfer_l2(O, X) == 2000.0
    assert fidelity(O, X) == 1000.0


def test_metrics_match_brute_force(rng):
    a, b = rng.uniform(size=(70, 3)), rng.uniform(size=(50, 3))
    assert chamfer_l1(a, b) == pytest.approx(brute_chamfer(a, b, 1), rel=1e-12)
    assert chamfer_l2(a, b) == pytest.approx(brute_chamfer(a, b, 2), rel=1e-12)


def test_chamfer_symmetric(rng):
    a, b = random_cloud(rng, 60), random_cloud(rng, 40)
    assert chamfer_l1(a, b) == pytest.approx(chamfer_l1(b, a), rel=1e-15)
    assert chamfer_l2(a, b) == pytest.approx(chamfer_l2(b, a), rel=1e-15)


def test_chamfer_zero_only_for_equal_sets(rng):
    a = random_cloud(rng, 60)
    assert chamfer_l1(a, a.subset(rng.permutation(60))) == 0.0
    b = PointCloud(a.points.copy())
    b_pts = b.points.copy()
    b_pts[7, 0] += 1e-6
    assert chamfer_l1(a, PointCloud(b_pts)) > 0


def test_chamfer_rigid_invariant(rng):
    a, b = random_cloud(rng, 80), random_cloud(rng, 90)
    T = random_rigid(2, translation_scale=5.0)
    for f in (chamfer_l1, chamfer_l2):
        assert f(apply_rigid(a, T), apply_rigid(b, T)) == pytest.approx(f(a, b), rel=1e-9)


def test_fidelity_superset_and_asymmetry(rng):
    a = random_cloud(rng, 30)
    sup = PointCloud(np.vstack([a.points, rng.uniform(2, 3, (20, 3))]))
    assert fidelity(a, sup) == 0.0
    assert fidelity(sup, a) > 0.0


def test_metrics_reject_empty():
    with pytest.raises(EmptyCloud):
        chamfer_l1(np.zeros((0, 3)), O)
    with pytest.raises(EmptyCloud):
        fidelity(O, np.zeros((0, 3)))


def test_aggregate():
    assert aggregate([1, 2, 6]) == 3.0
    assert aggregate([1, 2, 6], "median") == 2.0
    with pytest.raises(ValueError):
        aggregate([1], "max")


# --- PCA canonicalization -------------------------------------------------------------

def _skewed_box(rng, n=500):
    P = rng.uniform(size=(n, 3)) * [4.0, 2.0, 1.0]
    P[:, 0] = P[:, 0] ** 2 / 4
    P[:, 1] = P[:, 1] ** 2 / 2
    P[:, 2] = P[:, 2] ** 2
    return PointCloud(P)


def test_pca_canonical_box_is_fixed_point(rng):
    c = pca_canonicalize(_skewed_box(rng))
    again = pca_canonicalize(c.cloud)
    np.testing.assert_allclose(again.transform.rotation, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(again.cloud.points, c.cloud.points, atol=1e-12)
    assert c.stable


def test_pca_rotation_invariant(rng):
    P = _skewed_box(rng)
    base = pca_canonicalize(P).cloud.points
    for s in range(10):
        moved = apply_rigid(P, random_rigid(s, translation_scale=3.0))
        np.testing.assert_allclose(pca_canonicalize(moved).cloud.points, base, atol=1e-6)


def test_pca_translation_invariant(rng):
    P = _skewed_box(rng)
    shifted = PointCloud(P.points + [10.0, -3.0, 0.5])
    np.testing.assert_allclose(pca_canonicalize(shifted).cloud.points,
                               pca_canonicalize(P).cloud.points, atol=1e-12)


def test_pca_output_axes(rng):
    c = pca_canonicalize(_skewed_box(rng))
    X = c.cloud.points
    np.testing.assert_allclose(X.mean(axis=0), 0, atol=1e-12)
    cov = X.T @ X / len(X)
    assert abs(cov[0, 1]) < 1e-10 and abs(cov[1, 2]) < 1e-10
    assert cov[0, 0] > cov[1, 1] > cov[2, 2]
    assert np.all((X ** 3).sum(axis=0) >= 0)
    assert np.linalg.det(c.transform.rotation) == pytest.approx(1.0)


def test_pca_sphere_is_unstable():
    r = np.random.default_rng(0)
    S = sphere_cloud(r, 20000)
    assert not pca_canonicalize(S, gap_tol=0.05).stable


def test_pca_rejects_collinear():
    with pytest.raises(DegenerateConfiguration):
        pca_canonicalize(PointCloud([[0, 0, 0], [1, 1, 1], [2, 2, 2]]))


# --- perturbations ----------------------------------------------------------------------

def test_noise_sigma_zero_and_determinism(rng):
    P = random_cloud(rng, 100)
    assert add_gaussian_noise(P, 0.0, 1) is P
    a = add_gaussian_noise(P, 0.01, 7)
    b = add_gaussian_noise(P, 0.01, 7)
    assert np.array_equal(a.points, b.points)


def test_noise_std(rng):
    P = random_cloud(rng, 2048)
    eps = add_gaussian_noise(P, 0.002, 3).points - P.points
    assert abs(eps.std() - 0.002) < 0.05 * 0.002
    assert abs(eps.mean()) < 1e-4


def test_noise_respects_encode_bound(rng):
    P = random_cloud(rng, 500)
    A = select_anchors(P, 8, "fps")
    for s, sigma in enumerate((0.001, 0.002, 0.004)):
        Q = add_gaussian_noise(P, sigma, s)
        bound = np.linalg.norm(Q.points - P.points, axis=1).max()
        assert np.abs(encode(Q, A).values - encode(P, A).values).max() <= bound + 1e-12


def test_removal(rng):
    P = random_cloud(rng, 2048)
    assert len(remove_points(P, 0.5, 1)) == 1024
    assert remove_points(P, 0.0, 1).points.shape == P.points.shape
    kept, removed = removal_split(2048, 0.25, 4)
    assert len(removed) == 512
    assert np.intersect1d(kept, removed).size == 0
    assert np.array_equal(np.union1d(kept, removed), np.arange(2048))
    k2, _ = removal_split(2048, 0.25, 4)
    assert np.array_equal(kept, k2)


def test_removal_errors():
    with pytest.raises(ValueError):
        removal_split(10, 1.0, 0)
    with pytest.raises(TooFewRemaining):
        removal_split(0, 0.5, 0)


# --- equivariance report ------------------------------------------------------------------

SMALL = CompletionConfig(n_in=128, m_out=256)


def test_equivariance_report_generic(rng):
    reps = equivariance_report(random_cloud(rng, 300), SMALL, trials=3, seed=1)
    assert len(reps) == 9
    for r in reps:
        assert r.flags == ()
        if r.metric == "equivariance_max_dev":
            assert r.value < 1e-6
        if r.metric == "anchor_index_agreement":
            assert r.value == 1.0


def test_equivariance_report_zero_trials(rng):
    assert equivariance_report(random_cloud(rng, 50), SMALL, trials=0) == []


def test_equivariance_report_flags_symmetric_cloud():
    g = np.arange(5, dtype=float)
    lattice = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3) / 4
    reps = equivariance_report(PointCloud(lattice), CompletionConfig(n_in=125, m_out=125),
                               trials=2, seed=0)
    assert reps and all("margin violated" in r.flags for r in reps)


def test_encode_deviation(rng):
    P = random_cloud(rng, 200)
    A = select_anchors(P, 8, "fps")
    for s in range(5):
        assert encode_deviation(P, A, random_rigid(s, translation_scale=2.0)) < 1e-12


# --- report output ------------------------------------------------------------------------

def test_eval_report_validation():
    with pytest.raises(ValueError):
        EvalReport("cd_l1", float("nan"), "x1000")
    with pytest.raises(ValueError):
        EvalReport("cd_l1", 1.0, "")


def test_reports_kv_and_csv():
    reps = [EvalReport("cd_l1", 1.5, "mean euclidean x1000", {}, 3, 0),
            EvalReport("cd_l1", 2.5, "mean euclidean x1000", {}, 3, 1, ("margin violated",))]
    assert reps[1].to_kv() == ("metric=cd_l1 value=2.5 convention=mean euclidean x1000 "
                               "seed=3 trial=1 flags=margin violated")
    rows = list(csv.reader(io.StringIO(reports_to_csv(reps))))
    assert rows[0] == ["trial", "metric", "value", "convention", "seed", "flags"]
    assert rows[2] == ["1", "cd_l1", "2.5", "mean euclidean x1000", "3", "margin violated"]


def test_rotation_helper_used_by_eval():
    R = rotation_from_euler(90, 0, 0, degrees=True).rotation
    np.testing.assert_allclose(R @ [0, 1, 0], [0, 0, 1], atol=1e-15)
