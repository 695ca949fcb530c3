"""Acceptance criteria, each run at its stated size and tolerance.

A summary line per criterion is printed at the end of the pytest run.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from anchorpc.anchors import AnchorSet, deterministic_fps, select_anchors
from anchorpc.cloud import PointCloud, apply_rigid, random_rigid
from anchorpc.codec import (
    DistanceMatrix,
    decode,
    decode_point,
    dmcd,
    encode,
    from_bytes,
    read_escd,
    to_bytes,
    write_escd,
)
from anchorpc.completion import CompletionConfig, PredictorSpec, complete
from anchorpc.errors import TooFewAnchors
from anchorpc.evaluation import add_gaussian_noise, chamfer_l1, encode_deviation, remove_points

pytestmark = pytest.mark.acceptance

FIXTURES = Path(__file__).parent / "fixtures"
MARGIN_TOL = 1e-9


def ellipsoid_surface(rng, n, radii=(0.5, 0.35, 0.2)):
    v = rng.normal(size=(n, 3))
    return PointCloud(v / np.linalg.norm(v, axis=1, keepdims=True) * radii)


def generic_cloud(rng, n):
    # alternate volumetric and surface samples
    if rng.integers(2):
        return PointCloud(rng.uniform(-0.5, 0.5, size=(n, 3)))
    return ellipsoid_surface(rng, n)


def brute_fps(P, k):
    c = P.mean(axis=0)
    chosen = [int(np.argmax(np.linalg.norm(P - c, axis=1)))]
    while len(chosen) < k:
        d = np.stack([np.linalg.norm(P - P[j], axis=1) for j in chosen]).min(axis=0)
        d[chosen] = -1.0
        chosen.append(int(np.argmax(d)))
    return chosen


def grid_oracle(A, d, lo, hi, n=41, rounds=12):
    center = (lo + hi) / 2
    half = np.max(hi - lo) / 2
    for _ in range(rounds):
        ax = np.linspace(-half, half, n)
        G = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3) + center
        f = ((np.linalg.norm(G[:, None] - A[None], axis=2) - d) ** 2).sum(axis=1)
        center, half = G[np.argmin(f)], half * 4 / (n - 1)
    return center


def test_1_roundtrip(acceptance):
    t0 = time.perf_counter()
    worst = 0.0
    for s in range(100):
        P = PointCloud(np.random.default_rng(s).uniform(size=(256, 3)))
        A = select_anchors(P, 8, "fps")
        Q = decode(encode(P, A)).cloud
        worst = max(worst, float(np.linalg.norm(Q.points - P.points, axis=1).max()))
    elapsed = time.perf_counter() - t0
    acceptance["detail"] = f"max_err={worst:.3g} runtime={elapsed:.2f}s"
    assert worst < 1e-7
    assert elapsed < 30


def test_2_uniqueness(acceptance):
    # Regular tetrahedra with mild jitter, randomly posed; consistent rows are
    # generated from points inside the anchor hull.
    rng = np.random.default_rng(2024)
    base = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float) * 0.5
    worst = 0.0
    for row in range(50):
        T = random_rigid(rng.integers(2**63), translation_scale=1.0)
        A = T.apply_points(base + rng.normal(0, 0.05, base.shape))
        x = rng.dirichlet(np.ones(4)) @ A
        d = np.linalg.norm(A - x, axis=1)
        starts = rng.uniform(A.min(axis=0), A.max(axis=0), size=(64, 3))
        D = DistanceMatrix(np.tile(d, (64, 1)), AnchorSet(A))
        res = decode(D, init=starts, workers=1)
        worst = max(worst, float(np.linalg.norm(res.cloud.points - x, axis=1).max()))
    rejected = False
    try:
        decode_point(d[:3], A[:3])
    except TooFewAnchors:
        rejected = True
    acceptance["detail"] = f"max_spread={worst:.3g} k3_rejected={rejected}"
    assert worst < 1e-6
    assert rejected


def test_3_error_bound(acceptance):
    rng = np.random.default_rng(3)
    violations = 0
    worst_ratio = 0.0
    sigmas = (0.001, 0.002, 0.004)
    for t in range(1000):
        P = PointCloud(rng.uniform(size=(128, 3)))
        A = select_anchors(P, 8, "fps")
        Q = add_gaussian_noise(P, sigmas[t % 3], rng.integers(2**63))
        bound = np.linalg.norm(Q.points - P.points, axis=1).max()
        dD = np.abs(encode(Q, A).values - encode(P, A).values).max()
        violations += dD > bound + 1e-12
        worst_ratio = max(worst_ratio, dD / bound)
    acceptance["detail"] = f"violations={violations} max_ratio={worst_ratio:.4f}"
    assert violations == 0


def test_4_encoding_invariance(acceptance):
    rng = np.random.default_rng(4)
    worst = 0.0
    for t in range(100):
        P = PointCloud(rng.uniform(size=(256, 3)))
        A = select_anchors(P, 8, "fps")
        T = random_rigid(rng.integers(2**63), translation_scale=2.0)
        worst = max(worst, encode_deviation(P, A, T))
    acceptance["detail"] = f"max_rel_dev={worst:.3g}"
    assert worst <= 1e-12


def test_5_end_to_end_equivariance(acceptance):
    rng = np.random.default_rng(5)
    cfg = CompletionConfig()
    passed, skipped, worst = 0, 0, 0.0
    while passed < 50:
        P = generic_cloud(rng, 3000)
        T = random_rigid(rng.integers(2**63), translation_scale=1.0)
        a, ra = complete(P, cfg)
        b, rb = complete(apply_rigid(P, T), cfg)
        if min(ra.anchors.margin, rb.anchors.margin) <= MARGIN_TOL:
            skipped += 1
            assert skipped < 50, "too many clouds fail the margin check"
            continue
        passed += 1
        assert len(a) == 16384
        worst = max(worst, float(np.linalg.norm(apply_rigid(a, T).points - b.points, axis=1).max()))
    acceptance["detail"] = f"max_dev={worst:.3g} clouds={passed} margin_skipped={skipped}"
    assert worst < 1e-6


def test_6_strategy_conformance(acceptance):
    rng = np.random.default_rng(6)
    worst_dist, fps_equal = 0.0, True
    for t in range(50):
        P = generic_cloud(rng, 1024)
        bq = select_anchors(P, 8, "ball_query")
        assert bq.params["radius"] == 0.075
        worst_dist = max(worst_dist, float(np.linalg.norm(bq.anchors - P.points[bq.seeds], axis=1).max()))
        cl = select_anchors(P, 8, "cluster", threshold=np.inf)
        fps_equal &= bool(np.array_equal(cl.source_indices, deterministic_fps(P, 8)))
        fps_equal &= bool(np.array_equal(cl.anchors, P.points[deterministic_fps(P, 8)]))
    acceptance["detail"] = f"max_anchor_seed_dist={worst_dist:.4f} cluster_inf_is_fps={fps_equal}"
    assert worst_dist <= 0.075
    assert fps_equal


def test_7_oracle_equivalence(acceptance):
    rng = np.random.default_rng(7)
    fps_ok = 0
    for t in range(50):
        n = int(rng.integers(20, 201))
        P = rng.uniform(size=(n, 3))
        k = int(rng.integers(1, min(n, 32) + 1))
        fps_ok += list(deterministic_fps(PointCloud(P), k)) == brute_fps(P, k)
    worst = 0.0
    for t in range(20):
        A = rng.uniform(size=(8, 3))
        x = rng.uniform(0.2, 0.8, 3)
        d = np.abs(np.linalg.norm(A - x, axis=1) + rng.uniform(-0.05, 0.1, 8))
        q, _ = decode_point(d, A)
        g = grid_oracle(A, d, A.min(axis=0) - 0.5, A.max(axis=0) + 0.5)
        worst = max(worst, float(np.linalg.norm(q - g)))
    acceptance["detail"] = f"fps_match={fps_ok}/50 decode_vs_grid_max={worst:.3g}"
    assert fps_ok == 50
    assert worst < 1e-4


def test_8_metric_sanity(acceptance):
    rng = np.random.default_rng(8)
    A = PointCloud(rng.uniform(size=(100, 3)))
    self_cd = chamfer_l1(A, A)
    hand = chamfer_l1(PointCloud([[0, 0, 0]]), PointCloud([[1, 0, 0]]))
    dm = dmcd(np.array([[0.0, 1.0]]), np.array([[1.0, 2.0]]))
    acceptance["detail"] = f"cd_self={self_cd} cd_hand={hand} dmcd_hand={dm}"
    assert self_cd == 0.0
    assert hand == 2000.0
    assert dm == 4.0


def test_9_robustness_protocol(acceptance):
    sigmas = (0.0, 0.001, 0.002, 0.004)
    trials, monotone, crashes = 20, 0, []
    cfg = CompletionConfig()
    for t in range(trials):
        rng = np.random.default_rng(900 + t)
        P = ellipsoid_surface(rng, 2048)
        base, _ = complete(P, cfg, seed=t)
        cds = [chamfer_l1(complete(add_gaussian_noise(P, s, 1000 * t + i), cfg, seed=t)[0], base)
               for i, s in enumerate(sigmas)]
        monotone += all(a < b for a, b in zip(cds, cds[1:]))
        for ratio in (0.1, 0.25, 0.5):
            try:
                out, _ = complete(remove_points(P, ratio, t), cfg, seed=t)
                assert len(out) == cfg.m_out
            except Exception as exc:  # noqa: BLE001 - any failure counts as a crash
                crashes.append((t, ratio, repr(exc)))
    frac = monotone / trials
    acceptance["detail"] = f"monotone={monotone}/{trials} removal_crashes={len(crashes)}"
    assert frac >= 0.9
    assert crashes == []


def test_10_escd_format(tmp_path, acceptance):
    rng = np.random.default_rng(10)
    P = PointCloud(rng.uniform(size=(300, 3)))
    D = encode(P, select_anchors(P, 8, "fps"))
    path = tmp_path / "d.escd"
    write_escd(D, path)
    raw = path.read_bytes()
    back = read_escd(path)
    bitwise = (to_bytes(back) == raw and back.values.tobytes() == D.values.tobytes()
               and from_bytes(raw).anchors.anchors.tobytes() == D.anchors.anchors.tobytes())
    cfg = CompletionConfig(n_in=256, m_out=1024)
    a, _ = complete(P, cfg)
    echo = CompletionConfig(n_in=256, m_out=1024,
                            predictor=PredictorSpec("external", str(FIXTURES / "echo_predictor.py")))
    b, _ = complete(P, echo)
    same = a.points.tobytes() == b.points.tobytes()
    acceptance["detail"] = f"bitwise_roundtrip={bitwise} echo_equals_identity={same}"
    assert bitwise
    assert same
