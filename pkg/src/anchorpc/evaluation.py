"""Metrics, perturbations and equivariance checks.

Metric conventions: ``chamfer_l1`` averages Euclidean nearest-neighbor
distances in both directions and sums the two means ("CD-L1" as used by the
PCN benchmark); ``chamfer_l2`` and ``fidelity`` use squared distances. All
three are reported multiplied by 1000.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud, RigidTransform, apply_rigid, random_rigid
from .codec import encode
from .completion import CompletionConfig, complete
from .errors import DegenerateConfiguration, EmptyCloud, TooFewRemaining

SCALE = 1000.0
MARGIN_TOL = 1e-9


@dataclass
class EvalReport:
    metric: str
    value: float
    convention: str
    config: dict = field(default_factory=dict)
    seed: object = None
    trial: int | None = None
    flags: tuple = ()

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"{self.metric}: value must be finite")
        if not self.convention:
            raise ValueError("convention string is required")

    def to_kv(self):
        parts = [f"metric={self.metric}", f"value={self.value:.17g}", f"convention={self.convention}"]
        if self.seed is not None:
            parts.append(f"seed={self.seed}")
        if self.trial is not None:
            parts.append(f"trial={self.trial}")
        if self.flags:
            parts.append("flags=" + ",".join(self.flags))
        return " ".join(parts)


def _pts(c):
    pts = c.points if isinstance(c, PointCloud) else np.asarray(c, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise EmptyCloud("metric needs nonempty clouds")
    return pts


def _nn_dist(src, dst):
    d, _ = cKDTree(dst).query(src, k=1)
    return d


def chamfer_l1(A, B) -> float:
    a, b = _pts(A), _pts(B)
    return SCALE * float(_nn_dist(a, b).mean() + _nn_dist(b, a).mean())


def chamfer_l2(A, B) -> float:
    a, b = _pts(A), _pts(B)
    return SCALE * float((_nn_dist(a, b) ** 2).mean() + (_nn_dist(b, a) ** 2).mean())


def fidelity(input_cloud, output_cloud) -> float:
    """Mean squared distance from each input point to the output (×1000); one-directional."""
    a, b = _pts(input_cloud), _pts(output_cloud)
    return SCALE * float((_nn_dist(a, b) ** 2).mean())


def aggregate(values, how="mean"):
    values = np.asarray(values, dtype=np.float64)
    if how == "mean":
        return float(values.mean())
    if how == "median":
        return float(np.median(values))
    raise ValueError(f"unknown aggregation {how!r}")


class Canonical(NamedTuple):
    cloud: PointCloud
    transform: RigidTransform
    stable: bool


def pca_canonicalize(cloud: PointCloud, gap_tol=1e-6) -> Canonical:
    """Center and rotate so principal axes (descending variance) map to x, y, z.

    Each axis is signed so the coordinate skewness along it is nonnegative;
    a reflection is fixed by flipping the last axis. ``stable`` is False when
    two eigenvalues are closer than ``gap_tol`` (relative), in which case the
    axes are not well defined.
    """
    pts = cloud.points
    if len(cloud) < 3:
        raise DegenerateConfiguration("need at least 3 points")
    c = pts.mean(axis=0)
    X = pts - c
    cov = X.T @ X / len(cloud)
    w, v = np.linalg.eigh(cov)
    w, v = w[::-1], v[:, ::-1]
    if w[0] <= 1e-300 or w[1] <= 1e-12 * w[0]:
        raise DegenerateConfiguration("points are coincident or collinear")
    for a in range(3):
        proj = X @ v[:, a]
        skew = float((proj ** 3).sum())
        scale = float((np.abs(proj) ** 3).sum())
        if abs(skew) <= 1e-12 * scale:
            lead = v[np.argmax(np.abs(v[:, a]) > 1e-12), a]
            if lead < 0:
                v[:, a] *= -1
        elif skew < 0:
            v[:, a] *= -1
    if np.linalg.det(v) < 0:
        v[:, 2] *= -1
    R = v.T
    u, _, vt = np.linalg.svd(R)
    T = RigidTransform(u @ vt, -(u @ vt) @ c)
    gaps = np.array([w[0] - w[1], w[1] - w[2]]) / w[0]
    stable = bool(np.all(gaps > gap_tol))
    return Canonical(apply_rigid(PointCloud(pts), T), T, stable)


def add_gaussian_noise(cloud: PointCloud, sigma: float, seed) -> PointCloud:
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return cloud
    rng = np.random.default_rng(seed)
    return PointCloud(cloud.points + rng.normal(0.0, sigma, size=cloud.points.shape))


def removal_split(n, ratio, seed):
    """``(kept, removed)`` index arrays, both sorted; ``floor(ratio*n)`` removed."""
    if not 0 <= ratio < 1:
        raise ValueError("ratio must lie in [0, 1)")
    n_remove = int(math.floor(ratio * n))
    if n - n_remove < 1:
        raise TooFewRemaining(f"removing {n_remove} of {n} points leaves none")
    rng = np.random.default_rng(seed)
    removed = np.sort(rng.choice(n, size=n_remove, replace=False)) if n_remove else np.zeros(0, np.int64)
    mask = np.ones(n, dtype=bool)
    mask[removed] = False
    return np.flatnonzero(mask), removed


def remove_points(cloud: PointCloud, ratio: float, seed) -> PointCloud:
    kept, _ = removal_split(len(cloud), ratio, seed)
    return cloud.subset(kept)


def equivariance_report(cloud: PointCloud, config: CompletionConfig | None = None,
                        trials=5, seed=0, margin_tol=MARGIN_TOL):
    """Compare ``T·complete(P)`` against ``complete(T·P)`` for random rigid ``T``.

    Three reports per trial: max pointwise deviation, fraction of anchor
    indices that agree, and max deviation of the two encodings. Trials whose
    anchor selection margin is below ``margin_tol`` in either frame carry the
    ``margin violated`` flag and should be left out of pass/fail decisions.
    """
    config = config or CompletionConfig()
    echo = config.echo()
    reports = []
    base, base_rep = complete(cloud, config, seed=seed)
    rng = np.random.default_rng(seed)
    for t in range(trials):
        T = random_rigid(rng.integers(2**63))
        moved, rep = complete(apply_rigid(cloud, T), config, seed=seed)
        expected = apply_rigid(base, T)
        dev = float(np.max(np.linalg.norm(expected.points - moved.points, axis=1)))
        agree = float(np.mean(base_rep.anchors.source_indices == rep.anchors.source_indices))
        enc_dev = float(np.max(np.abs(base_rep.encoded.values - rep.encoded.values)))
        flags = ()
        if min(base_rep.anchors.margin, rep.anchors.margin) <= margin_tol:
            flags = ("margin violated",)
        for name, value, conv in (("equivariance_max_dev", dev, "max euclidean, model units"),
                                  ("anchor_index_agreement", agree, "fraction of k"),
                                  ("encode_max_dev", enc_dev, "max abs, model units")):
            reports.append(EvalReport(name, value, conv, echo, seed, t, flags))
    return reports


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trial", "metric", "value", "convention", "seed", "flags"])
    for r in reports:
        w.writerow([r.trial if r.trial is not None else "", r.metric, repr(r.value),
                    r.convention, r.seed if r.seed is not None else "", ";".join(r.flags)])
    return buf.getvalue()


def encode_deviation(P: PointCloud, anchors, T: RigidTransform):
    """Max entrywise relative deviation between encode(P, A) and encode(T·P, T·A)."""
    D0 = encode(P, anchors).values
    moved = apply_rigid(P, T)
    idx = getattr(anchors, "source_indices", None)
    if idx is not None:
        # anchors picked from the moved cloud, as the pipeline does
        A1 = moved.points[idx]
    else:
        A1 = T.apply_points(anchors.anchors if hasattr(anchors, "anchors") else anchors)
    D1 = encode(moved, A1).values
    denom = np.maximum(np.abs(D0), np.finfo(float).tiny)
    rel = np.abs(D1 - D0) / denom
    rel[(D0 == 0) & (D1 == 0)] = 0.0
    return float(rel.max())
