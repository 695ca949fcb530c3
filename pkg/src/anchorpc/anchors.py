"""Anchor selection: deterministic FPS plus curvature refinement."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels
from .cloud import KnnIndex, PointCloud, estimate_normals
from .errors import KTooLarge, ParseError

STRATEGIES = ("fps", "cluster", "ball_query")
DEFAULT_K = 8
DEFAULT_RADIUS = 0.075
DEFAULT_THRESHOLD = 0.0
DEFAULT_KNN = 16


def normalize_strategy(name):
    key = name.lower().replace("-", "_")
    if key == "ballquery":
        key = "ball_query"
    if key == "clustering":
        key = "cluster"
    if key not in STRATEGIES:
        raise ValueError(f"unknown anchor strategy {name!r}")
    return key


@dataclass(frozen=True, eq=False)
class AnchorSet:
    """k anchor coordinates and where they came from.

    ``source_indices`` is ``None`` for anchors read back from a file or an
    ESCD container, where the originating cloud is unknown. ``margin`` is the
    smallest decision gap met during selection (see :func:`select_anchors`).
    """

    anchors: np.ndarray
    source_indices: np.ndarray | None = None
    strategy: str = "fps"
    params: dict = field(default_factory=dict)
    seeds: np.ndarray | None = None
    margin: float = math.inf

    def __post_init__(self):
        a = np.array(self.anchors, dtype=np.float64).reshape(-1, 3)
        if a.shape[0] < 1:
            raise ValueError("an anchor set needs at least one anchor")
        if not np.all(np.isfinite(a)):
            raise ValueError("anchor coordinates must be finite")
        a.setflags(write=False)
        object.__setattr__(self, "anchors", a)
        if self.source_indices is not None:
            idx = np.array(self.source_indices, dtype=np.int64).reshape(-1)
            if idx.shape[0] != a.shape[0]:
                raise ValueError("source_indices must have one entry per anchor")
            if np.unique(idx).size != idx.size:
                raise ValueError("source_indices must be distinct")
            idx.setflags(write=False)
            object.__setattr__(self, "source_indices", idx)

    @property
    def k(self):
        return self.anchors.shape[0]

    def header(self):
        r = self.params.get("radius", "none")
        t = self.params.get("threshold", "none")
        return f"# strategy={self.strategy} k={self.k} radius={r} threshold={t}"


@dataclass(frozen=True, eq=False)
class CurvatureField:
    kappa: np.ndarray
    laplacian: np.ndarray


def deterministic_fps(cloud: PointCloud, k: int, return_gaps=False):
    """Farthest point sampling started from the point farthest from the centroid.

    Every argmax breaks ties toward the lower point index.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = pts.shape[0]
    if n < 1:
        raise ValueError("empty cloud")
    if k < 1:
        raise ValueError("k must be positive")
    if k > n:
        raise KTooLarge(f"k={k} exceeds cloud size {n}")
    idx, gaps = _kernels.fps(pts, pts.mean(axis=0), k)
    return (idx, gaps) if return_gaps else idx


def _neighbors(cloud, k_nn, labels=None):
    if labels is None:
        return KnnIndex(cloud).query_all(k_nn)
    # cluster-restricted neighborhoods: brute force inside each label
    labels = np.asarray(labels)
    n = len(cloud)
    out = np.empty((n, k_nn), dtype=np.int64)
    for lab in np.unique(labels):
        members = np.flatnonzero(labels == lab)
        if members.size < k_nn + 1:
            raise KTooLarge(f"cluster {lab} has {members.size} points; k_nn={k_nn} needs {k_nn + 1}")
        P = cloud.points[members]
        d2 = ((P[:, None, :] - P[None, :, :]) ** 2).sum(axis=2)
        np.fill_diagonal(d2, np.inf)
        order = np.lexsort((np.broadcast_to(members, d2.shape), d2), axis=1)
        out[members] = members[order[:, :k_nn]]
    return out


def normal_laplacian(cloud: PointCloud, k_nn=DEFAULT_KNN, labels=None):
    """n_i minus the mean normal of its ``k_nn`` neighbors (self excluded)."""
    if cloud.normals is None:
        raise ValueError("normal_laplacian requires normals")
    nbrs = _neighbors(cloud, k_nn, labels)
    return cloud.normals - cloud.normals[nbrs].mean(axis=1)


def curvature(cloud: PointCloud, k_nn=DEFAULT_KNN, labels=None) -> CurvatureField:
    """Smallest eigenvalue of the covariance of neighboring normals, per point."""
    if cloud.normals is None:
        raise ValueError("curvature requires normals")
    if k_nn < 3:
        raise ValueError("curvature needs k_nn >= 3")
    nbrs = _neighbors(cloud, k_nn, labels)
    N = cloud.normals[nbrs]
    mean = N.mean(axis=1)
    centered = N - mean[:, None, :]
    C = np.einsum("nki,nkj->nij", centered, centered) / k_nn
    kappa = np.maximum(np.linalg.eigvalsh(C)[:, 0], 0.0)
    laplacian = cloud.normals - mean
    return CurvatureField(kappa, laplacian)


def _assign(points, seeds):
    """Nearest-seed label per point (ties to the earlier seed) and the assignment gap."""
    d = np.sqrt(((points[:, None, :] - points[seeds][None, :, :]) ** 2).sum(axis=2))
    labels = np.argmin(d, axis=1)
    if len(seeds) > 1:
        part = np.partition(d, 1, axis=1)
        gap = float(np.min(part[:, 1] - part[:, 0]))
    else:
        gap = math.inf
    return labels, d, gap


def _elect(members, kappa):
    """Max-kappa member (ties -> lowest index) and its margin over the runner-up."""
    vals = kappa[members]
    order = np.lexsort((members, -vals))
    best = members[order[0]]
    gap = float(vals[order[0]] - vals[order[1]]) if members.size > 1 else math.inf
    return int(best), gap


def select_anchors(cloud: PointCloud, k=DEFAULT_K, strategy="ball_query", *,
                   radius=DEFAULT_RADIUS, threshold=DEFAULT_THRESHOLD, k_nn=DEFAULT_KNN,
                   neighborhood="global") -> AnchorSet:
    """Pick ``k`` anchors from ``cloud``.

    ``fps`` returns deterministic FPS directly. ``cluster`` splits the cloud
    into nearest-seed clusters around the FPS seeds and swaps each seed for
    the cluster's max-curvature point when that curvature exceeds
    ``threshold``. ``ball_query`` only considers cluster members within
    ``radius`` of the seed and always takes the max-curvature one.

    Normals are estimated with ``k_nn`` neighbors when the cloud has none.
    ``neighborhood="cluster"`` restricts curvature neighborhoods to the
    point's own cluster.

    The returned ``margin`` is the smallest gap among all discrete decisions
    (FPS argmaxes, kNN boundaries, cluster assignment, ball boundary,
    curvature argmax and threshold). A margin above round-off guarantees the
    selection is reproduced exactly under rigid motion.
    """
    strategy = normalize_strategy(strategy)
    n = len(cloud)
    if k > n:
        raise KTooLarge(f"k={k} exceeds cloud size {n}")
    seeds, gaps = deterministic_fps(cloud, k, return_gaps=True)
    margin = float(np.min(gaps))
    if strategy == "fps":
        return AnchorSet(cloud.points[seeds], seeds, "fps", {}, seeds, margin)

    labels, dist, assign_gap = _assign(cloud.points, seeds)
    margin = min(margin, assign_gap)
    if cloud.normals is None:
        cloud = estimate_normals(cloud, k_nn)
    if neighborhood == "global":
        kfield = curvature(cloud, k_nn)
        dd, _ = cKDTree(cloud.points).query(cloud.points, k=min(k_nn + 2, n))
        if dd.shape[1] == k_nn + 2:
            margin = min(margin, float(np.min(dd[:, -1] - dd[:, -2])))
    elif neighborhood == "cluster":
        kfield = curvature(cloud, k_nn, labels=labels)
    else:
        raise ValueError(f"unknown neighborhood mode {neighborhood!r}")
    kappa = kfield.kappa

    chosen = []
    for c, seed in enumerate(seeds):
        members = np.flatnonzero(labels == c)
        if strategy == "ball_query":
            dm = dist[members, c]
            inside = members[dm <= radius]
            edge = np.abs(dm - radius)
            margin = min(margin, float(edge.min()) if edge.size else math.inf)
            best, gap = _elect(inside, kappa)
            margin = min(margin, gap)
            chosen.append(best)
        else:
            best, gap = _elect(members, kappa)
            if math.isfinite(threshold):
                margin = min(margin, gap, abs(float(kappa[best]) - threshold))
            chosen.append(best if kappa[best] > threshold else int(seed))

    # duplicate elections: later cluster keeps its seed
    used = set()
    final = []
    for c, idx in enumerate(chosen):
        if idx in used:
            idx = int(seeds[c])
        used.add(idx)
        final.append(idx)
    final = np.array(final, dtype=np.int64)
    params = {"radius": radius} if strategy == "ball_query" else {"threshold": threshold}
    params["k_nn"] = k_nn
    return AnchorSet(cloud.points[final], final, strategy, params, seeds, margin)


def save_anchors(anchor_set: AnchorSet, path):
    with open(path, "w", newline="\n") as fh:
        fh.write(anchor_set.header() + "\n")
        if anchor_set.source_indices is not None:
            fh.write("# source_indices=" + ",".join(str(int(i)) for i in anchor_set.source_indices) + "\n")
        for x, y, z in anchor_set.anchors:
            fh.write(f"{x:.17g} {y:.17g} {z:.17g}\n")


def _parse_value(v):
    if v == "none":
        return None
    try:
        return float(v)
    except ValueError:
        return v


def load_anchors(path) -> AnchorSet:
    """Read anchors written by :func:`save_anchors` (or any plain XYZ file)."""
    strategy = "external"
    params = {}
    indices = None
    rows = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    key, _, val = tok.partition("=")
                    if key == "strategy":
                        strategy = val
                    elif key == "source_indices":
                        indices = [int(v) for v in val.split(",") if v]
                    elif key in ("radius", "threshold"):
                        val = _parse_value(val)
                        if val is not None:
                            params[key] = val
                continue
            fields = line.split()
            if len(fields) < 3:
                raise ParseError(lineno, "expected 3 values")
            try:
                rows.append([float(v) for v in fields[:3]])
            except ValueError:
                raise ParseError(lineno, "non-numeric") from None
    if not rows:
        raise ParseError(0, "no anchors in file")
    return AnchorSet(np.array(rows), indices, strategy, params)
