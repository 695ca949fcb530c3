"""Point clouds, rigid motions, file I/O and neighborhood queries."""

from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateConfiguration,
    DegenerateNeighborhood,
    EmptyCloud,
    KTooLarge,
    ParseError,
)

logger = logging.getLogger(__name__)

UNIT_TOL = 1e-9


def _frozen(a):
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered 3D points with optional unit normals.

    Arrays are copied on construction and made read-only, so a cloud can be
    shared freely between threads.
    """

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = _frozen(self.points).reshape(-1, 3) if np.size(self.points) else np.zeros((0, 3))
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = _frozen(self.normals).reshape(-1, 3) if np.size(self.normals) else np.zeros((0, 3))
            if nrm.shape != pts.shape:
                raise ValueError("normals must match points in cardinality")
            if nrm.size and np.max(np.abs(np.linalg.norm(nrm, axis=1) - 1.0)) > UNIT_TOL:
                raise ValueError("normals must be unit length")
            object.__setattr__(self, "normals", nrm)

    def __len__(self):
        return self.points.shape[0]

    @property
    def centroid(self):
        return self.points.mean(axis=0)

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        normals = None if self.normals is None else self.normals[indices]
        return PointCloud(self.points[indices], normals)

    def with_normals(self, normals):
        return PointCloud(self.points, normals)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _frozen(self.rotation).reshape(3, 3)
        t = _frozen(self.translation).reshape(3)
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-12:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-12:
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def inverse(self):
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def apply_points(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


def apply_rigid(cloud: PointCloud, T: RigidTransform) -> PointCloud:
    pts = T.apply_points(cloud.points)
    normals = None if cloud.normals is None else cloud.normals @ T.rotation.T
    if normals is not None:
        # keep unit length exact to within round-off
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(pts, normals)


def _axis_rotation(axis, angle):
    c, s = np.cos(angle), np.sin(angle)
    if axis == 0:
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == 1:
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _orthonormalize(R):
    # polar projection removes the ~1e-16 drift from the trig products
    u, _, vt = np.linalg.svd(R)
    return u @ vt


def rotation_from_euler(rx, ry, rz, degrees=False):
    """Rotation ``Rz @ Ry @ Rx``: x-axis rotation applied first."""
    angles = np.radians([rx, ry, rz]) if degrees else np.array([rx, ry, rz], dtype=float)
    R = _axis_rotation(2, angles[2]) @ _axis_rotation(1, angles[1]) @ _axis_rotation(0, angles[0])
    return RigidTransform(_orthonormalize(R), np.zeros(3))


def random_rotation(seed) -> RigidTransform:
    """Three axis rotations with angles uniform in [0°, 180°], composed x, y, z."""
    rng = np.random.default_rng(seed)
    rx, ry, rz = rng.uniform(0.0, np.pi, size=3)
    return rotation_from_euler(rx, ry, rz)


def random_rigid(seed, translation_scale=1.0) -> RigidTransform:
    rng = np.random.default_rng(seed)
    R = random_rotation(rng.integers(2**63)).rotation
    return RigidTransform(R, rng.uniform(-translation_scale, translation_scale, size=3))


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def _infer_format(path, fmt):
    if fmt is not None:
        fmt = fmt.lower()
        if fmt not in ("xyz", "ply"):
            raise ValueError(f"unknown cloud format {fmt!r}")
        return fmt
    return "ply" if str(path).lower().endswith(".ply") else "xyz"


def load_cloud(path, format=None) -> PointCloud:
    """Read an XYZ text or PLY (ascii / binary_little_endian) file.

    Raises ``ParseError(line, reason)`` on malformed content and ``EmptyCloud``
    if no points are present. ``OSError`` propagates for missing files.
    """
    fmt = _infer_format(path, format)
    with open(path, "rb") as fh:
        data = fh.read()
    if fmt == "xyz":
        pts, nrm = _parse_xyz(data)
    else:
        pts, nrm = _parse_ply(data)
    if pts.shape[0] == 0:
        raise EmptyCloud(f"{path}: no points")
    if nrm is not None:
        lengths = np.linalg.norm(nrm, axis=1)
        if np.any(lengths == 0):
            raise ParseError(0, "zero-length normal")
        # files carry float32 or 17-digit text; renormalise to the unit invariant
        nrm = nrm / lengths[:, None]
    return PointCloud(pts, nrm)


def _parse_xyz(data):
    rows = []
    width = None
    for lineno, raw in enumerate(data.decode("utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) not in (3, 6):
            raise ParseError(lineno, f"expected 3 or 6 values, got {len(fields)}")
        if width is None:
            width = len(fields)
        elif len(fields) != width:
            raise ParseError(lineno, "inconsistent column count")
        try:
            vals = [float(f) for f in fields]
        except ValueError:
            raise ParseError(lineno, "non-numeric") from None
        if not all(np.isfinite(vals)):
            raise ParseError(lineno, "non-finite")
        rows.append(vals)
    if not rows:
        return np.zeros((0, 3)), None
    arr = np.array(rows, dtype=np.float64)
    return arr[:, :3], (arr[:, 3:6] if width == 6 else None)


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply(data):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ParseError(1, "missing ply header")
    nl = data.find(b"\n", end)
    body = data[nl + 1:] if nl >= 0 else b""
    header_lines = data[:end].decode("ascii", "replace").splitlines()
    fmt = None
    elements = []  # (name, count, [(prop, dtype) | (prop, ("list", cnt_t, item_t))])
    for lineno, line in enumerate(header_lines, start=1):
        tok = line.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
            if fmt not in ("ascii", "binary_little_endian"):
                raise ParseError(lineno, f"unsupported ply format {fmt}")
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise ParseError(lineno, "property before element")
            if tok[1] == "list":
                elements[-1][2].append((tok[4], ("list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]])))
            elif tok[1] in _PLY_TYPES:
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
            else:
                raise ParseError(lineno, f"unknown property type {tok[1]}")
    if fmt is None:
        raise ParseError(1, "missing format line")
    header_len = len(header_lines) + 1
    vertex = None
    if fmt == "ascii":
        lines = body.decode("ascii", "replace").splitlines()
        pos = 0
        for name, count, props in elements:
            chunk = lines[pos:pos + count]
            if len(chunk) < count:
                raise ParseError(header_len + pos + len(chunk) + 1, f"truncated element {name}")
            if name == "vertex":
                cols = [p for p, _ in props]
                rows = []
                for i, ln in enumerate(chunk):
                    try:
                        rows.append([float(v) for v in ln.split()[:len(cols)]])
                    except ValueError:
                        raise ParseError(header_len + pos + i + 1, "non-numeric") from None
                    if len(rows[-1]) != len(cols):
                        raise ParseError(header_len + pos + i + 1, "too few values")
                vertex = {c: np.array([r[j] for r in rows], dtype=np.float64)
                          for j, c in enumerate(cols)}
            pos += count
    else:
        offset = 0
        for name, count, props in elements:
            if any(isinstance(t, tuple) for _, t in props):
                if name == "vertex":
                    raise ParseError(0, "list properties on vertex are not supported")
                # variable-length records: walk them
                for _ in range(count):
                    for _, t in props:
                        if isinstance(t, tuple):
                            cnt_dt = np.dtype("<" + t[1])
                            cnt = int(np.frombuffer(body, cnt_dt, 1, offset)[0])
                            offset += cnt_dt.itemsize + cnt * np.dtype(t[2]).itemsize
                        else:
                            offset += np.dtype(t).itemsize
                continue
            dt = np.dtype([(p, "<" + t) for p, t in props])
            need = dt.itemsize * count
            if offset + need > len(body):
                raise ParseError(0, f"truncated binary element {name}")
            arr = np.frombuffer(body, dt, count, offset)
            if name == "vertex":
                vertex = {p: arr[p].astype(np.float64) for p, _ in props}
            offset += need
    if vertex is None:
        raise ParseError(0, "no vertex element")
    for c in "xyz":
        if c not in vertex:
            raise ParseError(0, f"vertex lacks property {c}")
    pts = np.column_stack([vertex["x"], vertex["y"], vertex["z"]])
    if not np.all(np.isfinite(pts)):
        raise ParseError(0, "non-finite coordinate")
    nrm = None
    if all(c in vertex for c in ("nx", "ny", "nz")):
        nrm = np.column_stack([vertex["nx"], vertex["ny"], vertex["nz"]])
    return pts, nrm


def save_cloud(cloud: PointCloud, path, format=None, binary=False) -> None:
    """Write ``cloud``. XYZ uses 17 significant digits so text round-trips exactly.

    Normals are dropped (with a warning) for XYZ; PLY keeps them. ``OSError``
    is raised for unwritable destinations.
    """
    fmt = _infer_format(path, format)
    if fmt == "xyz":
        if cloud.normals is not None:
            logger.warning("xyz output drops normals for %s", path)
        with open(path, "w", newline="\n") as fh:
            for x, y, z in cloud.points:
                fh.write(f"{x:.17g} {y:.17g} {z:.17g}\n")
        return
    has_n = cloud.normals is not None
    props = ["x", "y", "z"] + (["nx", "ny", "nz"] if has_n else [])
    data = cloud.points if not has_n else np.hstack([cloud.points, cloud.normals])
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(cloud)}"]
    header += [f"property double {p}" for p in props]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())
        else:
            for row in data:
                fh.write((" ".join(f"{v:.17g}" for v in row) + "\n").encode("ascii"))


# ---------------------------------------------------------------------------
# neighborhoods
# ---------------------------------------------------------------------------

class KnnIndex:
    """Exact k-nearest-neighbor index with a deterministic tie rule.

    A kd-tree proposes candidates; the final ordering is by squared Euclidean
    distance, ties broken by ascending point index, which is exactly what a
    brute-force sort produces.
    """

    def __init__(self, cloud_or_points):
        pts = cloud_or_points.points if isinstance(cloud_or_points, PointCloud) else cloud_or_points
        self.points = np.asarray(pts, dtype=np.float64)
        self.points.setflags(write=False)
        self._tree = cKDTree(self.points)

    def __len__(self):
        return self.points.shape[0]

    def _exact_order(self, query, candidates):
        cand = np.asarray(candidates, dtype=np.int64)
        d2 = ((self.points[cand] - query) ** 2).sum(axis=1)
        order = np.lexsort((cand, d2))
        return cand[order], d2[order]

    def query(self, query, k_nn, exclude_self=False):
        """Indices of the ``k_nn`` nearest points, ascending distance then index.

        With ``exclude_self`` the lowest-index point whose coordinates equal
        ``query`` is left out of the result.
        """
        query = np.asarray(query, dtype=np.float64)
        n = len(self)
        need = k_nn + (1 if exclude_self else 0)
        if k_nn < 1:
            raise ValueError("k_nn must be positive")
        if need > n:
            raise KTooLarge(f"k_nn={k_nn} exceeds available points ({n - (need - k_nn)})")
        dist, _ = self._tree.query(query, k=need)
        kth = float(np.atleast_1d(dist)[-1])
        # widen the ball slightly: kd-tree distances can differ from ours in the last ulp
        cand = self._tree.query_ball_point(query, kth * (1 + 1e-12) + 1e-300)
        idx, d2 = self._exact_order(query, cand)
        if exclude_self:
            hit = np.flatnonzero(d2 == 0.0)
            if hit.size:
                idx = np.delete(idx, hit[0])
            else:
                idx = idx[:-1] if idx.size > k_nn else idx
        return idx[:k_nn]

    def query_all(self, k_nn):
        """Neighbors of every indexed point, the point itself excluded. Shape (n, k_nn)."""
        n = len(self)
        if k_nn + 1 > n:
            raise KTooLarge(f"k_nn={k_nn} needs at least {k_nn + 1} points, have {n}")
        dist, _ = self._tree.query(self.points, k=k_nn + 1)
        radii = dist[:, -1] * (1 + 1e-12) + 1e-300
        balls = self._tree.query_ball_point(self.points, radii)
        out = np.empty((n, k_nn), dtype=np.int64)
        for i in range(n):
            cand = np.asarray(balls[i], dtype=np.int64)
            cand = cand[cand != i]
            idx, _ = self._exact_order(self.points[i], cand)
            out[i] = idx[:k_nn]
        return out


def knn(index: KnnIndex, query, k_nn, exclude_self=False):
    return index.query(query, k_nn, exclude_self=exclude_self)


def _sign_normals(normals, points, centroid):
    outward = points - centroid
    dots = np.einsum("ij,ij->i", normals, outward)
    scale = np.linalg.norm(outward, axis=1)
    flip = dots < -1e-12 * scale
    tie = np.abs(dots) <= 1e-12 * scale
    if np.any(tie):
        # first component with non-negligible magnitude must be positive
        first = np.argmax(np.abs(normals[tie]) > 1e-12, axis=1)
        lead = normals[tie][np.arange(first.size), first]
        flip[tie] = lead < 0
    out = normals.copy()
    out[flip] *= -1.0
    return out


def estimate_normals(cloud: PointCloud, k_nn=16) -> PointCloud:
    """Per-point PCA normals oriented away from the cloud centroid.

    The neighborhood is the point plus its ``k_nn`` nearest neighbors; the
    normal is the eigenvector of their coordinate covariance with smallest
    eigenvalue.
    """
    n = len(cloud)
    if n < k_nn + 1:
        raise KTooLarge(f"estimate_normals needs at least {k_nn + 1} points, have {n}")
    nbrs = KnnIndex(cloud).query_all(k_nn)
    hood = np.concatenate([np.arange(n)[:, None], nbrs], axis=1)
    patches = cloud.points[hood]
    centered = patches - patches.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / hood.shape[1]
    w, v = np.linalg.eigh(cov)
    top = w[:, 2]
    bad = (top <= 1e-300) | (w[:, 1] <= 1e-12 * top)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise DegenerateNeighborhood(f"neighborhood of point {i} is coincident or collinear")
    normals = v[:, :, 0]
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return cloud.with_normals(_sign_normals(normals, cloud.points, cloud.centroid))


def kabsch_align(source: PointCloud, target: PointCloud):
    """Least-squares rigid transform mapping ``source`` onto ``target``.

    Correspondence is by index. Returns ``(RigidTransform, rmsd)``.
    """
    S = source.points if isinstance(source, PointCloud) else np.asarray(source, float)
    D = target.points if isinstance(target, PointCloud) else np.asarray(target, float)
    if S.shape != D.shape:
        raise ValueError("source and target must have equal cardinality")
    if S.shape[0] < 3:
        raise DegenerateConfiguration("need at least 3 points")
    cs, cd = S.mean(axis=0), D.mean(axis=0)
    S0, D0 = S - cs, D - cd
    sv = np.linalg.svd(S0, compute_uv=False)
    if sv[0] <= 1e-300 or sv[1] <= 1e-12 * sv[0]:
        raise DegenerateConfiguration("points are coincident or collinear")
    u, _, vt = np.linalg.svd(D0.T @ S0)
    d = np.sign(np.linalg.det(u @ vt))
    R = u @ np.diag([1.0, 1.0, d]) @ vt
    R = _orthonormalize(R)
    t = cd - R @ cs
    resid = D - (S @ R.T + t)
    rmsd = float(np.sqrt((resid ** 2).sum() / S.shape[0]))
    return RigidTransform(R, t), rmsd


def parse_rotation_degrees(text):
    """``"rx,ry,rz"`` in degrees -> RigidTransform."""
    parts = re.split(r"[,\s]+", text.strip())
    if len(parts) != 3:
        raise ValueError(f"rotation needs three comma-separated angles, got {text!r}")
    return rotation_from_euler(*(float(p) for p in parts), degrees=True)


def check_writable(path):
    parent = Path(path).resolve().parent
    if not parent.is_dir() or not os.access(parent, os.W_OK):
        raise OSError(f"cannot write to {path}")
