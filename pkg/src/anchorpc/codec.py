"""Distance-matrix encoding, its Chamfer metric, and multilateration decoding."""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .anchors import AnchorSet
from .cloud import PointCloud
from .errors import (
    ColsMismatch,
    DegenerateAnchors,
    FormatError,
    SolverDiverged,
    TooFewAnchors,
)

MAGIC = b"ESCD"
VERSION = 1
_HEADER = struct.Struct("<4sIII")

GENERAL_POSITION_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    """n×k point-to-anchor distances together with the anchors defining them."""

    values: np.ndarray
    anchors: AnchorSet

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2:
            v = v.reshape(-1, self.anchors.k)
        if v.shape[1] != self.anchors.k:
            raise ValueError(f"matrix has {v.shape[1]} columns but {self.anchors.k} anchors")
        if not np.all(np.isfinite(v)):
            raise ValueError("distances must be finite")
        if np.any(v < 0):
            raise ValueError("distances must be nonnegative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def cols(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class SolverOptions:
    max_iters: int = 100
    residual_tol: float = 1e-10
    damping_init: float = 1e-3
    damping_scale: float = 10.0
    singular_guard: float = 1e-12

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.residual_tol > 0:
            raise ValueError("residual_tol must be > 0")
        if not self.damping_init > 0:
            raise ValueError("damping_init must be > 0")
        if not self.damping_scale > 1:
            raise ValueError("damping_scale must be > 1")
        if not self.singular_guard > 0:
            raise ValueError("singular_guard must be > 0")


def _anchor_coords(anchors):
    return anchors.anchors if isinstance(anchors, AnchorSet) else np.asarray(anchors, dtype=np.float64)


def encode(cloud: PointCloud, anchors: AnchorSet) -> DistanceMatrix:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    A = _anchor_coords(anchors)
    if not isinstance(anchors, AnchorSet):
        anchors = AnchorSet(A, strategy="external")
    diff = pts[:, None, :] - A[None, :, :]
    return DistanceMatrix(np.sqrt((diff * diff).sum(axis=2)), anchors)


def _values(D):
    return D.values if isinstance(D, DistanceMatrix) else np.asarray(D, dtype=np.float64)


def dmcd(D1, D2) -> float:
    """Chamfer distance between the rows of two distance matrices, L1 per row pair."""
    a, b = _values(D1), _values(D2)
    if a.shape[1] != b.shape[1]:
        raise ColsMismatch(f"{a.shape[1]} vs {b.shape[1]} columns")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("dmcd needs nonempty matrices")
    return float(_kernels.min_l1(a, b).mean() + _kernels.min_l1(b, a).mean())


def check_general_position(anchors, tol=GENERAL_POSITION_TOL):
    """Raise unless the anchors span 3D with room to spare.

    The smallest singular value of the anchor differences ``a_j - a_1`` must
    exceed ``tol`` times the anchor-set diameter.
    """
    A = _anchor_coords(anchors)
    k = A.shape[0]
    if k < 4:
        raise TooFewAnchors(f"need at least 4 anchors, got {k}")
    diffs = A[1:] - A[0]
    sv = np.linalg.svd(diffs.T, compute_uv=False)
    diameter = np.sqrt(((A[:, None, :] - A[None, :, :]) ** 2).sum(axis=2).max())
    if diameter == 0 or sv[-1] <= tol * diameter:
        raise DegenerateAnchors(
            f"anchors not in general position (sigma_min={sv[-1]:.3g}, diameter={diameter:.3g})")


@dataclass
class DecodeResult:
    """Decoded cloud plus per-row diagnostics.

    Rows listed in ``failed`` keep their last finite iterate in ``cloud`` so
    the output stays finite; callers decide whether to drop them.
    """

    cloud: PointCloud
    residuals: np.ndarray
    status: np.ndarray
    iterations: np.ndarray
    failed: dict = field(default_factory=dict)

    def __iter__(self):
        # allows ``cloud, residuals = decode(...)``
        return iter((self.cloud, self.residuals))

    @property
    def ok_rows(self):
        return np.flatnonzero(self.status != _kernels.DIVERGED)


def default_workers():
    env = os.environ.get("ESCAPE_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _solve(A, rows, init, opts, workers):
    m = rows.shape[0]
    out_p = np.empty((m, 3))
    out_c = np.empty(m)
    out_s = np.empty(m, dtype=np.int64)
    out_i = np.empty(m, dtype=np.int64)
    args = (A, rows, init, opts.max_iters, opts.residual_tol, opts.damping_init,
            opts.damping_scale, opts.singular_guard, out_p, out_c, out_s, out_i)
    workers = max(1, min(int(workers), m))
    if workers == 1:
        _kernels.lm_rows(*args, 0, m)
    else:
        # contiguous chunks written into preassigned slots; rows never interact
        bounds = np.linspace(0, m, workers + 1).astype(int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_kernels.lm_rows, *args, int(lo), int(hi))
                       for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
            for f in futures:
                f.result()
    return out_p, out_c, out_s, out_i


def _prepare(anchors, rows, init):
    A = np.ascontiguousarray(_anchor_coords(anchors), dtype=np.float64)
    check_general_position(A)
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != A.shape[0]:
        raise ValueError(f"rows must have {A.shape[0]} columns")
    if np.any(rows < 0) or not np.all(np.isfinite(rows)):
        raise ValueError("distances must be finite and nonnegative")
    if init is None:
        init = np.broadcast_to(A.mean(axis=0), (rows.shape[0], 3))
    init = np.ascontiguousarray(np.broadcast_to(init, (rows.shape[0], 3)), dtype=np.float64)
    return A, rows, init


def decode_point(row, anchors, opts: SolverOptions | None = None, init=None):
    """Point whose distances to ``anchors`` best match ``row`` in least squares.

    Levenberg-Marquardt on ``sum_j (|p - a_j| - d_j)^2`` started from the
    anchor centroid unless ``init`` is given. Returns ``(point, objective)``.
    """
    opts = opts or SolverOptions()
    A, rows, init = _prepare(anchors, np.atleast_2d(row), init)
    p, c, s, _ = _solve(A, rows, init, opts, 1)
    if s[0] == _kernels.DIVERGED:
        raise SolverDiverged("non-finite iterate")
    return p[0], float(c[0])


def decode(D: DistanceMatrix, opts: SolverOptions | None = None, workers=None,
           init=None, anchors=None) -> DecodeResult:
    """Decode every row independently.

    ``anchors`` overrides ``D.anchors`` (same distances, different pose).
    Output order equals row order and does not depend on ``workers``.
    """
    opts = opts or SolverOptions()
    anchors = D.anchors if anchors is None else anchors
    A, rows, init = _prepare(anchors, D.values, init)
    p, c, s, it = _solve(A, rows, init, opts, default_workers() if workers is None else workers)
    failed = {int(i): "diverged" for i in np.flatnonzero(s == _kernels.DIVERGED)}
    residuals = np.where(s == _kernels.DIVERGED, np.inf, c)
    return DecodeResult(PointCloud(p), residuals, s, it, failed)


# ---------------------------------------------------------------------------
# ESCD container
# ---------------------------------------------------------------------------

def to_bytes(D: DistanceMatrix) -> bytes:
    head = _HEADER.pack(MAGIC, VERSION, D.rows, D.cols)
    return (head + np.ascontiguousarray(D.anchors.anchors, dtype="<f8").tobytes()
            + np.ascontiguousarray(D.values, dtype="<f8").tobytes())


def from_bytes(buf: bytes) -> DistanceMatrix:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated ESCD header", offset=len(buf))
    magic, version, n, k = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError("bad ESCD magic", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported ESCD version {version}", offset=4)
    off = _HEADER.size
    need = off + 8 * (3 * k + n * k)
    if len(buf) < need:
        raise FormatError(f"truncated ESCD payload: expected {need} bytes, got {len(buf)}",
                          offset=len(buf))
    if len(buf) > need:
        raise FormatError("trailing bytes after ESCD payload", offset=need)
    anchors = np.frombuffer(buf, "<f8", 3 * k, off).reshape(k, 3)
    values = np.frombuffer(buf, "<f8", n * k, off + 24 * k).reshape(n, k)
    try:
        return DistanceMatrix(values, AnchorSet(anchors, strategy="external"))
    except ValueError as exc:
        raise FormatError(f"invalid ESCD content: {exc}", offset=off) from None


def write_escd(D: DistanceMatrix, path):
    with open(path, "wb") as fh:
        fh.write(to_bytes(D))


def read_escd(path) -> DistanceMatrix:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def write_escd_csv(D: DistanceMatrix, path):
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# escd v{VERSION} n={D.rows} k={D.cols}\n")
        for a in D.anchors.anchors:
            fh.write("A," + ",".join(f"{v:.17g}" for v in a) + "\n")
        for row in D.values:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def read_escd_csv(path) -> DistanceMatrix:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("# escd"):
        raise FormatError("missing '# escd' header line", offset=0)
    meta = dict(tok.split("=", 1) for tok in lines[0][1:].split() if "=" in tok)
    try:
        n, k = int(meta["n"]), int(meta["k"])
    except (KeyError, ValueError):
        raise FormatError("header lacks n= and k=", offset=0) from None

    def fields(line):
        return [f for f in line.replace(",", " ").split() if f]

    body = lines[1:]
    if len(body) < k + n:
        raise FormatError(f"expected {k} anchor and {n} distance lines, got {len(body)}")
    anchors, values = [], []
    for ln in body[:k]:
        f = fields(ln)
        if f[0] != "A" or len(f) != 4:
            raise FormatError(f"bad anchor line {ln!r}")
        anchors.append([float(v) for v in f[1:]])
    for ln in body[k:k + n]:
        f = fields(ln)
        if len(f) != k:
            raise FormatError(f"distance row has {len(f)} values, expected {k}")
        values.append([float(v) for v in f])
    return DistanceMatrix(np.array(values).reshape(n, k), AnchorSet(np.array(anchors), strategy="external"))


def save_matrix(D, path):
    """ESCD binary unless the path ends in ``.csv``."""
    (write_escd_csv if str(path).lower().endswith(".csv") else write_escd)(D, path)


def load_matrix(path) -> DistanceMatrix:
    return (read_escd_csv if str(path).lower().endswith(".csv") else read_escd)(path)
