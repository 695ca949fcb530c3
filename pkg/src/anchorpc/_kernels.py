"""Numeric inner loops, each in a numba and a pure-numpy flavour.

Both flavours implement the same algorithm step for step; public modules call
the dispatchers at the bottom, which consult :mod:`anchorpc._backend` on every
call so the backend can be switched at runtime.
"""

import numpy as np

from . import _backend
from ._backend import njit

# LM row status codes
CONVERGED = 0
MAX_ITERS = 1
DIVERGED = 2

# damping ceiling; beyond this no descent direction exists at double precision
_LAMBDA_MAX = 1e32


# ---------------------------------------------------------------------------
# farthest point sampling
# ---------------------------------------------------------------------------

@njit(cache=True)
def _fps_numba(points, centroid, k):
    n = points.shape[0]
    idx = np.empty(k, dtype=np.int64)
    gaps = np.full(k, np.inf)
    mind = np.empty(n)
    selected = np.zeros(n, dtype=np.bool_)

    best = -1
    bestv = -1.0
    second = -1.0
    for i in range(n):
        dx = points[i, 0] - centroid[0]
        dy = points[i, 1] - centroid[1]
        dz = points[i, 2] - centroid[2]
        v = dx * dx + dy * dy + dz * dz
        if v > bestv:
            second = bestv
            bestv = v
            best = i
        elif v > second:
            second = v
    idx[0] = best
    if second >= 0.0:
        gaps[0] = np.sqrt(bestv) - np.sqrt(second)
    selected[best] = True

    for i in range(n):
        dx = points[i, 0] - points[best, 0]
        dy = points[i, 1] - points[best, 1]
        dz = points[i, 2] - points[best, 2]
        mind[i] = dx * dx + dy * dy + dz * dz

    for s in range(1, k):
        best = -1
        bestv = -1.0
        second = -1.0
        for i in range(n):
            if selected[i]:
                continue
            v = mind[i]
            if v > bestv:
                second = bestv
                bestv = v
                best = i
            elif v > second:
                second = v
        idx[s] = best
        if second >= 0.0:
            gaps[s] = np.sqrt(bestv) - np.sqrt(second)
        selected[best] = True
        for i in range(n):
            dx = points[i, 0] - points[best, 0]
            dy = points[i, 1] - points[best, 1]
            dz = points[i, 2] - points[best, 2]
            v = dx * dx + dy * dy + dz * dz
            if v < mind[i]:
                mind[i] = v
    return idx, gaps


def _top2_gap(values):
    # values already masked with -inf for excluded entries
    best = int(np.argmax(values))
    rest = np.delete(values, best)
    rest = rest[np.isfinite(rest)]
    if rest.size == 0:
        return best, np.inf
    return best, np.sqrt(values[best]) - np.sqrt(rest.max())


def _fps_numpy(points, centroid, k):
    n = points.shape[0]
    idx = np.empty(k, dtype=np.int64)
    gaps = np.full(k, np.inf)
    d0 = ((points - centroid) ** 2).sum(axis=1)
    idx[0], gaps[0] = _top2_gap(d0)
    selected = np.zeros(n, dtype=bool)
    selected[idx[0]] = True
    mind = ((points - points[idx[0]]) ** 2).sum(axis=1)
    for s in range(1, k):
        masked = np.where(selected, -np.inf, mind)
        idx[s], gaps[s] = _top2_gap(masked)
        selected[idx[s]] = True
        np.minimum(mind, ((points - points[idx[s]]) ** 2).sum(axis=1), out=mind)
    return idx, gaps


# ---------------------------------------------------------------------------
# Levenberg-Marquardt multilateration
# ---------------------------------------------------------------------------

@njit(cache=True)
def _residual_jacobian(p, anchors, row, guard, r, J):
    cost = 0.0
    for j in range(anchors.shape[0]):
        dx = p[0] - anchors[j, 0]
        dy = p[1] - anchors[j, 1]
        dz = p[2] - anchors[j, 2]
        dist = np.sqrt(dx * dx + dy * dy + dz * dz)
        r[j] = dist - row[j]
        denom = dist if dist > guard else guard
        J[j, 0] = dx / denom
        J[j, 1] = dy / denom
        J[j, 2] = dz / denom
        cost += r[j] * r[j]
    return cost


@njit(cache=True)
def _lm_step(J, r, lam, delta):
    # solve (J^T J + lam I) delta = -J^T r by Cholesky; returns False if not SPD
    H = np.zeros((3, 3))
    g = np.zeros(3)
    for j in range(J.shape[0]):
        for a in range(3):
            g[a] += J[j, a] * r[j]
            for b in range(3):
                H[a, b] += J[j, a] * J[j, b]
    for a in range(3):
        H[a, a] += lam
    L = np.zeros((3, 3))
    for a in range(3):
        for b in range(a + 1):
            s = H[a, b]
            for c in range(b):
                s -= L[a, c] * L[b, c]
            if a == b:
                if s <= 0.0:
                    return False
                L[a, a] = np.sqrt(s)
            else:
                L[a, b] = s / L[b, b]
    y = np.zeros(3)
    for a in range(3):
        s = -g[a]
        for c in range(a):
            s -= L[a, c] * y[c]
        y[a] = s / L[a, a]
    for a in range(2, -1, -1):
        s = y[a]
        for c in range(a + 1, 3):
            s -= L[c, a] * delta[c]
        delta[a] = s / L[a, a]
    return True


@njit(cache=True, nogil=True)
def _lm_rows_numba(anchors, rows, init, max_iters, tol, lam0, scale, guard,
                   out_points, out_cost, out_status, out_iters, start, stop):
    k = anchors.shape[0]
    r = np.empty(k)
    J = np.empty((k, 3))
    r_new = np.empty(k)
    J_new = np.empty((k, 3))
    p = np.empty(3)
    p_new = np.empty(3)
    delta = np.empty(3)
    for i in range(start, stop):
        row = rows[i]
        for a in range(3):
            p[a] = init[i, a]
        cost = _residual_jacobian(p, anchors, row, guard, r, J)
        lam = lam0
        status = MAX_ITERS
        it = 0
        if not np.isfinite(cost):
            status = DIVERGED
        elif cost == 0.0:
            status = CONVERGED
        while status == MAX_ITERS and it < max_iters:
            it += 1
            if not _lm_step(J, r, lam, delta):
                status = DIVERGED
                break
            finite = True
            for a in range(3):
                p_new[a] = p[a] + delta[a]
                if not np.isfinite(p_new[a]):
                    finite = False
            if not finite:
                status = DIVERGED
                break
            cost_new = _residual_jacobian(p_new, anchors, row, guard, r_new, J_new)
            if cost_new < cost:
                improvement = np.sqrt(cost) - np.sqrt(cost_new)
                for a in range(3):
                    p[a] = p_new[a]
                for j in range(k):
                    r[j] = r_new[j]
                    for a in range(3):
                        J[j, a] = J_new[j, a]
                cost = cost_new
                lam = lam / scale
                if improvement < tol or cost == 0.0:
                    status = CONVERGED
            else:
                lam = lam * scale
                if lam > _LAMBDA_MAX:
                    status = CONVERGED
        for a in range(3):
            out_points[i, a] = p[a]
        out_cost[i] = cost
        out_status[i] = status
        out_iters[i] = it


def _residual_jacobian_numpy(p, anchors, rows, guard):
    diff = p[:, None, :] - anchors[None, :, :]
    dist = np.sqrt(diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1]
                   + diff[..., 2] * diff[..., 2])
    r = dist - rows
    J = diff / np.maximum(dist, guard)[..., None]
    return r, J, (r * r).sum(axis=1)


def _lm_rows_numpy(*args):
    # overflow on absurd rows is expected and reported as DIVERGED
    with np.errstate(over="ignore", invalid="ignore"):
        _lm_rows_numpy_impl(*args)


def _lm_rows_numpy_impl(anchors, rows, init, max_iters, tol, lam0, scale, guard,
                        out_points, out_cost, out_status, out_iters, start, stop):
    sl = slice(start, stop)
    rows = rows[sl]
    m = rows.shape[0]
    p = init[sl].copy()
    r, J, cost = _residual_jacobian_numpy(p, anchors, rows, guard)
    lam = np.full(m, float(lam0))
    status = np.full(m, MAX_ITERS, dtype=np.int64)
    iters = np.zeros(m, dtype=np.int64)
    status[~np.isfinite(cost)] = DIVERGED
    status[cost == 0.0] = CONVERGED
    eye = np.eye(3)
    for _ in range(max_iters):
        act = np.flatnonzero(status == MAX_ITERS)
        if act.size == 0:
            break
        iters[act] += 1
        Ja, ra = J[act], r[act]
        H = np.einsum("mji,mjk->mik", Ja, Ja) + lam[act, None, None] * eye
        g = np.einsum("mji,mj->mi", Ja, ra)
        delta = np.linalg.solve(H, -g[..., None])[..., 0]
        p_new = p[act] + delta
        bad = ~np.isfinite(p_new).all(axis=1)
        status[act[bad]] = DIVERGED
        ok = ~bad
        act, p_new = act[ok], p_new[ok]
        r_new, J_new, cost_new = _residual_jacobian_numpy(p_new, anchors, rows[act], guard)
        acc = cost_new < cost[act]
        a_idx = act[acc]
        improvement = np.sqrt(cost[a_idx]) - np.sqrt(cost_new[acc])
        p[a_idx] = p_new[acc]
        r[a_idx] = r_new[acc]
        J[a_idx] = J_new[acc]
        cost[a_idx] = cost_new[acc]
        lam[a_idx] = lam[a_idx] / scale
        status[a_idx[(improvement < tol) | (cost_new[acc] == 0.0)]] = CONVERGED
        rej = act[~acc]
        lam[rej] = lam[rej] * scale
        status[rej[lam[rej] > _LAMBDA_MAX]] = CONVERGED
    out_points[sl] = p
    out_cost[sl] = cost
    out_status[sl] = status
    out_iters[sl] = iters


# ---------------------------------------------------------------------------
# distance-matrix Chamfer (one direction)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _min_l1_numba(D1, D2):
    n1, k = D1.shape
    n2 = D2.shape[0]
    out = np.empty(n1)
    for i in range(n1):
        best = np.inf
        for j in range(n2):
            s = 0.0
            for c in range(k):
                s += abs(D1[i, c] - D2[j, c])
                if s >= best:
                    break
            if s < best:
                best = s
        out[i] = best
    return out


def _min_l1_numpy(D1, D2, chunk=256):
    out = np.empty(D1.shape[0])
    for s in range(0, D1.shape[0], chunk):
        block = np.abs(D1[s:s + chunk, None, :] - D2[None, :, :]).sum(axis=2)
        out[s:s + chunk] = block.min(axis=1)
    return out


# ---------------------------------------------------------------------------
# dispatchers
# ---------------------------------------------------------------------------

def fps(points, centroid, k):
    """Return ``(indices, gaps)``; gaps[s] is the margin of the s-th argmax."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    centroid = np.ascontiguousarray(centroid, dtype=np.float64)
    if _backend.use_numba():
        return _fps_numba(points, centroid, int(k))
    return _fps_numpy(points, centroid, int(k))


def lm_rows(anchors, rows, init, max_iters, tol, lam0, scale, guard,
            out_points, out_cost, out_status, out_iters, start, stop):
    """Solve rows ``start:stop`` in place into the preallocated output slots."""
    fn = _lm_rows_numba if _backend.use_numba() else _lm_rows_numpy
    fn(anchors, rows, init, int(max_iters), float(tol), float(lam0), float(scale),
       float(guard), out_points, out_cost, out_status, out_iters, int(start), int(stop))


def min_l1(D1, D2):
    """For each row of ``D1`` the smallest L1 distance to any row of ``D2``."""
    D1 = np.ascontiguousarray(D1, dtype=np.float64)
    D2 = np.ascontiguousarray(D2, dtype=np.float64)
    if _backend.use_numba():
        return _min_l1_numba(D1, D2)
    return _min_l1_numpy(D1, D2)
