"""Geodesic distances on k-NN graphs and decoder-induced Riemannian diagnostics."""

from __future__ import annotations

import csv
import heapq
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ContractViolation

log = logging.getLogger(__name__)

UNREACHABLE = math.inf


@dataclass
class NeighborGraph:
    """Undirected weighted k-NN graph.

    ``neighbors[i]`` is a list of ``(j, weight)`` sorted by ``j``.
    """

    points: np.ndarray
    k: int
    neighbors: list

    @property
    def n_nodes(self) -> int:
        return len(self.neighbors)

    def edges(self):
        """Each undirected edge once as ``(i, j, weight)`` with ``i < j``."""
        for i, nbrs in enumerate(self.neighbors):
            for j, w in nbrs:
                if i < j:
                    yield i, j, w

    def degree(self) -> np.ndarray:
        return np.array([len(n) for n in self.neighbors])

    def to_sparse(self):
        from scipy.sparse import csr_matrix

        rows, cols, vals = [], [], []
        for i, nbrs in enumerate(self.neighbors):
            for j, w in nbrs:
                rows.append(i)
                cols.append(j)
                vals.append(w)
        # csgraph treats explicit zeros as missing edges
        vals = np.maximum(np.asarray(vals, dtype=np.float64), 1e-300)
        return csr_matrix((vals, (rows, cols)), shape=(self.n_nodes, self.n_nodes))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["i", "j", "weight"])
            for i, j, w in self.edges():
                wr.writerow([i, j, repr(float(w))])


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    b = a if b is None else b
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def build_knn_graph(points, k: int = 8) -> NeighborGraph:
    """k nearest neighbours per point, symmetrized by union.

    Ties go to the lower index.  Edge weights are the exact Euclidean
    distances between the stored points.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    pts = pts.reshape(len(pts), -1)
    n = len(pts)
    if k < 1:
        raise ContractViolation(f"k must be at least 1, got {k}")
    if n < k + 1:
        raise ContractViolation(f"need at least k+1={k + 1} points, got {n}")
    d2 = pairwise_sq_dists(pts)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    adj = [dict() for _ in range(n)]
    for i in range(n):
        for j in order[i]:
            j = int(j)
            w = float(np.linalg.norm(pts[i] - pts[j]))
            adj[i][j] = w
            adj[j][i] = w
    neighbors = [sorted(a.items()) for a in adj]
    return NeighborGraph(pts, k, neighbors)


def geodesic_distance(graph: NeighborGraph, i: int, j: int) -> float:
    """Shortest-path length from ``i`` to ``j``; :data:`UNREACHABLE` if disconnected."""
    n = graph.n_nodes
    if not (0 <= i < n and 0 <= j < n):
        raise ContractViolation(f"node index out of range: ({i}, {j}) for {n} nodes")
    if i == j:
        return 0.0
    dist = {i: 0.0}
    done = set()
    heap = [(0.0, i)]
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        if u == j:
            return d
        done.add(u)
        for v, w in graph.neighbors[u]:
            nd = d + w
            if nd < dist.get(v, math.inf):
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return UNREACHABLE


class GeodesicTable:
    """Graph geodesic distances between dataset rows, computed lazily per source.

    Pairs with no connecting path fall back to ``fallback_factor`` times the
    Euclidean distance (logged once per table).
    """

    def __init__(self, points, k: int = 8, fallback_factor: float = 1.5):
        self.points = np.asarray(points, dtype=np.float64).reshape(len(points), -1)
        self.graph = build_knn_graph(self.points, k)
        self.fallback_factor = fallback_factor
        self._csr = self.graph.to_sparse()
        self._rows: dict[int, np.ndarray] = {}
        self.n_fallback = 0

    def rows(self, sources) -> np.ndarray:
        from scipy.sparse.csgraph import dijkstra

        sources = [int(s) for s in sources]
        missing = sorted({s for s in sources if s not in self._rows})
        if missing:
            dist = dijkstra(self._csr, directed=False, indices=missing)
            for s, row in zip(missing, np.atleast_2d(dist)):
                row = row.copy()
                row[s] = 0.0
                bad = ~np.isfinite(row)
                if bad.any():
                    eu = np.sqrt(((self.points[bad] - self.points[s]) ** 2).sum(1))
                    row[bad] = self.fallback_factor * eu
                    if self.n_fallback == 0:
                        log.warning("k-NN graph is disconnected; using %.2fx Euclidean fallback",
                                    self.fallback_factor)
                    self.n_fallback += int(bad.sum())
                self._rows[s] = row
        return np.stack([self._rows[s] for s in sources])

    def pairs(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=int)
        return self.rows(idx)[:, idx]


# -- Riemannian diagnostics --------------------------------------------------

@dataclass
class MetricTensor:
    matrix: np.ndarray
    z: np.ndarray


def jacobi_eigvalsh(m: np.ndarray, tol: float = 1e-14, max_sweeps: int = 60) -> np.ndarray:
    """Eigenvalues of symmetric matrices (..., n, n) by cyclic Jacobi rotations.

    Returned in ascending order along the last axis.
    """
    a = np.array(m, dtype=np.float64)
    single = a.ndim == 2
    if single:
        a = a[None]
    a = a.reshape(-1, a.shape[-2], a.shape[-1]).copy()
    n = a.shape[-1]
    scale = np.abs(a).reshape(len(a), -1).max(axis=1) + 1e-300
    for _ in range(max_sweeps):
        off = np.sqrt((np.triu(a, 1) ** 2).sum(axis=(1, 2)))
        if np.all(off <= tol * scale):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[:, p, q]
                act = np.abs(apq) > 1e-300
                if not act.any():
                    continue
                app = a[:, p, p]
                aqq = a[:, q, q]
                tau = np.where(act, (aqq - app) / np.where(act, 2.0 * apq, 1.0), 0.0)
                t = np.where(act, np.sign(tau + (tau == 0)) / (np.abs(tau) + np.hypot(1.0, tau)), 0.0)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                ap = a[:, :, p].copy()
                aq = a[:, :, q].copy()
                a[:, :, p] = c[:, None] * ap - s[:, None] * aq
                a[:, :, q] = s[:, None] * ap + c[:, None] * aq
                rp = a[:, p, :].copy()
                rq = a[:, q, :].copy()
                a[:, p, :] = c[:, None] * rp - s[:, None] * rq
                a[:, q, :] = s[:, None] * rp + c[:, None] * rq
    ev = np.sort(np.diagonal(a, axis1=1, axis2=2), axis=1)
    shape = np.shape(m)[:-2] + (n,)
    return ev[0] if single else ev.reshape(shape)


def decoder_jacobian(decoder, z) -> np.ndarray:
    """Numeric Jacobian (…, N, J) of ``decoder`` at ``z`` (J,) or (B, J)."""
    z = np.asarray(z, dtype=np.float64)
    with dc.no_grad():
        if z.ndim == 1:
            # decoders act on row batches
            return dc.jacobian(decoder, z[None]).data[0]
        return dc.jacobian(decoder, z).data


def pullback_metric(decoder, z) -> MetricTensor:
    """M = J^T J for the decoder Jacobian J at ``z``."""
    jac = decoder_jacobian(decoder, z)
    m = np.swapaxes(jac, -1, -2) @ jac
    m = 0.5 * (m + np.swapaxes(m, -1, -2))
    return MetricTensor(m, np.asarray(z, dtype=np.float64))


def singular_values(jac) -> np.ndarray:
    """Singular values of (…, N, J) matrices, ascending, via Jacobi on J^T J."""
    jac = np.asarray(jac, dtype=np.float64)
    m = np.swapaxes(jac, -1, -2) @ jac
    return np.sqrt(np.maximum(jacobi_eigvalsh(0.5 * (m + np.swapaxes(m, -1, -2))), 0.0))


def condition_number(x) -> np.ndarray | float:
    """Largest over smallest singular value of a Jacobian (…, N, J).

    A :class:`MetricTensor` is accepted too (its eigenvalues are squared
    singular values).  Rank-deficient inputs give ``inf``.
    """
    if isinstance(x, MetricTensor):
        ev = np.maximum(jacobi_eigvalsh(x.matrix), 0.0)
        sv = np.sqrt(ev)
    else:
        sv = singular_values(x)
    lo, hi = sv[..., 0], sv[..., -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(lo > hi * 1e-12, hi / np.where(lo > 0, lo, 1.0), np.inf)
    return float(out) if np.ndim(out) == 0 else out


def magnification_factor(jac) -> np.ndarray | float:
    """sqrt(det(J^T J)); zero flags a degenerate (rank-deficient) point."""
    sv = singular_values(jac)
    out = np.prod(sv, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def normalize_mf(mf) -> np.ndarray:
    mf = np.asarray(mf, dtype=np.float64)
    mean = mf.mean()
    if mean <= 0:
        raise ContractViolation("all magnification factors are degenerate")
    return mf / mean


def curve_energy(decoder, zs) -> float:
    """Discrete energy sum_i w_i v_i^T M(z_i) v_i of a sampled latent curve.

    ``zs`` holds z_0..z_n at s_i = i/n.  Velocities are central differences
    inside and one-sided at the ends; w_i are trapezoid weights.
    """
    zs = np.asarray(zs, dtype=np.float64)
    n = len(zs) - 1
    if n < 2:
        raise ContractViolation(f"curve_energy needs at least 3 samples, got {n + 1}")
    ds = 1.0 / n
    vel = np.empty_like(zs)
    vel[1:-1] = (zs[2:] - zs[:-2]) / (2 * ds)
    vel[0] = (zs[1] - zs[0]) / ds
    vel[-1] = (zs[-1] - zs[-2]) / ds
    with dc.no_grad():
        _, jv = dc.jvp(decoder, zs, vel)
    sq = (jv.data.reshape(len(zs), -1) ** 2).sum(1)
    w = np.full(len(zs), ds)
    w[0] = w[-1] = ds / 2
    return float((w * sq).sum())
