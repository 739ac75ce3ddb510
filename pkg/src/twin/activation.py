"""Anisotropic Eikonal activation times on tetrahedral meshes.

Solves ``sqrt(grad(t)^T V grad(t)) = 1`` with a fast iterative method: an
active list of nodes is swept with per-tet local solves (Fermat's principle
over the opposite face, its edges and its vertices) until no node improves
by more than ``tol``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .geometry import FiberField, TetMesh

# fibre / sheet / normal speeds from the monodomain calibration targets
DEFAULT_CV = (0.065, 0.044, 0.048)


class ActivationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConductionVelocities:
    """Orthotropic conduction speeds in cm/ms."""

    v_f: float = DEFAULT_CV[0]
    v_s: float = DEFAULT_CV[1]
    v_n: float = DEFAULT_CV[2]

    def __post_init__(self):
        if min(self.v_f, self.v_s, self.v_n) <= 0:
            raise ValueError("conduction velocities must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.v_f, self.v_s, self.v_n])

    @classmethod
    def isotropic(cls, v: float) -> "ConductionVelocities":
        return cls(v, v, v)


@dataclass(frozen=True)
class RootNodeSet:
    nodes: tuple
    times: tuple

    def __post_init__(self):
        if len(self.nodes) == 0:
            raise ValueError("root node set is empty")
        if len(self.nodes) != len(self.times):
            raise ValueError("root nodes and times differ in length")
        if min(self.times) < 0:
            raise ValueError("root activation times must be >= 0")

    @classmethod
    def at_zero(cls, nodes) -> "RootNodeSet":
        nodes = tuple(int(n) for n in np.atleast_1d(nodes))
        return cls(nodes, tuple(0.0 for _ in nodes))


def inverse_metric(fibres: FiberField, cv: ConductionVelocities) -> np.ndarray:
    """Per-tet ``V^-1`` so that travel time along ``p`` is ``sqrt(p^T V^-1 p)``."""
    fr = fibres.frames()  # (M, 3, 3), rows f, s, n
    w = 1.0 / cv.as_array() ** 2
    return np.einsum("mki,k,mkj->mij", fr, w, fr)


@numba.njit(cache=True)
def _qform(m, a, b):
    acc = 0.0
    for i in range(3):
        for j in range(3):
            acc += a[i] * m[i, j] * b[j]
    return acc


@numba.njit(cache=True)
def _edge_solve(x, xa, xb, ta, tb, m):
    # min over y on segment [xb, xa] of T(y) + |x - y|_M
    d = x - xb
    a = xa - xb
    q = _qform(m, a, a)
    r = _qform(m, a, d)
    c = _qform(m, d, d)
    delta = ta - tb
    best = np.inf
    if delta * delta < q:
        num = c - r * r / q
        if num < 0.0:
            num = 0.0
        s = np.sqrt(num / (1.0 - delta * delta / q))
        mu = (r - delta * s) / q
        if 0.0 < mu < 1.0:
            best = tb + mu * delta + s
    return best


@numba.njit(cache=True)
def _face_solve(x, x1, x2, x3, t1, t2, t3, m):
    # stationary point of T(y) + |x - y|_M over the plane of (x1, x2, x3)
    a = x1 - x3
    b = x2 - x3
    d = x - x3
    q11 = _qform(m, a, a)
    q12 = _qform(m, a, b)
    q22 = _qform(m, b, b)
    det = q11 * q22 - q12 * q12
    if det <= 1e-300:
        return np.inf
    i11 = q22 / det
    i12 = -q12 / det
    i22 = q11 / det
    r1 = _qform(m, a, d)
    r2 = _qform(m, b, d)
    c = _qform(m, d, d)
    d1 = t1 - t3
    d2 = t2 - t3
    denom = 1.0 - (d1 * (i11 * d1 + i12 * d2) + d2 * (i12 * d1 + i22 * d2))
    if denom <= 1e-14:
        return np.inf
    num = c - (r1 * (i11 * r1 + i12 * r2) + r2 * (i12 * r1 + i22 * r2))
    if num < 0.0:
        num = 0.0
    s = np.sqrt(num / denom)
    g1 = r1 - d1 * s
    g2 = r2 - d2 * s
    l1 = i11 * g1 + i12 * g2
    l2 = i12 * g1 + i22 * g2
    if l1 < 0.0 or l2 < 0.0 or l1 + l2 > 1.0:
        return np.inf
    return t3 + l1 * d1 + l2 * d2 + s


@numba.njit(cache=True)
def _local_update(i, nodes, tets, minv, nt_ptr, nt_idx, t):
    best = np.inf
    x = nodes[i]
    others = np.empty(3, dtype=np.int64)
    for k in range(nt_ptr[i], nt_ptr[i + 1]):
        e = nt_idx[k]
        c = 0
        for v in range(4):
            if tets[e, v] != i:
                others[c] = tets[e, v]
                c += 1
        m = minv[e]
        for v in range(3):
            tv = t[others[v]]
            if tv < np.inf:
                dv = x - nodes[others[v]]
                cand = tv + np.sqrt(_qform(m, dv, dv))
                if cand < best:
                    best = cand
        for u in range(3):
            for w in range(u + 1, 3):
                ta = t[others[u]]
                tb = t[others[w]]
                if ta < np.inf and tb < np.inf:
                    cand = _edge_solve(x, nodes[others[u]], nodes[others[w]], ta, tb, m)
                    if cand < best:
                        best = cand
        t1 = t[others[0]]
        t2 = t[others[1]]
        t3 = t[others[2]]
        if t1 < np.inf and t2 < np.inf and t3 < np.inf:
            cand = _face_solve(
                x, nodes[others[0]], nodes[others[1]], nodes[others[2]], t1, t2, t3, m
            )
            if cand < best:
                best = cand
    return best


@numba.njit(cache=True)
def _seed_sources(nodes, minv, nt_ptr, nt_idx, adj_ptr, adj_idx, root_idx, root_t, hops, t, fixed):
    # straight-line metric times within `hops` edges of each root; upper
    # bounds only, the sweeps may still lower them
    n = nodes.shape[0]
    stamp = np.full(n, -1, dtype=np.int64)
    frontier = np.empty(n, dtype=np.int64)
    nxt = np.empty(n, dtype=np.int64)
    seeded = np.empty(n, dtype=np.int64)
    n_seeded = 0
    for k in range(root_idx.shape[0]):
        r = root_idx[k]
        stamp[r] = k
        frontier[0] = r
        n_front = 1
        for _ in range(hops):
            n_nxt = 0
            for a in range(n_front):
                i = frontier[a]
                for q in range(adj_ptr[i], adj_ptr[i + 1]):
                    j = adj_idx[q]
                    if stamp[j] == k:
                        continue
                    stamp[j] = k
                    nxt[n_nxt] = j
                    n_nxt += 1
                    p = nodes[j] - nodes[r]
                    worst = 0.0
                    for z in range(nt_ptr[r], nt_ptr[r + 1]):
                        v = _qform(minv[nt_idx[z]], p, p)
                        if v > worst:
                            worst = v
                    for z in range(nt_ptr[j], nt_ptr[j + 1]):
                        v = _qform(minv[nt_idx[z]], p, p)
                        if v > worst:
                            worst = v
                    cand = root_t[k] + np.sqrt(worst)
                    if cand < t[j] and not fixed[j]:
                        if t[j] == np.inf:
                            seeded[n_seeded] = j
                            n_seeded += 1
                        t[j] = cand
            frontier[:n_nxt] = nxt[:n_nxt]
            n_front = n_nxt
    return seeded[:n_seeded]


@numba.njit(cache=True)
def _fim(nodes, tets, minv, nt_ptr, nt_idx, adj_ptr, adj_idx, root_idx, root_t, tol, hops):
    n = nodes.shape[0]
    t = np.full(n, np.inf)
    fixed = np.zeros(n, dtype=np.bool_)
    for k in range(root_idx.shape[0]):
        r = root_idx[k]
        if root_t[k] < t[r]:
            t[r] = root_t[k]
        fixed[r] = True
    seeded = _seed_sources(
        nodes, minv, nt_ptr, nt_idx, adj_ptr, adj_idx, root_idx, root_t, hops, t, fixed
    )
    mark = np.zeros(n, dtype=np.bool_)
    active = np.empty(n, dtype=np.int64)
    n_active = 0
    for k in range(seeded.shape[0]):
        i = seeded[k]
        if not fixed[i] and not mark[i]:
            mark[i] = True
            active[n_active] = i
            n_active += 1
    sources = np.concatenate((root_idx, seeded))
    for k in range(sources.shape[0]):
        r = sources[k]
        for q in range(adj_ptr[r], adj_ptr[r + 1]):
            nb = adj_idx[q]
            if not fixed[nb] and not mark[nb]:
                mark[nb] = True
                active[n_active] = nb
                n_active += 1
    sweeps = 0
    nxt = np.empty(n, dtype=np.int64)
    while n_active > 0:
        sweeps += 1
        cur = np.sort(active[:n_active])
        for k in range(cur.shape[0]):
            mark[cur[k]] = False
        n_next = 0
        for k in range(cur.shape[0]):
            i = cur[k]
            new = _local_update(i, nodes, tets, minv, nt_ptr, nt_idx, t)
            if new < t[i]:
                improved = t[i] - new > tol
                t[i] = new
                if improved:
                    for q in range(adj_ptr[i], adj_ptr[i + 1]):
                        nb = adj_idx[q]
                        if not fixed[nb] and not mark[nb]:
                            mark[nb] = True
                            nxt[n_next] = nb
                            n_next += 1
        active[:n_next] = nxt[:n_next]
        n_active = n_next
    return t, sweeps


def _solve_front(mesh: TetMesh, minv, nodes, times, tol: float, source_hops: int) -> np.ndarray:
    """One FIM run with every listed node seeded at once (an extended front)."""
    nt_ptr, nt_idx = mesh.node_tets()
    t, _ = _fim(
        mesh.nodes,
        mesh.tets,
        minv,
        nt_ptr,
        nt_idx,
        mesh.adj_ptr,
        mesh.adj_idx,
        np.asarray(nodes, dtype=np.int64),
        np.asarray(times, dtype=np.float64),
        float(tol),
        int(source_hops),
    )
    return t


def _check_reached(t: np.ndarray) -> np.ndarray:
    unreachable = np.flatnonzero(~np.isfinite(t))
    if len(unreachable):
        shown = ", ".join(str(i) for i in unreachable[:20])
        more = "" if len(unreachable) <= 20 else f" (+{len(unreachable) - 20} more)"
        raise ActivationError(f"nodes unreachable from the roots: {shown}{more}")
    return t


def solve_eikonal(
    mesh: TetMesh,
    fibres: FiberField,
    cv: ConductionVelocities,
    roots: RootNodeSet,
    tol: float = 1e-6,
    source_hops: int = 3,
) -> np.ndarray:
    """Activation time (ms) per node for the given roots and conduction speeds.

    Nodes within ``source_hops`` edges of a root start from the straight-line
    travel time under the slowest nearby metric, which removes the point-source
    error of first-order local solves; ``source_hops=0`` disables this.
    """
    root_idx = np.asarray(roots.nodes, dtype=np.int64)
    if root_idx.min() < 0 or root_idx.max() >= mesh.n_nodes:
        raise ActivationError("root node index out of range")
    root_t = np.asarray(roots.times, dtype=np.float64)
    minv = inverse_metric(fibres, cv)
    # Each root is its own point source and the fronts are combined by
    # pointwise min: a face update mixing two colliding fronts undershoots both.
    uniq, inv = np.unique(root_idx, return_inverse=True)
    first_t = np.full(len(uniq), np.inf)
    np.minimum.at(first_t, inv, root_t)
    t = None
    for node, t0 in zip(uniq, first_t):
        tc = _solve_front(mesh, minv, [node], [t0], tol, source_hops)
        t = tc if t is None else np.minimum(t, tc)
    return _check_reached(t)


def anisotropy_check(nx: int = 21, spacing: float = 0.05, cv: ConductionVelocities | None = None) -> dict:
    """Measure plane-wave speeds on a fibre-aligned slab.

    Waves are launched from the x=0, y=0 and z=0 faces in turn (fibres along
    +x, sheets along +y, normals along +z).  Speeds come from least-squares
    slopes of arrival time against distance over the central half of the slab.
    Returns the three speeds plus ``ratio`` = v_x / v_y, the fibre-to-sheet
    speed ratio.
    """
    from .geometry import generate_slab

    cv = cv or ConductionVelocities()
    mesh, fibres, _ = generate_slab(nx, nx, nx, spacing, fibre_angle=0.0)
    minv = inverse_metric(fibres, cv)
    length = (nx - 1) * spacing
    speeds = []
    for axis in range(3):
        face = np.flatnonzero(np.isclose(mesh.nodes[:, axis], 0.0))
        # a whole face is one extended front, not a set of point roots
        t = _check_reached(_solve_front(mesh, minv, face, np.zeros(len(face)), 1e-6, 3))
        pos = mesh.nodes[:, axis]
        others = np.delete(mesh.nodes, axis, axis=1)
        centre = np.all(np.abs(others - length / 2) <= length / 4 + 1e-12, axis=1)
        sel = centre & (pos >= length / 4 - 1e-12) & (pos <= 3 * length / 4 + 1e-12)
        slope = np.polyfit(pos[sel], t[sel], 1)[0]
        speeds.append(1.0 / slope)
    return {"v_x": speeds[0], "v_y": speeds[1], "v_z": speeds[2], "ratio": speeds[0] / speeds[1]}


def default_roots(mesh: TetMesh, coords) -> RootNodeSet:
    """Endocardial roots at t=0 standing in for Purkinje-informed sites.

    Picks the LV septal, anterior, posterior and lateral mid-wall sites plus an
    RV free-wall site, each as the surface node nearest a target coordinate.
    """
    if not mesh.surfaces.get("lv_endo", np.empty(0)).size:
        return RootNodeSet.at_zero([0])
    c = coords.as_array()
    targets = {
        "lv_endo": [(0.4, 0.55, 0.5), (0.5, 0.35, 0.8), (0.5, 0.35, 0.2), (0.35, 0.1, 0.5)],
        "rv_endo": [(0.45, 0.9, 0.5)],
    }
    picks = []
    for surface, points in targets.items():
        idx = mesh.surfaces.get(surface, np.empty(0, dtype=np.int64))
        if idx.size == 0:
            continue
        for ab, tv, pa in points:
            d = (c[idx, 0] - ab) ** 2 + (c[idx, 2] - tv) ** 2 + (c[idx, 3] - pa) ** 2
            picks.append(int(idx[np.argmin(d)]))
    return RootNodeSet.at_zero(sorted(set(picks)))
