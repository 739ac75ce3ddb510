"""Tetrahedral geometry: slab and idealised biventricular generators.

Every generator returns a ``(TetMesh, FiberField, VentricularCoords)`` triple.
Lengths are in cm throughout.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

LIMB_NAMES = ("LA", "RA", "LL")
PRECORDIAL_NAMES = ("V1", "V2", "V3", "V4", "V5", "V6")
ELECTRODE_NAMES = LIMB_NAMES + PRECORDIAL_NAMES


class GeometryError(ValueError):
    """Raised for invalid generator input or a malformed mesh."""


def tet_signed_volumes(nodes: np.ndarray, tets: np.ndarray) -> np.ndarray:
    p0 = nodes[tets[:, 0]]
    a = nodes[tets[:, 1]] - p0
    b = nodes[tets[:, 2]] - p0
    c = nodes[tets[:, 3]] - p0
    return np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0


@dataclass(eq=False)
class TetMesh:
    """Tetrahedral mesh with symmetric node adjacency stored in CSR form.

    ``adj_ptr[i]:adj_ptr[i+1]`` indexes the neighbours of node ``i`` in
    ``adj_idx``; ``adj_vec`` holds the edge vector from ``i`` to the
    neighbour and ``adj_len`` its length.
    """

    nodes: np.ndarray
    tets: np.ndarray
    element_volumes: np.ndarray
    adj_ptr: np.ndarray
    adj_idx: np.ndarray
    adj_vec: np.ndarray
    adj_len: np.ndarray
    surfaces: dict = field(default_factory=dict)

    @classmethod
    def from_arrays(cls, nodes, tets, surfaces=None, reorient=True) -> "TetMesh":
        nodes = np.ascontiguousarray(nodes, dtype=np.float64)
        tets = np.ascontiguousarray(tets, dtype=np.int64)
        if nodes.ndim != 2 or nodes.shape[1] != 3 or len(nodes) == 0:
            raise GeometryError("nodes must be a non-empty (N, 3) array")
        if tets.ndim != 2 or tets.shape[1] != 4 or len(tets) == 0:
            raise GeometryError("tets must be a non-empty (M, 4) array")
        if tets.min() < 0 or tets.max() >= len(nodes):
            raise GeometryError("tet references a node index out of range")
        vol = tet_signed_volumes(nodes, tets)
        if reorient and np.any(vol < 0):
            tets = tets.copy()
            flip = vol < 0
            tets[flip, 2], tets[flip, 3] = tets[flip, 3].copy(), tets[flip, 2].copy()
            vol = np.abs(vol)
        if np.any(vol <= 0):
            bad = int(np.flatnonzero(vol <= 0)[0])
            raise GeometryError(f"tet {bad} is degenerate or negatively oriented")
        used = np.zeros(len(nodes), dtype=bool)
        used[tets.ravel()] = True
        if not used.all():
            raise GeometryError(f"node {int(np.flatnonzero(~used)[0])} belongs to no tet")

        edges = unique_edges(tets)
        both = np.concatenate([edges, edges[:, ::-1]])
        order = np.lexsort((both[:, 1], both[:, 0]))
        both = both[order]
        adj_ptr = np.zeros(len(nodes) + 1, dtype=np.int64)
        np.add.at(adj_ptr, both[:, 0] + 1, 1)
        adj_ptr = np.cumsum(adj_ptr)
        adj_idx = both[:, 1].copy()
        adj_vec = nodes[both[:, 1]] - nodes[both[:, 0]]
        adj_len = np.linalg.norm(adj_vec, axis=1)
        if np.any(adj_len <= 0):
            raise GeometryError("mesh contains a zero-length edge")
        surfaces = {k: np.asarray(v, dtype=np.int64) for k, v in (surfaces or {}).items()}
        return cls(nodes, tets, vol, adj_ptr, adj_idx, adj_vec, adj_len, surfaces)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    def neighbors(self, i: int) -> list[tuple[int, np.ndarray, float]]:
        """Return ``(neighbor, edge_vector, edge_length)`` triples for node ``i``."""
        lo, hi = self.adj_ptr[i], self.adj_ptr[i + 1]
        return [
            (int(self.adj_idx[k]), self.adj_vec[k], float(self.adj_len[k]))
            for k in range(lo, hi)
        ]

    def edges(self) -> np.ndarray:
        """Unique undirected edges as an (E, 2) array with ``i < j``."""
        return unique_edges(self.tets)

    def centroids(self) -> np.ndarray:
        return self.nodes[self.tets].mean(axis=1)

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.nodes.min(axis=0), self.nodes.max(axis=0)

    def node_tets(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR map node -> incident tets, as ``(ptr, tet_indices)``."""
        flat = self.tets.ravel()
        order = np.argsort(flat, kind="stable")
        ptr = np.zeros(self.n_nodes + 1, dtype=np.int64)
        np.add.at(ptr, flat + 1, 1)
        return np.cumsum(ptr), (order // 4).astype(np.int64)

    def shape_gradients(self) -> np.ndarray:
        """Gradients of the four linear basis functions per tet, shape (M, 4, 3)."""
        p = self.nodes[self.tets]
        jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]], axis=1)
        inv = np.linalg.inv(jac)  # rows of jac are edge vectors
        grads = np.empty((self.n_tets, 4, 3))
        grads[:, 1:, :] = np.transpose(inv, (0, 2, 1))
        grads[:, 0, :] = -grads[:, 1:, :].sum(axis=1)
        return grads


def unique_edges(tets: np.ndarray) -> np.ndarray:
    pairs = np.concatenate([tets[:, [a, b]] for a, b in itertools.combinations(range(4), 2)])
    pairs.sort(axis=1)
    return np.unique(pairs, axis=0)


@dataclass(eq=False)
class FiberField:
    """Per-element orthonormal fibre / sheet / sheet-normal frames."""

    f: np.ndarray
    s: np.ndarray
    n: np.ndarray

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=np.float64)
        self.s = np.asarray(self.s, dtype=np.float64)
        self.n = np.asarray(self.n, dtype=np.float64)

    def frames(self) -> np.ndarray:
        """Stacked frames, shape (M, 3, 3) with rows f, s, n."""
        return np.stack([self.f, self.s, self.n], axis=1)

    def orthonormality_error(self) -> float:
        fr = self.frames()
        gram = np.einsum("mij,mkj->mik", fr, fr)
        return float(np.abs(gram - np.eye(3)).max())


@dataclass(eq=False)
class VentricularCoords:
    ab: np.ndarray
    tm: np.ndarray
    tv: np.ndarray
    pa: np.ndarray

    def as_array(self) -> np.ndarray:
        """Columns in the order ab, tm, tv, pa."""
        return np.column_stack([self.ab, self.tm, self.tv, self.pa])

    @classmethod
    def from_array(cls, arr) -> "VentricularCoords":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy(), arr[:, 3].copy())


@dataclass(eq=False)
class ElectrodeSet:
    positions: np.ndarray
    names: tuple = ELECTRODE_NAMES

    def __getitem__(self, name: str) -> np.ndarray:
        return self.positions[self.names.index(name)]

    def translated(self, offset) -> "ElectrodeSet":
        return ElectrodeSet(self.positions + np.asarray(offset, dtype=float), self.names)


def _normalise(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi - lo <= 0:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


# Kuhn (Freudenthal) split of the unit cube: each tet walks 000 -> 111 along
# one permutation of the axes.
def _kuhn_offsets() -> list[list[tuple[int, int, int]]]:
    out = []
    for perm in itertools.permutations(range(3)):
        corner = [0, 0, 0]
        path = [tuple(corner)]
        for axis in perm:
            corner[axis] = 1
            path.append(tuple(corner))
        out.append(path)
    return out


KUHN_TETS = _kuhn_offsets()


def _kuhn_tets_for_cubes(cube_ijk: np.ndarray, node_id) -> np.ndarray:
    """Split cubes with lower corners ``cube_ijk`` into 6 tets each."""
    tets = np.empty((len(cube_ijk) * 6, 4), dtype=np.int64)
    for t, path in enumerate(KUHN_TETS):
        for v, off in enumerate(path):
            tets[t::6, v] = node_id(cube_ijk + np.asarray(off))
    return tets


def generate_slab(nx: int, ny: int, nz: int, spacing: float, fibre_angle: float = 0.0):
    """Regular slab of ``nx*ny*nz`` nodes split into Kuhn tetrahedra.

    Fibres lie in the x-y plane rotated by ``fibre_angle`` degrees from +x;
    sheets are the in-plane perpendicular and normals point along +z.
    """
    if min(nx, ny, nz) < 2:
        raise GeometryError("slab node counts must all be >= 2")
    if not spacing > 0:
        raise GeometryError("slab spacing must be positive")
    i, j, k = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    i, j, k = (a.transpose(2, 1, 0).ravel() for a in (i, j, k))  # x fastest
    nodes = np.column_stack([i, j, k]).astype(np.float64) * spacing

    def node_id(ijk):
        return ijk[:, 0] + nx * (ijk[:, 1] + ny * ijk[:, 2])

    ci, cj, ck = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), np.arange(nz - 1), indexing="ij")
    cubes = np.column_stack([a.transpose(2, 1, 0).ravel() for a in (ci, cj, ck)])
    tets = _kuhn_tets_for_cubes(cubes, node_id)
    mesh = TetMesh.from_arrays(nodes, tets)

    a = np.deg2rad(fibre_angle)
    m = mesh.n_tets
    f = np.tile([np.cos(a), np.sin(a), 0.0], (m, 1))
    s = np.tile([-np.sin(a), np.cos(a), 0.0], (m, 1))
    n = np.tile([0.0, 0.0, 1.0], (m, 1))
    coords = VentricularCoords(
        ab=_normalise(nodes[:, 2]),
        tm=_normalise(nodes[:, 1]),
        tv=_normalise(nodes[:, 0]),
        pa=_normalise(nodes[:, 0]),
    )
    return mesh, FiberField(f, s, n), coords


@dataclass(frozen=True)
class BiventricularShape:
    """Ellipsoid semi-axes (radial, radial, long) in cm; base plane at z = 0.

    The RV ellipsoids are centred at ``(rv_offset, 0, 0)`` and carry separate
    x/y radial semi-axes.
    """

    lv_endo: tuple = (1.2, 1.2, 3.0)
    lv_epi: tuple = (2.0, 2.0, 3.7)
    rv_offset: float = 1.0
    rv_endo: tuple = (1.9, 1.9, 3.0)
    rv_epi: tuple = (2.45, 2.4, 3.45)

    def validate(self):
        for name in ("lv_endo", "lv_epi", "rv_endo", "rv_epi"):
            axes = getattr(self, name)
            if len(axes) != 3 or min(axes) <= 0:
                raise GeometryError(f"{name} semi-axes must be three positive numbers")
        if any(i >= o for i, o in zip(self.lv_endo, self.lv_epi)):
            raise GeometryError("LV endocardium must lie strictly inside the epicardium")
        if any(i >= o for i, o in zip(self.rv_endo, self.rv_epi)):
            raise GeometryError("RV endocardium must lie strictly inside the epicardium")
        if self.rv_offset + self.rv_endo[0] <= self.lv_epi[0]:
            raise GeometryError("RV cavity does not extend past the LV epicardium")
        if self.rv_offset - self.rv_endo[0] >= self.lv_epi[0]:
            raise GeometryError("RV does not share a septum with the LV")


def _ellipsoid_level(p: np.ndarray, axes, centre=(0.0, 0.0, 0.0)) -> np.ndarray:
    d = (p - np.asarray(centre)) / np.asarray(axes)
    return np.einsum("ij,ij->i", d, d)


# cube labels used for surface classification
_MYO, _LV_CAV, _RV_CAV, _OUT, _ABOVE = 0, 1, 2, 3, 4


def generate_biventricular(resolution: float = 0.15, shape: BiventricularShape | None = None):
    """Voxel-based idealised biventricle with analytic ventricular coordinates.

    Cubes of edge ``resolution`` whose centres fall inside the myocardium are
    kept (largest face-connected component) and split into Kuhn tets.
    ``mesh.surfaces`` records the ``lv_endo``, ``rv_endo``, ``epi`` and
    ``base`` node sets.
    """
    if not 0.05 <= resolution <= 0.3:
        raise GeometryError("resolution must lie in [0.05, 0.3] cm")
    shape = shape or BiventricularShape()
    shape.validate()
    h = resolution
    rv_c = (shape.rv_offset, 0.0, 0.0)

    x_lo = -shape.lv_epi[0] - h
    x_hi = max(shape.lv_epi[0], shape.rv_offset + shape.rv_epi[0]) + h
    y_half = max(shape.lv_epi[1], shape.rv_epi[1]) + h
    z_lo = -max(shape.lv_epi[2], shape.rv_epi[2]) - h
    # z = 0 must be a grid plane; one extra layer above the base for labelling
    kz0 = int(np.ceil(-z_lo / h))
    nxc = int(np.ceil((x_hi - x_lo) / h))
    nyc = int(np.ceil(2 * y_half / h))
    nzc = kz0 + 1
    origin = np.array([x_lo, -y_half, -kz0 * h])

    ci, cj, ck = np.meshgrid(np.arange(nxc), np.arange(nyc), np.arange(nzc), indexing="ij")
    centres = origin + (np.stack([ci, cj, ck], axis=-1).reshape(-1, 3) + 0.5) * h
    in_lv_endo = _ellipsoid_level(centres, shape.lv_endo) < 1
    in_lv_epi = _ellipsoid_level(centres, shape.lv_epi) < 1
    in_rv_endo = _ellipsoid_level(centres, shape.rv_endo, rv_c) < 1
    in_rv_epi = _ellipsoid_level(centres, shape.rv_epi, rv_c) < 1
    below = centres[:, 2] < 0
    lv_wall = in_lv_epi & ~in_lv_endo
    rv_wall = in_rv_epi & ~in_rv_endo & ~in_lv_epi
    myo = (lv_wall | rv_wall) & below

    grid = myo.reshape(nxc, nyc, nzc)
    labels, nlab = ndimage.label(grid)
    if nlab == 0:
        raise GeometryError("shape produced an empty myocardium")
    sizes = ndimage.sum(grid, labels, index=np.arange(1, nlab + 1))
    keep = (labels == 1 + int(np.argmax(sizes))).ravel()

    cube_label = np.full(len(centres), _OUT, dtype=np.int64)
    cube_label[in_lv_endo & below] = _LV_CAV
    cube_label[in_rv_endo & ~in_lv_epi & below] = _RV_CAV
    cube_label[~below] = _ABOVE
    cube_label[keep] = _MYO
    cube_grid = cube_label.reshape(nxc, nyc, nzc)

    kept_cubes = np.column_stack(np.unravel_index(np.flatnonzero(keep), (nxc, nyc, nzc)))
    nnx, nny = nxc + 1, nyc + 1

    def grid_id(ijk):
        return ijk[:, 0] + nnx * (ijk[:, 1] + nny * ijk[:, 2])

    raw_tets = _kuhn_tets_for_cubes(kept_cubes, grid_id)
    used, tets = np.unique(raw_tets, return_inverse=True)
    tets = tets.reshape(-1, 4)
    gk = used // (nnx * nny)
    gj = (used // nnx) % nny
    gi = used % nnx
    node_ijk = np.column_stack([gi, gj, gk])
    nodes = origin + node_ijk * h

    # label of every cube touching each node (padded grid, outside = _OUT)
    padded = np.pad(cube_grid, 1, constant_values=_OUT)
    touching = np.stack(
        [padded[gi + di, gj + dj, gk + dk] for di in (0, 1) for dj in (0, 1) for dk in (0, 1)],
        axis=1,
    )
    lv_endo = np.any(touching == _LV_CAV, axis=1)
    rv_endo = np.any(touching == _RV_CAV, axis=1)
    epi = np.any(touching == _OUT, axis=1) & ~lv_endo & ~rv_endo
    base = np.any(touching == _ABOVE, axis=1)
    surfaces = {
        "lv_endo": np.flatnonzero(lv_endo),
        "rv_endo": np.flatnonzero(rv_endo),
        "epi": np.flatnonzero(epi),
        "base": np.flatnonzero(base),
    }
    mesh = TetMesh.from_arrays(nodes, tets, surfaces=surfaces)

    # LV region includes the septum, whose RV face plays the epicardial role
    lv_region = _ellipsoid_level(nodes, shape.lv_epi) <= 1.0 + 1e-9
    rv_free = rv_endo & ~lv_region
    tm = np.empty(len(nodes))
    tm[lv_region] = _distance_ratio(nodes[lv_region], nodes[lv_endo], nodes[(epi | rv_endo) & ~lv_endo])
    tm[~lv_region] = _distance_ratio(nodes[~lv_region], nodes[rv_free], nodes[epi])
    coords = VentricularCoords(
        ab=_normalise(nodes[:, 2]),
        tm=np.clip(tm, 0.0, 1.0),
        tv=_normalise(nodes[:, 0]),
        pa=_normalise(nodes[:, 1]),
    )
    fibres = rule_based_fibres(mesh, coords.tm)
    return mesh, fibres, coords


def _distance_ratio(points, zero_set, one_set) -> np.ndarray:
    if len(points) == 0:
        return np.empty(0)
    d0 = cKDTree(zero_set).query(points)[0] if len(zero_set) else np.ones(len(points))
    d1 = cKDTree(one_set).query(points)[0] if len(one_set) else np.ones(len(points))
    total = d0 + d1
    return np.where(total > 0, d0 / np.where(total > 0, total, 1.0), 0.0)


def rule_based_fibres(mesh: TetMesh, tm: np.ndarray, endo_angle=-60.0, epi_angle=60.0) -> FiberField:
    """Streeter-style helix rotating from ``endo_angle`` to ``epi_angle``.

    The sheet direction is the element gradient of ``tm``; the helix angle
    is measured from the circumferential direction towards the base.
    """
    grads = mesh.shape_gradients()
    g = np.einsum("mk,mkd->md", tm[mesh.tets], grads)
    cen = mesh.centroids()
    radial = cen.copy()
    radial[:, 2] = 0.0
    radial[np.linalg.norm(radial, axis=1) < 1e-12] = [1.0, 0.0, 0.0]
    gnorm = np.linalg.norm(g, axis=1)
    t_hat = np.where(gnorm[:, None] > 1e-9, g, radial)
    t_hat /= np.linalg.norm(t_hat, axis=1, keepdims=True)

    z = np.array([0.0, 0.0, 1.0])
    long = z - (t_hat @ z)[:, None] * t_hat
    weak = np.linalg.norm(long, axis=1) < 1e-6
    if np.any(weak):
        alt = np.array([1.0, 0.0, 0.0])
        long[weak] = alt - (t_hat[weak] @ alt)[:, None] * t_hat[weak]
    long /= np.linalg.norm(long, axis=1, keepdims=True)
    circ = np.cross(long, t_hat)
    circ /= np.linalg.norm(circ, axis=1, keepdims=True)

    alpha = np.deg2rad(endo_angle + (epi_angle - endo_angle) * tm[mesh.tets].mean(axis=1))
    f = np.cos(alpha)[:, None] * circ + np.sin(alpha)[:, None] * long
    f /= np.linalg.norm(f, axis=1, keepdims=True)
    s = t_hat
    n = np.cross(f, s)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    return FiberField(f, s, n)


# Apex-to-base axis of the heart expressed in the torso frame (+x subject's
# right, +y anterior, +z superior): the base sits right, posterior and up.
HEART_AXIS_IN_TORSO = (0.5, -0.5, 0.7)


def torso_rotation(axis=HEART_AXIS_IN_TORSO) -> Rotation:
    """Rotation taking mesh coordinates (long axis +z) into the torso frame."""
    axis = np.asarray(axis, dtype=float)
    rot, _ = Rotation.align_vectors([axis / np.linalg.norm(axis)], [[0.0, 0.0, 1.0]])
    return rot


def default_electrodes(mesh: TetMesh, axis=HEART_AXIS_IN_TORSO) -> ElectrodeSet:
    """Place electrodes on a virtual torso box 2.5x the mesh bounding box.

    The heart is tilted in the torso so its apex points anterior, left and
    down (``axis`` gives the apex-to-base direction in torso coordinates).
    In the torso frame +y is anterior and -x is the subject's left.  V1-V6
    sweep an arc across the anterior face from right-sternal to left-lateral
    at the height of the box centre; the limb electrodes sit at the anterior
    box corners.  Positions are returned in mesh coordinates.
    """
    rot = torso_rotation(axis)
    lo, hi = mesh.bounding_box()
    origin = 0.5 * (lo + hi)
    local = rot.apply(mesh.nodes - origin)
    lo, hi = local.min(axis=0), local.max(axis=0)
    centre = 0.5 * (lo + hi)
    half = 2.5 * np.maximum(0.5 * (hi - lo), 1e-6)
    radius = float(max(half[0], half[1]))
    angles = np.deg2rad([80.0, 100.0, 120.0, 140.0, 160.0, 180.0])
    precordial = np.column_stack(
        [radius * np.cos(angles), radius * np.sin(angles), np.zeros(6)]
    ) + centre
    la = centre + np.array([-half[0], half[1], half[2]])
    ra = centre + np.array([half[0], half[1], half[2]])
    ll = centre + np.array([-half[0], half[1], -half[2]])
    torso = np.vstack([la, ra, ll, precordial])
    return ElectrodeSet(rot.inv().apply(torso) + origin)
