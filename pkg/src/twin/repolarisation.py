"""APD fields, reaction-Eikonal membrane potentials and electrotonic smoothing."""
from __future__ import annotations

from dataclasses import astuple, dataclass

import numpy as np
import scipy.sparse as sp

from .activation import ConductionVelocities
from .cellular import LookupTable
from .geometry import FiberField, TetMesh, VentricularCoords

PARAM_NAMES = ("g_ab", "g_tm", "g_pa", "g_tv", "apd_min", "apd_max")
K_SELF = 20.0  # 1/cm
MAX_ROUNDS = 40
RAMP_MS = 400.0


class RepolarisationError(ValueError):
    pass


@dataclass(frozen=True)
class ApdGradientParams:
    g_ab: float
    g_tm: float
    g_pa: float
    g_tv: float
    apd_min: float
    apd_max: float

    def __post_init__(self):
        if not self.apd_min < self.apd_max:
            raise RepolarisationError(f"apd_min ({self.apd_min}) must be below apd_max ({self.apd_max})")

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, values) -> "ApdGradientParams":
        values = [float(v) for v in values]
        if len(values) != 6:
            raise RepolarisationError("expected six values: " + ",".join(PARAM_NAMES))
        return cls(*values)

    def check_table(self, table: LookupTable) -> None:
        lo, hi = table.apd_range
        if self.apd_min < lo or self.apd_max > hi:
            raise RepolarisationError(
                f"APD range [{self.apd_min}, {self.apd_max}] outside lookup table range [{lo}, {hi}]"
            )


def round_half_up(x):
    return np.floor(np.asarray(x, dtype=float) + 0.5)


def compute_apd_map(coords: VentricularCoords, p: ApdGradientParams) -> np.ndarray:
    """Per-node APD (ms): normalised weighted sum of the four coordinates."""
    q = p.g_ab * coords.ab + p.g_tm * coords.tm + p.g_pa * coords.pa + p.g_tv * coords.tv
    q_lo, q_hi = q.min(), q.max()
    if q_hi - q_lo < 1e-9:
        return np.full(len(q), 0.5 * (p.apd_min + p.apd_max))
    return p.apd_min + (q - q_lo) / (q_hi - q_lo) * (p.apd_max - p.apd_min)


@dataclass(eq=False)
class MembraneField:
    """Membrane potential (mV), one row per node, one column per ms."""

    values: np.ndarray
    u_rest: float

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def duration(self) -> int:
        return self.values.shape[1]

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.duration, dtype=float)


def table_rows_for(apd: np.ndarray, table: LookupTable) -> np.ndarray:
    """Lookup-table row per node; raises naming the first node without a row."""
    keys = round_half_up(apd).astype(np.int64)
    rows = table.row_index(keys)
    missing = np.flatnonzero(rows < 0)
    if len(missing):
        i = int(missing[0])
        raise RepolarisationError(
            f"node {i}: APD {apd[i]:.2f} ms has no lookup-table row "
            f"(table covers {table.apd_range[0]}-{table.apd_range[1]} ms)"
        )
    return rows


def tau_indices(t_a: np.ndarray, duration: int, t_max: int):
    """Time-since-activation sample index per (node, t) and the activated mask."""
    t = np.arange(duration, dtype=float)
    rel = t[None, :] - np.asarray(t_a, dtype=float)[:, None]
    active = rel >= 0
    tau = np.minimum(round_half_up(np.maximum(rel, 0.0)), t_max - 1).astype(np.int64)
    return tau, active


def assemble_membrane_field(t_a, apd, table: LookupTable, duration: int) -> MembraneField:
    """Paint table rows onto the activation map.

    Before activation a node sits at ``u_rest``; afterwards it follows the row
    for its rounded APD at ``tau = min(round(t - t_a), t_max)``, so beyond the
    end of the row the last sample is held.
    """
    t_a = np.asarray(t_a, dtype=float)
    apd = np.asarray(apd, dtype=float)
    if t_a.shape != apd.shape:
        raise RepolarisationError("activation and APD maps differ in length")
    if not np.all(np.isfinite(t_a)):
        raise RepolarisationError("activation map contains non-finite times")
    rows = table_rows_for(apd, table)
    tau, active = tau_indices(t_a, int(duration), table.t_max)
    values = np.where(active, table.traces[rows[:, None], tau], table.u_rest)
    return MembraneField(values, table.u_rest)


@dataclass(eq=False)
class SmoothingWeights:
    """Row-stochastic operator: neighbour weights ``k_m`` plus self weight ``k_n``."""

    matrix: sp.csr_matrix
    k_self: float

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x


def edge_metric_weights(mesh: TetMesh, fibres: FiberField, cv: ConductionVelocities):
    """Unnormalised ``k_m`` (1/cm) for every directed adjacency entry.

    The per-edge frame is the average over the tets sharing the edge, taken on
    the scaled tensor ``sum_d (maxV/V_d)^2 d d^T`` so that fibre sign flips
    between neighbouring tets do not cancel.
    """
    v = cv.as_array()
    scale = (v.max() / v) ** 2
    frames = fibres.frames()  # (M, 3, 3) rows f, s, n
    tens = np.einsum("d,mdi,mdj->mij", scale, frames, frames)

    n = mesh.n_nodes
    pairs = []
    owners = []
    for a in range(4):
        for b in range(a + 1, 4):
            i, j = mesh.tets[:, a], mesh.tets[:, b]
            pairs.append(np.minimum(i, j) * n + np.maximum(i, j))
            owners.append(np.arange(mesh.n_tets))
    keys = np.concatenate(pairs)
    owners = np.concatenate(owners)
    uniq, inv = np.unique(keys, return_inverse=True)
    acc = np.zeros((len(uniq), 3, 3))
    np.add.at(acc, inv, tens[owners])
    cnt = np.bincount(inv, minlength=len(uniq)).astype(float)
    acc /= cnt[:, None, None]

    rows = np.repeat(np.arange(n), np.diff(mesh.adj_ptr))
    cols = mesh.adj_idx
    adj_keys = np.minimum(rows, cols) * n + np.maximum(rows, cols)
    pos = np.searchsorted(uniq, adj_keys)
    p = mesh.adj_vec
    quad = np.einsum("ei,eij,ej->e", p, acc[pos], p)
    return 1.0 / np.sqrt(quad)


def compute_smoothing_weights(
    mesh: TetMesh, fibres: FiberField, cv: ConductionVelocities, k_self: float = K_SELF
) -> SmoothingWeights:
    if k_self < 0:
        raise RepolarisationError("k_self must be non-negative")
    n = mesh.n_nodes
    k_m = edge_metric_weights(mesh, fibres, cv)
    rows = np.repeat(np.arange(n), np.diff(mesh.adj_ptr))
    denom = np.bincount(rows, weights=k_m, minlength=n) + k_self
    data = np.concatenate([k_m / denom[rows], k_self / denom])
    r = np.concatenate([rows, np.arange(n)])
    c = np.concatenate([mesh.adj_idx, np.arange(n)])
    mat = sp.csr_matrix((data, (r, c)), shape=(n, n))
    mat.sum_duplicates()
    return SmoothingWeights(mat, float(k_self))


def smoothing_rounds(t, max_rounds: int = MAX_ROUNDS, ramp: float = RAMP_MS):
    """Smoothing passes at time ``t`` ms: 1 at t=0 rising linearly to ``max_rounds``."""
    t = np.asarray(t, dtype=float)
    r = np.minimum(1 + np.floor((max_rounds - 1) * np.maximum(t, 0.0) / ramp), max_rounds)
    return r.astype(np.int64)


def smooth_field(field: MembraneField, w: SmoothingWeights, schedule=None) -> MembraneField:
    """Apply the smoothing operator ``rounds(t)`` times to each time sample.

    ``schedule`` maps an array of times to round counts, or is an integer
    array with one entry per sample; default is :func:`smoothing_rounds`.
    """
    if schedule is None:
        rounds = smoothing_rounds(field.t)
    elif callable(schedule):
        rounds = np.asarray(schedule(field.t), dtype=np.int64)
    else:
        rounds = np.asarray(schedule, dtype=np.int64)
    if rounds.shape != (field.duration,):
        raise RepolarisationError("schedule must give one round count per sample")
    if np.any(rounds < 0):
        raise RepolarisationError("round counts must be non-negative")
    out = np.array(field.values, dtype=float, copy=True)
    for r in range(1, int(rounds.max(initial=0)) + 1):
        cols = np.flatnonzero(rounds >= r)
        out[:, cols] = w.matrix @ out[:, cols]
    return MembraneField(out, field.u_rest)


def repolarisation_map(field: MembraneField, fraction: float = 0.1, strict: bool = False):
    """Per-node repolarisation time (ms), nan where a node never repolarises.

    RT is the last downward crossing of ``u_rest + fraction * (peak - u_rest)``,
    linearly interpolated between samples.  With ``strict`` a node that does
    not repolarise raises instead.
    """
    v = field.values
    peak = v.max(axis=1)
    level = field.u_rest + fraction * (peak - field.u_rest)
    above = v >= level[:, None]
    down = above[:, :-1] & ~above[:, 1:]
    rt = np.full(field.n_nodes, np.nan)
    has = down.any(axis=1)
    # last crossing index per row
    k = v.shape[1] - 2 - np.argmax(down[:, ::-1], axis=1)
    ends_low = ~above[:, -1]
    ok = has & ends_low
    idx = np.flatnonzero(ok)
    v0 = v[idx, k[idx]]
    v1 = v[idx, k[idx] + 1]
    rt[idx] = k[idx] + (v0 - level[idx]) / (v0 - v1)
    if strict and not ok.all():
        bad = np.flatnonzero(~ok)
        raise RepolarisationError(f"{len(bad)} node(s) do not repolarise, first is node {int(bad[0])}")
    return rt
