"""Pseudo-ECG forward model, T-wave biomarkers and the ECG discrepancy."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import find_peaks

from .activation import ConductionVelocities
from .geometry import ELECTRODE_NAMES, ElectrodeSet, FiberField, TetMesh

LEAD_NAMES = ("I", "II", "V1", "V2", "V3", "V4", "V5", "V6")
T_END_FRACTION = 0.05


class EcgError(ValueError):
    pass


@dataclass(eq=False)
class EcgSignal:
    """Eight leads sampled every 1 ms, shape ``(8, T)``."""

    leads: np.ndarray
    names: tuple = LEAD_NAMES

    def __post_init__(self):
        self.leads = np.asarray(self.leads, dtype=float)
        if self.leads.ndim != 2 or self.leads.shape[0] != len(self.names):
            raise EcgError(f"expected {len(self.names)} leads of equal length")
        if not np.all(np.isfinite(self.leads)):
            raise EcgError("ECG contains non-finite samples")

    @property
    def duration(self) -> int:
        return self.leads.shape[1]

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.duration, dtype=float)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.leads[self.names.index(name)]

    def scaled(self, factor: float) -> "EcgSignal":
        return EcgSignal(self.leads * factor, self.names)


def lead_matrix() -> np.ndarray:
    """Map the nine electrode potentials (LA, RA, LL, V1..V6) onto the eight leads."""
    m = np.zeros((8, 9))
    la, ra, ll = 0, 1, 2
    m[0, la], m[0, ra] = 1.0, -1.0
    m[1, ll], m[1, ra] = 1.0, -1.0
    for k in range(6):
        m[2 + k, 3 + k] = 1.0
        m[2 + k, [la, ra, ll]] = -1.0 / 3.0
    return m


def points_inside_mesh(mesh: TetMesh, points: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Boolean mask of points lying in (or on) any tet."""
    p = mesh.nodes[mesh.tets]
    jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]], axis=2)
    inv = np.linalg.inv(jac)
    out = np.zeros(len(points), dtype=bool)
    for k, x in enumerate(np.asarray(points, dtype=float)):
        lam = np.einsum("mij,mj->mi", inv, x - p[:, 0])
        inside = (lam >= -tol).all(axis=1) & (lam.sum(axis=1) <= 1 + tol)
        out[k] = bool(inside.any())
    return out


def element_diffusivity(fibres: FiberField | None, diffusivity="identity",
                        cv: ConductionVelocities | None = None):
    """Per-tet tensor D, or ``None`` for the identity.

    The orthotropic option scales each direction by ``(v_d / v_f)^2``, the
    conductivity ratio implied by the conduction speeds.
    """
    if diffusivity in (None, "identity"):
        return None
    if diffusivity != "orthotropic":
        raise EcgError(f"unknown diffusivity {diffusivity!r}")
    if fibres is None or cv is None:
        raise EcgError("orthotropic diffusivity needs fibres and conduction velocities")
    v = cv.as_array()
    scale = (v / v[0]) ** 2
    frames = fibres.frames()
    return np.einsum("d,mdi,mdj->mij", scale, frames, frames)


def electrode_lead_field(mesh: TetMesh, electrodes: ElectrodeSet, fibres: FiberField | None = None,
                         diffusivity="identity", cv: ConductionVelocities | None = None) -> np.ndarray:
    """Linear map from nodal potentials to the nine electrode potentials, (9, N).

    Each tet contributes ``b_j (D_j grad U_j) . (c_j - x_e) / r^3``, where
    ``c_j`` is the centroid, ``r = |c_j - x_e|`` and ``b_j`` the volume
    relative to the mean tet volume.
    """
    pos = np.asarray(electrodes.positions, dtype=float)
    inside = points_inside_mesh(mesh, pos)
    if inside.any():
        names = [n for n, flag in zip(electrodes.names, inside) if flag]
        raise EcgError("electrode(s) inside the mesh: " + ", ".join(names))
    grads = mesh.shape_gradients()  # (M, 4, 3)
    cent = mesh.centroids()
    b = mesh.element_volumes / mesh.element_volumes.mean()
    dten = element_diffusivity(fibres, diffusivity, cv)
    out = np.zeros((len(pos), mesh.n_nodes))
    for e, x in enumerate(pos):
        r = cent - x
        dist = np.linalg.norm(r, axis=1)
        if np.any(dist <= 0):
            raise EcgError(f"electrode {electrodes.names[e]} coincides with a tet centroid")
        w = b[:, None] * r / dist[:, None] ** 3  # (M, 3)
        if dten is not None:
            w = np.einsum("mij,mi->mj", dten, w)  # D symmetric
        coef = np.einsum("mak,mk->ma", grads, w)
        out[e] = np.bincount(mesh.tets.ravel(), weights=coef.ravel(), minlength=mesh.n_nodes)
    return out


def ecg_lead_field(mesh, electrodes, fibres=None, diffusivity="identity", cv=None) -> np.ndarray:
    """Linear map from nodal potentials to the eight leads, (8, N)."""
    return lead_matrix() @ electrode_lead_field(mesh, electrodes, fibres, diffusivity, cv)


def _relative(values: np.ndarray) -> np.ndarray:
    # potentials only see differences; taking them relative to node 0 makes a
    # uniform field give exact zeros instead of rounding noise
    return values - values[:1]


def pseudo_ecg(field, mesh: TetMesh, electrodes: ElectrodeSet, fibres: FiberField | None = None,
               diffusivity="identity", cv: ConductionVelocities | None = None) -> EcgSignal:
    """Unnormalised leads from a membrane field (``MembraneField`` or (N, T) array)."""
    values = getattr(field, "values", field)
    values = np.asarray(values, dtype=float)
    if values.shape[0] != mesh.n_nodes:
        raise EcgError("field and mesh disagree on the node count")
    lf = ecg_lead_field(mesh, electrodes, fibres, diffusivity, cv)
    return EcgSignal(lf @ _relative(values))


def electrode_potentials(field, mesh, electrodes, fibres=None, diffusivity="identity", cv=None):
    """Raw potentials at the nine electrodes, (9, T)."""
    values = np.asarray(getattr(field, "values", field), dtype=float)
    return electrode_lead_field(mesh, electrodes, fibres, diffusivity, cv) @ _relative(values)


def normalize_ecg(signal: EcgSignal) -> EcgSignal:
    """Divide every lead by the largest absolute sample across all leads."""
    peak = np.abs(signal.leads).max()
    if peak == 0:
        raise EcgError("cannot normalise an all-zero ECG")
    return EcgSignal(signal.leads / peak, signal.names)


@dataclass
class TWaveBiomarkers:
    qt: float
    tpe: float
    t_amplitude: float
    t_polarity: np.ndarray
    tpeak_dispersion_v3_v5: float
    t_peak: np.ndarray = field(repr=False, default=None)
    t_end: np.ndarray = field(repr=False, default=None)
    excluded: tuple = ()

    @property
    def mean_polarity(self) -> float:
        return float(np.mean(self.t_polarity))

    def as_dict(self) -> dict:
        return {
            "qt": self.qt,
            "tpe": self.tpe,
            "t_amplitude": self.t_amplitude,
            "t_polarity": [int(x) for x in self.t_polarity],
            "tpeak_dispersion_v3_v5": self.tpeak_dispersion_v3_v5,
            "t_peak": [float(x) for x in self.t_peak],
            "t_end": [float(x) for x in self.t_end],
            "excluded": list(self.excluded),
        }


def _t_wave(x: np.ndarray, start: int):
    seg = x[start:]
    if len(seg) < 3:
        return None
    k = int(np.argmax(np.abs(seg)))
    amp = float(seg[k])
    if amp == 0.0 or k == len(seg) - 1:
        return None
    level = T_END_FRACTION * abs(amp)
    above = np.flatnonzero(np.abs(seg[k:]) >= level)
    # settle point: the lead stays below the level from here on, so the
    # zero crossing between the lobes of a biphasic T does not count
    j = k + int(above[-1]) + 1
    if j >= len(seg):
        return None
    a0, a1 = abs(seg[j - 1]), abs(seg[j])
    t_end = start + j - 1 + (a0 - level) / (a0 - a1)
    return start + k, amp, t_end


def compute_t_biomarkers(signal: EcgSignal, qrs_onset: float = 0.0, st_start: float | None = None) -> TWaveBiomarkers:
    """T-wave biomarkers, searching each lead from ``st_start`` to the end.

    The T peak is the largest absolute sample in the window and T end the
    time after it from which the lead stays below 5% of that peak.  Leads with
    no usable T wave are excluded from the means; all-excluded raises.
    """
    start = int(np.ceil(qrs_onset if st_start is None else st_start))
    if not 0 <= start < signal.duration:
        raise EcgError("ST-T window start lies outside the signal")
    n = len(signal.names)
    t_peak = np.full(n, np.nan)
    t_end = np.full(n, np.nan)
    amp = np.full(n, np.nan)
    polarity = np.zeros(n, dtype=np.int64)
    excluded = []
    for i, name in enumerate(signal.names):
        res = _t_wave(signal.leads[i], start)
        if res is None:
            excluded.append(name)
            continue
        t_peak[i], amp[i], t_end[i] = res
        polarity[i] = 1 if amp[i] > 0 else -1
    if len(excluded) == n:
        raise EcgError("no lead has a detectable T wave")
    ok = ~np.isnan(t_end)
    v3, v5 = signal.names.index("V3"), signal.names.index("V5")
    return TWaveBiomarkers(
        qt=float(np.mean(t_end[ok] - qrs_onset)),
        tpe=float(np.mean(t_end[ok] - t_peak[ok])),
        t_amplitude=float(np.mean(np.abs(amp[ok]))),
        t_polarity=polarity,
        tpeak_dispersion_v3_v5=float(abs(t_peak[v3] - t_peak[v5])),
        t_peak=t_peak,
        t_end=t_end,
        excluded=tuple(excluded),
    )


@dataclass
class DiscrepancyTerms:
    value: float
    pcc: np.ndarray
    rmse: np.ndarray
    correlation_term: float
    amplitude_term: float
    zero_variance_leads: tuple


def discrepancy_terms(sim: EcgSignal, target: EcgSignal) -> DiscrepancyTerms:
    """``100 mean(1 - PCC)^2 + 2 mean(RMSE) / max|target|`` over the leads.

    A lead with zero variance in either signal has undefined PCC; it counts as
    PCC = 0 and is listed in ``zero_variance_leads``.
    """
    a, b = sim.leads, target.leads
    if a.shape != b.shape:
        raise EcgError(f"signal shapes differ: {a.shape} vs {b.shape}")
    scale = np.abs(b).max()
    if scale == 0:
        raise EcgError("target ECG is all zero")
    da = a - a.mean(axis=1, keepdims=True)
    db = b - b.mean(axis=1, keepdims=True)
    na = np.sqrt((da * da).sum(axis=1))
    nb = np.sqrt((db * db).sum(axis=1))
    zero = (na == 0) | (nb == 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        pcc = np.where(zero, 0.0, (da * db).sum(axis=1) / np.where(zero, 1.0, na * nb))
    rmse = np.sqrt(np.mean((a - b) ** 2, axis=1))
    # identical leads correlate perfectly, whatever the rounding says
    pcc = np.where((rmse == 0) & ~zero, 1.0, np.clip(pcc, -1.0, 1.0))
    corr = 100.0 * float(np.mean((1.0 - pcc) ** 2))
    amp = 2.0 * float(np.mean(rmse)) / scale
    names = tuple(n for n, z in zip(sim.names, zero) if z)
    return DiscrepancyTerms(corr + amp, pcc, rmse, corr, amp, names)


def discrepancy(sim: EcgSignal, target: EcgSignal) -> float:
    return discrepancy_terms(sim, target).value


def pearson_per_lead(sim: EcgSignal, target: EcgSignal) -> np.ndarray:
    return discrepancy_terms(sim, target).pcc


def unipolar_electrogram_approx(trace, shift: int = 20) -> np.ndarray:
    """``e(t) = u(t) - u(t - shift)`` with the first ``shift`` samples set to zero."""
    u = np.asarray(trace, dtype=float)
    shift = int(shift)
    if shift < 0:
        raise EcgError("shift must be non-negative")
    e = np.zeros_like(u)
    if shift == 0 or shift >= len(u):
        return e
    e[shift:] = u[shift:] - u[:-shift]
    return e


def repolarisation_maxima(trace, shift: int = 20, rel_prominence: float = 0.01) -> np.ndarray:
    """Sample indices of local maxima in the electrogram's repolarisation deflection.

    The deflection is oriented positive (repolarisation lowers the potential,
    so the electrogram is negated) and searched after the upstroke has left
    the shift window.  Peaks below ``rel_prominence`` of the deflection height
    are ignored as numerical ripple.
    """
    u = np.asarray(trace, dtype=float)
    e = unipolar_electrogram_approx(u, shift)
    start = int(np.argmax(u)) + int(shift)
    d = -e[start:]
    height = d.max(initial=0.0)
    if height <= 0:
        return np.array([], dtype=np.int64)
    peaks, _ = find_peaks(np.concatenate([[-np.inf], d, [-np.inf]]),
                          prominence=rel_prominence * height)
    peaks = peaks - 1
    return start + peaks[d[peaks] > 0]


def save_ecg(signal: EcgSignal, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t_ms," + ",".join(signal.names) + "\n")
        for k in range(signal.duration):
            fh.write(f"{k}," + ",".join(repr(float(x)) for x in signal.leads[:, k]) + "\n")


def load_ecg(path) -> EcgSignal:
    """Read an ECG CSV; a non-1-ms time axis is linearly resampled to 1 ms."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    if header[0] != "t_ms" or tuple(header[1:]) != LEAD_NAMES:
        raise EcgError(f"{path}: header must be t_ms," + ",".join(LEAD_NAMES))
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    t = data[:, 0]
    leads = data[:, 1:].T
    if len(t) > 1 and np.any(np.diff(t) <= 0):
        raise EcgError(f"{path}: time column must be increasing")
    grid = np.arange(np.ceil(t[0]), np.floor(t[-1]) + 1)
    if len(grid) != len(t) or not np.allclose(grid, t):
        leads = np.array([np.interp(grid, t, x) for x in leads])
    return EcgSignal(leads)


__all__ = [
    "ELECTRODE_NAMES", "LEAD_NAMES", "EcgError", "EcgSignal", "TWaveBiomarkers",
    "DiscrepancyTerms", "lead_matrix", "electrode_lead_field", "ecg_lead_field", "pseudo_ecg",
    "electrode_potentials", "normalize_ecg", "compute_t_biomarkers", "discrepancy",
    "discrepancy_terms", "pearson_per_lead", "unipolar_electrogram_approx",
    "repolarisation_maxima", "save_ecg", "load_ecg", "points_inside_mesh",
]
