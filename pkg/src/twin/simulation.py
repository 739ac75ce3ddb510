"""Reaction-Eikonal forward model: theta -> APD map -> membrane field -> ECG.

The smoothed pseudo-ECG is linear in the unsmoothed field, so for each round
count ``r`` the operator ``P_r = L W^r`` (leads x nodes) is precomputed once
and every forward evaluation is a single pass over (node, time) pairs.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numba
import numpy as np

from .activation import ConductionVelocities
from .cellular import LookupTable
from .ecg import EcgSignal, compute_t_biomarkers, ecg_lead_field, normalize_ecg
from .geometry import ElectrodeSet, FiberField, TetMesh, VentricularCoords
from .repolarisation import (
    ApdGradientParams,
    MembraneField,
    SmoothingWeights,
    assemble_membrane_field,
    compute_apd_map,
    compute_smoothing_weights,
    smooth_field,
    smoothing_rounds,
    table_rows_for,
)

ST_MARGIN_MS = 30


class ForwardError(RuntimeError):
    pass


@numba.njit(cache=True, parallel=True)
def _fast_ecg(t_a, rows, traces, u_rest, proj, rounds):
    n_nodes = t_a.shape[0]
    n_t = rounds.shape[0]
    n_leads = proj.shape[2]
    t_max = traces.shape[1]
    out = np.zeros((n_leads, n_t))
    for t in numba.prange(n_t):
        p = proj[rounds[t]]
        acc = np.zeros(n_leads)
        for i in range(n_nodes):
            rel = t - t_a[i]
            if rel < 0.0:
                continue
            tau = int(np.floor(rel + 0.5))
            if tau > t_max - 1:
                tau = t_max - 1
            val = traces[rows[i], tau] - u_rest
            for k in range(n_leads):
                acc[k] += p[i, k] * val
        for k in range(n_leads):
            out[k, t] = acc[k]
    return out


@dataclass(eq=False)
class ForwardModel:
    """Everything the theta -> ECG map needs, with the smoothing folded into
    per-round lead fields."""

    mesh: TetMesh
    coords: VentricularCoords
    t_a: np.ndarray
    table: LookupTable
    weights: SmoothingWeights | None
    lead_field: np.ndarray
    duration: int = 600
    rounds: np.ndarray | None = None
    qrs_onset: float = 0.0
    st_start: float | None = None
    _proj: np.ndarray | None = dataclasses.field(default=None, repr=False)

    def __post_init__(self):
        self.t_a = np.ascontiguousarray(self.t_a, dtype=np.float64)
        if self.t_a.shape != (self.mesh.n_nodes,):
            raise ForwardError("activation map does not match the mesh")
        if self.rounds is None:
            if self.weights is None:
                self.rounds = np.zeros(self.duration, dtype=np.int64)
            else:
                self.rounds = smoothing_rounds(np.arange(self.duration))
        self.rounds = np.ascontiguousarray(self.rounds, dtype=np.int64)
        if self.rounds.shape != (self.duration,):
            raise ForwardError("need one smoothing round count per sample")
        if self.weights is None and self.rounds.max(initial=0) > 0:
            raise ForwardError("smoothing rounds given without smoothing weights")
        if self.st_start is None:
            self.st_start = float(np.ceil(self.t_a.max()) + ST_MARGIN_MS)

    @classmethod
    def build(cls, mesh: TetMesh, fibres: FiberField, coords: VentricularCoords, electrodes: ElectrodeSet,
              t_a, table: LookupTable, cv: ConductionVelocities, duration: int = 600,
              smoothing: bool = True, k_self: float = 20.0, diffusivity="identity", **kw) -> "ForwardModel":
        weights = compute_smoothing_weights(mesh, fibres, cv, k_self) if smoothing else None
        lf = ecg_lead_field(mesh, electrodes, fibres, diffusivity, cv)
        return cls(mesh, coords, np.asarray(t_a, dtype=float), table, weights, lf, int(duration), **kw)

    def with_table(self, table: LookupTable, duration: int | None = None) -> "ForwardModel":
        """Same geometry and precomputed operators with a different lookup table."""
        duration = self.duration if duration is None else int(duration)
        rounds = None if duration != self.duration else self.rounds
        model = dataclasses.replace(self, table=table, duration=duration, rounds=rounds, _proj=None)
        if rounds is None and self.weights is not None:
            model.rounds = smoothing_rounds(np.arange(duration))
        if self._proj is not None and model.rounds.max(initial=0) < len(self._proj):
            model._proj = self._proj
        return model

    @property
    def projections(self) -> np.ndarray:
        """``P_r = L W^r`` for r = 0..max rounds, stored as (R, N, leads)."""
        if self._proj is None:
            r_max = int(self.rounds.max(initial=0))
            proj = np.empty((r_max + 1, self.mesh.n_nodes, self.lead_field.shape[0]))
            cur = self.lead_field.T.copy()
            proj[0] = cur
            wt = self.weights.matrix.T.tocsr() if r_max else None
            for r in range(1, r_max + 1):
                cur = wt @ cur
                proj[r] = cur
            self._proj = np.ascontiguousarray(proj)
        return self._proj

    def apd_map(self, theta: ApdGradientParams) -> np.ndarray:
        theta.check_table(self.table)
        return compute_apd_map(self.coords, theta)

    def field(self, theta: ApdGradientParams, smooth: bool = True) -> MembraneField:
        raw = assemble_membrane_field(self.t_a, self.apd_map(theta), self.table, self.duration)
        if not smooth or self.weights is None:
            return raw
        return smooth_field(raw, self.weights, self.rounds)

    def raw_ecg(self, theta: ApdGradientParams) -> EcgSignal:
        rows = table_rows_for(self.apd_map(theta), self.table)
        out = _fast_ecg(self.t_a, rows.astype(np.int64), self.table.traces, float(self.table.u_rest),
                        self.projections, self.rounds)
        return EcgSignal(out)

    def ecg(self, theta: ApdGradientParams) -> EcgSignal:
        return normalize_ecg(self.raw_ecg(theta))

    def st_segment(self, signal: EcgSignal) -> EcgSignal:
        """Crop a (normalised) ECG to the ST-T window used for inference."""
        return EcgSignal(signal.leads[:, int(self.st_start):], signal.names)

    def st_ecg(self, theta: ApdGradientParams) -> EcgSignal:
        """Normalised ECG restricted to the ST-T window."""
        return self.st_segment(self.ecg(theta))

    def biomarkers(self, theta: ApdGradientParams):
        return compute_t_biomarkers(self.ecg(theta), self.qrs_onset, self.st_start)

    def __call__(self, theta) -> EcgSignal:
        if not isinstance(theta, ApdGradientParams):
            theta = ApdGradientParams.from_array(theta)
        return self.ecg(theta)
