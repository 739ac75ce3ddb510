"""Mitchell-Schaeffer action potentials, cell biomarkers and lookup tables.

The lookup table maps an integer APD90 (ms) to a membrane-potential trace
sampled every 1 ms from the action-potential peak.  Rows are generated by
bisecting the gate-closing time constant of the Mitchell-Schaeffer model
until the measured APD90 matches the row label.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from scipy.optimize import minimize_scalar

# voltage-only rows of the calibration table: (lo, hi)
CALIBRATION_RANGES = {
    "apd40": (85.0, 320.0),
    "apd50": (110.0, 350.0),
    "apd90": (180.0, 440.0),
    "triangulation": (50.0, 150.0),
    "dvdt_max": (100.0, 1000.0),
    "v_peak": (10.0, 55.0),
    "rmp": (-95.0, -80.0),
    "ctd50": (120.0, 420.0),
    "ctd90": (220.0, 785.0),
}
# the surrogate has no calcium transient and a slow upstroke, see README
MS_FILTER_KEYS = ("apd90", "v_peak", "rmp")

TABLE_T = 600
DEFAULT_APD_RANGE = (180, 300)


class CellModelError(ValueError):
    pass


class TableConstructionError(RuntimeError):
    pass


class TableFileError(ValueError):
    pass


@dataclass(frozen=True)
class MsCellModel:
    """Two-current Mitchell-Schaeffer model; time constants in ms."""

    tau_in: float = 0.3
    tau_out: float = 6.0
    tau_open: float = 120.0
    tau_close: float = 150.0
    v_gate: float = 0.13
    u_rest: float = -85.0
    u_peak: float = 30.0

    def __post_init__(self):
        if min(self.tau_in, self.tau_out, self.tau_open, self.tau_close) <= 0:
            raise CellModelError("time constants must be positive")
        if not 0 < self.v_gate < 1:
            raise CellModelError("v_gate must lie in (0, 1)")
        if not self.u_peak > self.u_rest:
            raise CellModelError("u_peak must exceed u_rest")

    def replace(self, **changes) -> "MsCellModel":
        return dataclasses.replace(self, **changes)

    def to_mv(self, v):
        return self.u_rest + np.asarray(v) * (self.u_peak - self.u_rest)


@dataclass(frozen=True)
class DiffusiveCurrentParams:
    """Bi-Gaussian stimulus; amplitudes in uA/uF, centres and widths in ms.

    ``amplitude_scale`` is the height the positive lobe is rescaled to, or
    ``None`` to use the raw curve.
    """

    A1: float = 13.8
    A2: float = 14.4
    mu1: float = 14.1
    mu2: float = 15.3
    sigma1: float = 1.9
    sigma2: float = 1.8
    amplitude_scale: float | None = 11.0

    def __post_init__(self):
        if self.sigma1 <= 0 or self.sigma2 <= 0:
            raise CellModelError("stimulus widths must be positive")
        if self.A1 < 0 or self.A2 < 0:
            raise CellModelError("stimulus amplitudes must be non-negative")
        if self.amplitude_scale is not None and self.amplitude_scale < 0:
            raise CellModelError("amplitude_scale must be non-negative")

    def replace(self, **changes) -> "DiffusiveCurrentParams":
        return dataclasses.replace(self, **changes)

    @property
    def duration(self) -> float:
        """Time after which both lobes are below 1e-22 of their height."""
        return max(self.mu1 + 10 * self.sigma1, self.mu2 + 10 * self.sigma2)


def _raw_current(t, p: DiffusiveCurrentParams):
    t = np.asarray(t, dtype=float)
    return p.A1 * np.exp(-((t - p.mu1) ** 2) / (2 * p.sigma1**2)) - p.A2 * np.exp(
        -((t - p.mu2) ** 2) / (2 * p.sigma2**2)
    )


def positive_peak(p: DiffusiveCurrentParams) -> float:
    """Height of the positive lobe of the raw bi-Gaussian (0 if none)."""
    grid = np.linspace(0.0, p.duration, 20001)
    vals = _raw_current(grid, p)
    k = int(np.argmax(vals))
    if vals[k] <= 0:
        return 0.0
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    res = minimize_scalar(lambda x: -_raw_current(x, p), bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-10})
    return float(max(vals[k], -res.fun))


def diffusive_current(t, p: DiffusiveCurrentParams, rescale: bool = True):
    """Stimulus current in uA/uF at time(s) ``t`` ms after the beat onset."""
    raw = _raw_current(t, p)
    if not rescale or p.amplitude_scale is None:
        return raw
    peak = positive_peak(p)
    if peak <= 0:
        return np.zeros_like(raw) if np.ndim(raw) else 0.0
    return raw * (p.amplitude_scale / peak)


@dataclass(eq=False)
class ActionPotential:
    """Last simulated beat: ``v`` in mV on a 1-ms grid, plus the raw trace."""

    v: np.ndarray
    raw: np.ndarray
    raw_dt: float
    excited: bool
    dvdt_max: float

    @property
    def t(self) -> np.ndarray:
        return np.arange(len(self.v), dtype=float)


@numba.njit(cache=True)
def _ms_integrate(tau_in, tau_out, tau_open, tau_close, v_gate, stim, n_cycle, beats, dt):
    v = 0.0
    h = 1.0
    last = np.empty(n_cycle)
    beat_max = np.empty(beats)
    n_stim = stim.shape[0]
    for b in range(beats):
        vmax = v
        for k in range(n_cycle):
            i_stim = stim[k] if k < n_stim else 0.0
            dv = h * v * v * (1.0 - v) / tau_in - v / tau_out + i_stim
            if v < v_gate:
                dh = (1.0 - h) / tau_open
            else:
                dh = -h / tau_close
            v += dt * dv
            h += dt * dh
            if v > vmax:
                vmax = v
            if b == beats - 1:
                last[k] = v
        beat_max[b] = vmax
    return last, beat_max


def integrate_ap(
    model: MsCellModel,
    stim: DiffusiveCurrentParams,
    cycle_length: float = 800.0,
    beats: int = 10,
    dt: float = 0.01,
) -> ActionPotential:
    """Pace the cell with the diffusive current and return the last beat.

    Forward Euler with fixed ``dt``; the stimulus is mapped onto the
    dimensionless voltage scale by dividing by ``u_peak - u_rest``.
    ``excited`` is False if any beat failed to cross ``v_gate``.
    """
    if dt > 0.02:
        raise CellModelError("dt must be <= 0.02 ms to resolve the upstroke")
    if beats < 1:
        raise CellModelError("beats must be >= 1")
    steps_per_ms = int(round(1.0 / dt))
    if abs(steps_per_ms * dt - 1.0) > 1e-9:
        raise CellModelError("1 ms must be an integer number of steps")
    n_cycle = int(round(cycle_length * steps_per_ms))
    span = model.u_peak - model.u_rest
    t_stim = np.arange(int(np.ceil(stim.duration / dt))) * dt
    stim_dimless = np.asarray(diffusive_current(t_stim, stim), dtype=float) / span
    raw_v, beat_max = _ms_integrate(
        model.tau_in, model.tau_out, model.tau_open, model.tau_close, model.v_gate,
        stim_dimless, n_cycle, int(beats), dt,
    )
    raw = model.to_mv(raw_v)
    dvdt = np.diff(raw) / dt
    return ActionPotential(
        v=raw[steps_per_ms - 1 :: steps_per_ms].copy(),
        raw=raw,
        raw_dt=dt,
        excited=bool(np.all(beat_max > model.v_gate)),
        dvdt_max=float(dvdt.max()) if len(dvdt) else 0.0,
    )


@dataclass
class CellBiomarkers:
    apd40: float
    apd50: float
    apd90: float
    triangulation: float
    dvdt_max: float
    v_peak: float
    rmp: float
    ctd50: float | None = None
    ctd90: float | None = None

    def violations(self, keys=MS_FILTER_KEYS) -> list[str]:
        out = []
        for key in keys:
            value = getattr(self, key)
            if value is None:
                continue
            lo, hi = CALIBRATION_RANGES[key]
            if not lo <= value <= hi:
                out.append(f"{key}={value:.2f} outside [{lo}, {hi}]")
        return out


def _repol_time(v: np.ndarray, dt: float, peak: int, level: float) -> float:
    below = np.flatnonzero(v[peak:] < level)
    if len(below) == 0:
        return np.nan
    k = peak + int(below[0])
    v0, v1 = v[k - 1], v[k]
    return (k - 1 + (v0 - level) / (v0 - v1)) * dt


def measure_apd(v: np.ndarray, dt: float = 1.0, fraction: float = 0.9) -> float:
    """APD from the peak to ``fraction`` repolarisation; nan if never reached."""
    v = np.asarray(v, dtype=float)
    peak = int(np.argmax(v))
    rmp = float(v.min())
    level = v[peak] - fraction * (v[peak] - rmp)
    return _repol_time(v, dt, peak, level) - peak * dt


def compute_cell_biomarkers(trace, dt: float = 1.0, dvdt_max: float | None = None) -> CellBiomarkers:
    """Voltage biomarkers of a single action potential.

    ``trace`` is an array in mV sampled every ``dt`` ms, or an
    :class:`ActionPotential` (whose raw trace supplies ``dvdt_max``).
    """
    if isinstance(trace, ActionPotential):
        dvdt_max = trace.dvdt_max if dvdt_max is None else dvdt_max
        trace = trace.v
        dt = 1.0
    v = np.asarray(trace, dtype=float)
    if v.ndim != 1 or len(v) < 3:
        raise CellModelError("trace must be a 1-D series with at least 3 samples")
    peak = int(np.argmax(v))
    v_peak = float(v[peak])
    rmp = float(v.min())
    if v_peak - rmp < 10.0:
        raise CellModelError("trace has no upstroke")
    apds = {}
    for x in (40, 50, 90):
        level = v_peak - x / 100.0 * (v_peak - rmp)
        t_cross = _repol_time(v, dt, peak, level)
        if np.isnan(t_cross):
            raise CellModelError(f"trace does not reach {x}% repolarisation")
        apds[x] = t_cross - peak * dt
    if dvdt_max is None:
        dvdt_max = float(np.max(np.diff(v)) / dt)
    return CellBiomarkers(
        apd40=apds[40],
        apd50=apds[50],
        apd90=apds[90],
        triangulation=apds[90] - apds[40],
        dvdt_max=float(dvdt_max),
        v_peak=v_peak,
        rmp=rmp,
    )


@dataclass(eq=False)
class LookupTable:
    """APD-indexed action-potential traces (mV, 1-ms samples from the peak).

    ``tau_close`` and ``amplitude_scale`` record how surrogate rows were
    generated; they are absent for imported tables.
    """

    apd_values: np.ndarray
    traces: np.ndarray
    u_rest: float
    tau_close: np.ndarray | None = None
    amplitude_scale: float | None = None
    measured_apd: np.ndarray | None = None  # APD90 per row when it differs from the label

    def __post_init__(self):
        self.apd_values = np.asarray(self.apd_values, dtype=np.int64)
        self.traces = np.ascontiguousarray(self.traces, dtype=np.float64)

    @property
    def t_max(self) -> int:
        return self.traces.shape[1]

    @property
    def apd_range(self) -> tuple[int, int]:
        return int(self.apd_values[0]), int(self.apd_values[-1])

    def row_index(self, apd) -> np.ndarray:
        """Row index for integer APD keys; -1 where no row exists."""
        apd = np.asarray(apd, dtype=np.int64)
        pos = np.searchsorted(self.apd_values, apd)
        pos_c = np.clip(pos, 0, len(self.apd_values) - 1)
        return np.where(self.apd_values[pos_c] == apd, pos_c, -1)

    def row(self, apd: int) -> np.ndarray:
        idx = int(self.row_index(apd))
        if idx < 0:
            raise KeyError(f"no lookup-table row for APD {apd}")
        return self.traces[idx]

    def validation_errors(self, apd_tol: float = 1.0, rest_tol: float = 1.0) -> list[str]:
        errors = []
        if self.traces.ndim != 2 or self.traces.shape[0] != len(self.apd_values):
            return ["row count does not match the number of APD values"]
        if np.any(np.diff(self.apd_values) <= 0):
            errors.append("apd_values are not strictly increasing")
        if not np.all(np.isfinite(self.traces)):
            errors.append("traces contain non-finite values")
        for r, label in enumerate(self.apd_values):
            trace = self.traces[r]
            try:
                apd = compute_cell_biomarkers(trace).apd90
            except CellModelError as exc:
                errors.append(f"row {r} (APD {label}): {exc}")
                continue
            if abs(apd - label) > apd_tol:
                errors.append(f"row {r}: measured APD90 {apd:.2f} differs from label {label}")
            if abs(trace[-1] - self.u_rest) > rest_tol:
                errors.append(f"row {r}: trace ends at {trace[-1]:.2f} mV, not at rest")
        return errors

    def validate(self, **kw) -> "LookupTable":
        errors = self.validation_errors(**kw)
        if errors:
            raise TableFileError("; ".join(errors))
        return self


def _row_from_ap(ap: ActionPotential, t_max: int) -> np.ndarray:
    step = int(round(1.0 / ap.raw_dt))
    peak = int(np.argmax(ap.raw))
    idx = peak + step * np.arange(t_max)
    idx = np.minimum(idx, len(ap.raw) - 1)
    return ap.raw[idx]


@dataclass
class _Sim:
    model: MsCellModel
    stim: DiffusiveCurrentParams
    cycle_length: float
    beats: int
    dt: float

    def run(self, tau_close: float) -> ActionPotential:
        return integrate_ap(self.model.replace(tau_close=tau_close), self.stim,
                            self.cycle_length, self.beats, self.dt)

    def apd(self, tau_close: float) -> float:
        ap = self.run(tau_close)
        if not ap.excited:
            return np.nan
        return measure_apd(ap.raw, ap.raw_dt)


def _bisect_tau(sim: _Sim, target: float, lo: float, hi: float, apd_lo: float, apd_hi: float,
                tol: float = 0.5, max_iter: int = 60) -> float:
    for _ in range(max_iter):
        # regula falsi step, falling back to bisection when it stalls
        mid = lo + (target - apd_lo) * (hi - lo) / (apd_hi - apd_lo)
        if not lo < mid < hi or (hi - lo) < 1e-9:
            mid = 0.5 * (lo + hi)
        apd = sim.apd(mid)
        if np.isnan(apd):
            raise TableConstructionError(f"APD {target:g}: failed excitation at tau_close={mid:.3f}")
        if abs(apd - target) <= tol:
            return mid
        if apd < target:
            lo, apd_lo = mid, apd
        else:
            hi, apd_hi = mid, apd
    raise TableConstructionError(f"APD {target:g}: bisection did not converge")


def minimum_excitation_amplitude(
    model: MsCellModel,
    stim: DiffusiveCurrentParams,
    tau_closes,
    granularity: float = 0.5,
    max_amplitude: float = 100.0,
    cycle_length: float = 800.0,
    beats: int = 10,
    dt: float = 0.01,
) -> float:
    """Smallest amplitude on a ``granularity`` grid exciting every model."""

    def excites_all(amp: float) -> bool:
        s = stim.replace(amplitude_scale=amp)
        return all(
            integrate_ap(model.replace(tau_close=tc), s, cycle_length, beats, dt).excited
            for tc in tau_closes
        )

    lo, hi = 0, int(round(max_amplitude / granularity))
    if not excites_all(hi * granularity):
        raise TableConstructionError(f"no amplitude up to {max_amplitude} excites every model")
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if excites_all(mid * granularity):
            hi = mid
        else:
            lo = mid
    return hi * granularity


def build_lookup_table(
    model: MsCellModel | None = None,
    stim: DiffusiveCurrentParams | None = None,
    apd_lo: int = DEFAULT_APD_RANGE[0],
    apd_hi: int = DEFAULT_APD_RANGE[1],
    t_max: int = TABLE_T,
    cycle_length: float = 800.0,
    beats: int = 10,
    dt: float = 0.01,
    tau_bracket: tuple[float, float] = (40.0, 300.0),
    calibrate_amplitude: bool = True,
    filter_keys=MS_FILTER_KEYS,
) -> LookupTable:
    """Build one row per integer APD in ``[apd_lo, apd_hi]``.

    Each row's ``tau_close`` is bisected until the measured APD90 is within
    0.5 ms of the label.  With ``calibrate_amplitude`` the stimulus is then
    rescaled to the smallest 0.5 uA/uF step that excites every row's model and
    the rows are rebuilt until the amplitude is stable.  Rows whose voltage
    biomarkers fall outside the calibration ranges are rejected.
    """
    model = model or MsCellModel()
    stim = stim or DiffusiveCurrentParams()
    if not apd_lo <= apd_hi:
        raise TableConstructionError("apd_lo must not exceed apd_hi")
    targets = np.arange(int(apd_lo), int(apd_hi) + 1)

    for _ in range(4):
        sim = _Sim(model, stim, cycle_length, beats, dt)
        taus = _solve_taus(sim, targets, tau_bracket)
        if not calibrate_amplitude:
            break
        amp = minimum_excitation_amplitude(model, stim, taus, cycle_length=cycle_length,
                                           beats=beats, dt=dt)
        if stim.amplitude_scale is not None and abs(amp - stim.amplitude_scale) < 1e-12:
            break
        stim = stim.replace(amplitude_scale=amp)
    else:
        raise TableConstructionError("stimulus amplitude calibration did not settle")

    rows = []
    for target, tau in zip(targets, taus):
        ap = sim.run(tau)
        if not ap.excited:
            raise TableConstructionError(f"APD {target}: failed excitation")
        bm = compute_cell_biomarkers(ap)
        bad = bm.violations(filter_keys)
        if bad:
            raise TableConstructionError(f"APD {target}: calibration filter rejects " + ", ".join(bad))
        rows.append(_row_from_ap(ap, t_max))
    return LookupTable(targets, np.array(rows), model.u_rest, np.asarray(taus),
                       stim.amplitude_scale)


def _solve_taus(sim: _Sim, targets: np.ndarray, bracket) -> np.ndarray:
    # coarse sweep first so every bisection starts from a tight bracket
    grid = np.geomspace(bracket[0], bracket[1], 33)
    apds = np.array([sim.apd(tc) for tc in grid])
    taus = np.empty(len(targets))
    for i, target in enumerate(targets):
        ok = ~np.isnan(apds)
        below = np.flatnonzero(ok & (apds <= target))
        above = np.flatnonzero(ok & (apds >= target))
        if not len(below) or not len(above):
            if not ok.any():
                raise TableConstructionError(f"APD {target}: failed excitation for every tau_close")
            raise TableConstructionError(f"APD {target}: not bracketed by tau_close in {bracket}")
        a = below[below < above[-1]]
        b = above[above > (a[-1] if len(a) else -1)]
        if not len(a) or not len(b):
            raise TableConstructionError(f"APD {target}: not bracketed by tau_close in {bracket}")
        lo_i, hi_i = a[-1], b[0]
        if abs(apds[lo_i] - target) <= 0.5:
            taus[i] = grid[lo_i]
            continue
        if abs(apds[hi_i] - target) <= 0.5:
            taus[i] = grid[hi_i]
            continue
        taus[i] = _bisect_tau(sim, float(target), grid[lo_i], grid[hi_i], apds[lo_i], apds[hi_i])
    return taus


def rebuild_table(table: LookupTable, model: MsCellModel, stim: DiffusiveCurrentParams,
                  cycle_length: float = 800.0, beats: int = 10, dt: float = 0.01,
                  t_max: int | None = None) -> LookupTable:
    """Regenerate each row of a surrogate table under a modified cell model.

    Row labels keep their baseline APD so nodes keep their row identity; the
    traces carry the modified dynamics and ``measured_apd`` their new APD90.
    """
    if table.tau_close is None:
        raise TableConstructionError("table has no tau_close metadata to rebuild from")
    t_max = t_max or table.t_max
    if table.amplitude_scale is not None:
        stim = stim.replace(amplitude_scale=table.amplitude_scale)
    rows, measured = [], []
    for label, tau in zip(table.apd_values, table.tau_close):
        ap = integrate_ap(model.replace(tau_close=float(tau)), stim, cycle_length, beats, dt)
        if not ap.excited:
            raise TableConstructionError(f"APD {label}: failed excitation under modified model")
        rows.append(_row_from_ap(ap, t_max))
        measured.append(measure_apd(ap.raw, ap.raw_dt))
    return LookupTable(table.apd_values.copy(), np.array(rows), model.u_rest,
                       table.tau_close.copy(), table.amplitude_scale, np.array(measured))


def _meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def save_lookup_table(table: LookupTable, path) -> None:
    """CSV with header ``apd,u_rest,t0,...,t{T-1}``, one row per APD.

    Surrogate generation metadata (``tau_close``, ``amplitude_scale``) goes to
    a ``<path>.meta.json`` sidecar so drug tables can be rebuilt later.
    """
    if table.tau_close is not None:
        meta = {"tau_close": [float(x) for x in table.tau_close],
                "amplitude_scale": table.amplitude_scale}
        _meta_path(path).write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")
    header = ["apd", "u_rest"] + [f"t{k}" for k in range(table.t_max)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for label, trace in zip(table.apd_values, table.traces):
            fh.write(f"{int(label)},{table.u_rest!r}," + ",".join(repr(float(x)) for x in trace) + "\n")


def load_lookup_table(path, validate: bool = True) -> LookupTable:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    if header[:2] != ["apd", "u_rest"] or header[2:] != [f"t{k}" for k in range(len(header) - 2)]:
        raise TableFileError(f"{path}: unexpected header")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[0] == 0:
        raise TableFileError(f"{path}: no rows")
    apd = data[:, 0]
    if np.any(apd != np.round(apd)):
        raise TableFileError(f"{path}: non-integer APD label")
    u_rest = np.unique(data[:, 1])
    if len(u_rest) != 1:
        raise TableFileError(f"{path}: rows disagree on u_rest")
    table = LookupTable(apd.astype(np.int64), data[:, 2:], float(u_rest[0]))
    meta_path = _meta_path(path)
    if meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        tau = np.asarray(meta.get("tau_close", []), dtype=float)
        if len(tau) != len(table.apd_values):
            raise TableFileError(f"{meta_path}: tau_close length does not match the table")
        table.tau_close = tau
        table.amplitude_scale = meta.get("amplitude_scale")
    if validate:
        diffs = np.flatnonzero(np.diff(table.apd_values) <= 0)
        if len(diffs):
            raise TableFileError(f"{path}: apd_values not strictly increasing at row {int(diffs[0]) + 1}")
        errors = table.validation_errors()
        if errors:
            raise TableFileError(f"{path}: " + "; ".join(errors))
    return table
