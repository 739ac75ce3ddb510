"""Dofetilide dose-response on a sampled sub-population."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cellular import (
    DiffusiveCurrentParams,
    MsCellModel,
    TableConstructionError,
    rebuild_table,
)
from .ecg import EcgError, compute_t_biomarkers
from .repolarisation import ApdGradientParams, RepolarisationError

# Share of the lumped MS outward current standing in for I_Kr.  Blocking the
# whole current by more than ~0.62 makes the surrogate self-oscillate, which
# the measured Dofetilide block fractions (up to 0.75) would otherwise hit.
IKR_SHARE = 0.75
DRUG_DURATION = 700


class TherapyError(ValueError):
    pass


@dataclass(frozen=True)
class DoseTable:
    concentrations: tuple
    blocks: tuple
    name: str = ""

    def __post_init__(self):
        c = np.asarray(self.concentrations, dtype=float)
        b = np.asarray(self.blocks, dtype=float)
        if len(c) != len(b) or len(c) == 0:
            raise TherapyError("dose table needs matching, non-empty concentration and block lists")
        if np.any(np.diff(c) <= 0):
            raise TherapyError("concentrations must be strictly increasing")
        if np.any(np.diff(b) < 0):
            raise TherapyError("block fractions must be non-decreasing")
        if np.any((b < 0) | (b >= 1)):
            raise TherapyError("block fractions must lie in [0, 1)")

    def __len__(self) -> int:
        return len(self.concentrations)

    def __getitem__(self, k: int) -> tuple[float, float]:
        return self.concentrations[k], self.blocks[k]

    def __iter__(self):
        return iter(zip(self.concentrations, self.blocks))


def dofetilide_table() -> DoseTable:
    """I_Kr block (fraction) per Dofetilide concentration (nM)."""
    return DoseTable(
        (0.05, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0),
        (0.40, 0.50, 0.60, 0.66, 0.70, 0.73, 0.75),
        "dofetilide",
    )


def load_dose_table(path) -> DoseTable:
    """CSV with header ``concentration_nM,block``."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
    if header != "concentration_nM,block":
        raise TherapyError(f"{path}: header must be concentration_nM,block")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return DoseTable(tuple(data[:, 0].tolist()), tuple(data[:, 1].tolist()), str(path))


def resolve_doses(spec: str) -> DoseTable:
    """``"dofetilide"`` or the path of a dose CSV."""
    if spec == "dofetilide":
        return dofetilide_table()
    return load_dose_table(spec)


def apply_block(model: MsCellModel, block: float, share: float = 1.0) -> MsCellModel:
    """Reduce the outward current by ``share * block``: ``tau_out / (1 - share * block)``.

    With the default ``share=1`` the whole outward current is blocked.
    """
    if not 0 <= block < 1:
        raise TherapyError("block must lie in [0, 1)")
    if not 0 < share <= 1:
        raise TherapyError("share must lie in (0, 1]")
    if block == 0:
        return model
    return model.replace(tau_out=model.tau_out / (1.0 - share * block))


def sample_size(n: int, fraction: float) -> int:
    if not 0 < fraction <= 1:
        raise TherapyError("sample_fraction must lie in (0, 1]")
    return max(1, math.ceil(round(fraction * n, 9)))


def sample_population(thetas: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Indices of a seeded random subset of ``ceil(fraction * n)`` particles."""
    k = sample_size(len(thetas), fraction)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(len(thetas), size=k, replace=False))


class DrugPipeline:
    """theta x block -> T-wave biomarkers, rebuilding the lookup table per block.

    ``forward`` is a :class:`twin.simulation.ForwardModel` whose table carries
    ``tau_close`` metadata.  Blocked tables keep each row's baseline APD label
    so every node keeps its cell identity; only the dynamics change.
    """

    def __init__(self, forward, model: MsCellModel | None = None,
                 stim: DiffusiveCurrentParams | None = None, share: float = IKR_SHARE,
                 duration: int = DRUG_DURATION, beats: int = 10, dt: float = 0.01):
        self.model = model or MsCellModel()
        self.stim = stim or DiffusiveCurrentParams()
        self.share = share
        self.beats = beats
        self.dt = dt
        self.base = forward.with_table(forward.table, duration)
        self._models = {0.0: self.base}

    def forward_for(self, block: float):
        block = float(block)
        if block not in self._models:
            blocked = apply_block(self.model, block, self.share)
            table = rebuild_table(self.base.table, blocked, self.stim, beats=self.beats, dt=self.dt)
            self._models[block] = self.base.with_table(table)
        return self._models[block]

    def __call__(self, theta: ApdGradientParams, block: float):
        fm = self.forward_for(block)
        return compute_t_biomarkers(fm.ecg(theta), fm.qrs_onset, fm.st_start)


@dataclass
class DoseResponse:
    doses: list  # (dose_nM, block) including the 0 baseline
    qt: np.ndarray  # (n_doses, n_models), nan where failed
    tpe: np.ndarray
    thetas: np.ndarray
    flagged: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        for k, (dose, block) in enumerate(self.doses):
            qt = self.qt[k][np.isfinite(self.qt[k])]
            tpe = self.tpe[k][np.isfinite(self.tpe[k])]
            ddof = 1 if len(qt) > 1 else 0
            out.append({
                "dose_nM": dose, "block": block,
                "qt_mean": float(qt.mean()) if len(qt) else float("nan"),
                "qt_sd": float(qt.std(ddof=ddof)) if len(qt) else float("nan"),
                "tpe_mean": float(tpe.mean()) if len(tpe) else float("nan"),
                "tpe_sd": float(tpe.std(ddof=ddof)) if len(tpe) else float("nan"),
                "n": int(len(qt)),
            })
        return out

    def save_csv(self, path) -> None:
        keys = ("dose_nM", "block", "qt_mean", "qt_sd", "tpe_mean", "tpe_sd", "n")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(keys) + "\n")
            for row in self.rows():
                fh.write(",".join(repr(row[k]) if k != "n" else str(row[k]) for k in keys) + "\n")


def run_dose_response(population, pipeline, doses: DoseTable | None = None,
                      sample_fraction: float = 0.05, seed: int = 0) -> DoseResponse:
    """Evaluate QT and Tpe for a sampled subset at baseline and every dose.

    ``population`` is a Population or an (n, 6) theta array; ``pipeline``
    maps ``(theta, block)`` to T-wave biomarkers.  A dose whose table cannot
    be rebuilt is flagged and left as nan; the others proceed.
    """
    doses = doses or dofetilide_table()
    thetas = np.asarray(getattr(population, "thetas", population), dtype=float)
    if len(thetas) == 0:
        raise TherapyError("population is empty")
    chosen = thetas[sample_population(thetas, sample_fraction, seed)]
    schedule = [(0.0, 0.0)] + [(float(c), float(b)) for c, b in doses]
    qt = np.full((len(schedule), len(chosen)), np.nan)
    tpe = np.full_like(qt, np.nan)
    flagged = {}
    for k, (dose, block) in enumerate(schedule):
        for j, row in enumerate(chosen):
            try:
                bm = pipeline(ApdGradientParams.from_array(row), block)
            except TableConstructionError as exc:
                flagged[dose] = str(exc)
                break
            except (EcgError, RepolarisationError) as exc:
                flagged.setdefault(dose, str(exc))
                continue
            qt[k, j], tpe[k, j] = bm.qt, bm.tpe
    return DoseResponse(schedule, qt, tpe, chosen, flagged)
