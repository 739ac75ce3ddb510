"""Saltelli sampling and Sobol first-order / total-effect indices."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm, qmc

from .repolarisation import PARAM_NAMES

# uniform prior ranges for (g_ab, g_tm, g_pa, g_tv, apd_min, apd_max)
PRIOR_BOUNDS = ((-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0), (180.0, 230.0), (270.0, 300.0))
OUTPUT_NAMES = ("qt", "tpe", "t_amplitude", "t_polarity", "tpeak_dispersion_v3_v5")


class SensitivityError(ValueError):
    pass


def _check_bounds(bounds) -> np.ndarray:
    b = np.asarray(bounds, dtype=float)
    if b.ndim != 2 or b.shape[1] != 2 or np.any(b[:, 1] <= b[:, 0]):
        raise SensitivityError("bounds must be a list of (lo, hi) pairs with lo < hi")
    return b


def saltelli_sample(bounds, base_n: int, seed: int) -> np.ndarray:
    """``base_n * (2d + 2)`` rows laid out per base point as A, AB_1..AB_d, BA_1..BA_d, B.

    ``AB_i`` is A with column i taken from B, ``BA_i`` the reverse.  Base
    points come from a scrambled Sobol sequence in 2d dimensions.
    """
    b = _check_bounds(bounds)
    if base_n < 1 or base_n & (base_n - 1):
        raise SensitivityError("base_n must be a power of two")
    d = len(b)
    base = qmc.Sobol(d=2 * d, scramble=True, seed=seed).random(base_n)
    a, bb = base[:, :d], base[:, d:]
    rows = np.empty((base_n, 2 * d + 2, d))
    rows[:, 0] = a
    for i in range(d):
        rows[:, 1 + i] = a
        rows[:, 1 + i, i] = bb[:, i]
        rows[:, 1 + d + i] = bb
        rows[:, 1 + d + i, i] = a[:, i]
    rows[:, -1] = bb
    rows = rows.reshape(-1, d)
    return b[:, 0] + rows * (b[:, 1] - b[:, 0])


@dataclass
class SobolResult:
    names: tuple
    S1: np.ndarray
    S1_ci: np.ndarray
    ST: np.ndarray
    ST_ci: np.ndarray
    degenerate: bool = False
    n_failed: int = 0
    pearson: np.ndarray | None = None

    def ranking(self, key: str = "ST") -> list[str]:
        values = getattr(self, key)
        return [self.names[i] for i in np.argsort(-values, kind="stable")]

    def to_dict(self) -> dict:
        return {n: {"S1": float(self.S1[i]), "S1_ci": float(self.S1_ci[i]),
                    "ST": float(self.ST[i]), "ST_ci": float(self.ST_ci[i])}
                for i, n in enumerate(self.names)}


def _estimates(fa, fb, fab):
    pooled = np.concatenate([fa, fb])
    var = np.var(pooled)
    if var <= 0:
        return np.zeros(fab.shape[1]), np.zeros(fab.shape[1]), True
    # centring makes the first-order estimate exactly shift-invariant
    c = pooled.mean()
    fa, fb, fab = fa - c, fb - c, fab - c
    s1 = np.mean(fb[:, None] * (fab - fa[:, None]), axis=0) / var
    st = 0.5 * np.mean((fa[:, None] - fab) ** 2, axis=0) / var
    return s1, st, False


def sobol_indices(samples, outputs, names=None, n_bootstrap: int = 100, seed: int = 0,
                  confidence: float = 0.95) -> SobolResult:
    """Saltelli (2010) first-order and Jansen total-effect estimators.

    ``outputs`` aligns with :func:`saltelli_sample` rows.  Non-finite outputs
    mark failed forward runs; each index uses the base points whose A, B and
    AB_i values are all finite.  Confidence half-widths come from resampling
    base points ``n_bootstrap`` times.
    """
    samples = np.asarray(samples, dtype=float)
    y = np.asarray(outputs, dtype=float)
    d = samples.shape[1]
    block = 2 * d + 2
    if len(y) != len(samples) or len(y) % block:
        raise SensitivityError("outputs must align with a Saltelli sample matrix")
    names = tuple(names or (PARAM_NAMES if d == len(PARAM_NAMES) else [f"x{i}" for i in range(d)]))
    y = y.reshape(-1, block)
    fa, fb, fab = y[:, 0], y[:, -1], y[:, 1 : 1 + d]
    n_failed = int((~np.isfinite(y)).sum())
    rng = np.random.default_rng(seed)
    z = norm.ppf(0.5 + confidence / 2)
    s1 = np.zeros(d)
    st = np.zeros(d)
    s1_ci = np.zeros(d)
    st_ci = np.zeros(d)
    degenerate = False
    for i in range(d):
        ok = np.isfinite(fa) & np.isfinite(fb) & np.isfinite(fab[:, i])
        if ok.sum() < 2:
            raise SensitivityError(f"too few valid rows for parameter {names[i]}")
        a, b, ab = fa[ok], fb[ok], fab[ok, i : i + 1]
        e1, et, degen = _estimates(a, b, ab)
        degenerate |= degen
        s1[i], st[i] = e1[0], et[0]
        if degen:
            continue
        idx = rng.integers(0, len(a), size=(n_bootstrap, len(a)))
        boot1 = np.empty(n_bootstrap)
        boott = np.empty(n_bootstrap)
        for k in range(n_bootstrap):
            r1, rt, _ = _estimates(a[idx[k]], b[idx[k]], ab[idx[k]])
            boot1[k], boott[k] = r1[0], rt[0]
        s1_ci[i] = z * np.std(boot1, ddof=1)
        st_ci[i] = z * np.std(boott, ddof=1)
    return SobolResult(names, s1, s1_ci, st, st_ci, degenerate, n_failed)


def pearson_matrix(samples: np.ndarray, outputs: np.ndarray) -> np.ndarray:
    """Correlation of each parameter column with ``outputs``, ignoring failed rows."""
    ok = np.isfinite(outputs)
    x, y = samples[ok], outputs[ok]
    xc = x - x.mean(axis=0)
    yc = y - y.mean()
    denom = np.sqrt((xc**2).sum(axis=0) * (yc**2).sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (xc * yc[:, None]).sum(axis=0) / denom
    return np.where(denom > 0, r, 0.0)


def biomarker_outputs(bm) -> dict:
    return {
        "qt": bm.qt,
        "tpe": bm.tpe,
        "t_amplitude": bm.t_amplitude,
        "t_polarity": bm.mean_polarity,
        "tpeak_dispersion_v3_v5": bm.tpeak_dispersion_v3_v5,
    }


def evaluate_outputs(pipeline, samples: np.ndarray, outputs=OUTPUT_NAMES) -> np.ndarray:
    """Run ``pipeline`` on every row; failures (any exception) give nan rows.

    ``pipeline`` returns T-wave biomarkers or a mapping of output values.
    """
    y = np.full((len(samples), len(outputs)), np.nan)
    for k, row in enumerate(samples):
        try:
            res = pipeline(row)
        except (ValueError, RuntimeError, ArithmeticError):
            continue
        vals = res if isinstance(res, dict) else biomarker_outputs(res)
        y[k] = [vals[name] for name in outputs]
    return y


def run_sensitivity(pipeline, bounds=PRIOR_BOUNDS, base_n: int = 64, seed: int = 0,
                    outputs=OUTPUT_NAMES, names=PARAM_NAMES, n_bootstrap: int = 100):
    """Full Saltelli sweep; returns ``{output: SobolResult}`` with Pearson r attached."""
    samples = saltelli_sample(bounds, base_n, seed)
    y = evaluate_outputs(pipeline, samples, outputs)
    results = {}
    for j, name in enumerate(outputs):
        res = sobol_indices(samples, y[:, j], names, n_bootstrap=n_bootstrap, seed=seed)
        res.pearson = pearson_matrix(samples, y[:, j])
        results[name] = res
    return results


def save_sobol_csv(results: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("output,parameter,S1,S1_ci,ST,ST_ci,pearson\n")
        for out, res in results.items():
            for i, p in enumerate(res.names):
                pr = res.pearson[i] if res.pearson is not None else float("nan")
                fh.write(f"{out},{p},{res.S1[i]!r},{res.S1_ci[i]!r},{res.ST[i]!r},{res.ST_ci[i]!r},{float(pr)!r}\n")
