"""SMC-ABC inference of APD gradient parameters from a target ECG.

Parameters live on a grid (2 ms for APDs, 0.1 for gradient weights) and are
handled internally as integer grid indices, which makes the uniqueness
criterion an exact count and lets forward evaluations be cached.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .ecg import discrepancy
from .repolarisation import PARAM_NAMES, ApdGradientParams
from .sensitivity import PRIOR_BOUNDS

log = logging.getLogger(__name__)

FORWARD_ERRORS = (ValueError, RuntimeError, ArithmeticError)


class InferenceError(ValueError):
    pass


@dataclass
class InferenceConfig:
    population_size: int = 256
    samples_per_iteration: int = 64
    discrepancy_cutoff: float = 0.5
    uniqueness_threshold: float = 0.5
    apd_grid: float = 2.0
    gradient_grid: float = 0.1
    bounds: tuple = PRIOR_BOUNDS
    seed: int = 0
    move_probability: float = 0.5
    max_iterations: int = 1000

    def __post_init__(self):
        self.bounds = tuple(tuple(float(v) for v in b) for b in self.bounds)
        if len(self.bounds) != 6 or any(lo > hi for lo, hi in self.bounds):
            raise InferenceError("bounds must be six (lo, hi) pairs with lo <= hi")
        if not self.discrepancy_cutoff > 0:
            raise InferenceError("discrepancy_cutoff must be positive")
        if not 0 < self.uniqueness_threshold <= 1:
            raise InferenceError("uniqueness_threshold must lie in (0, 1]")
        if self.apd_grid <= 0 or self.gradient_grid <= 0:
            raise InferenceError("grid resolutions must be positive")
        if self.population_size < 2:
            raise InferenceError("population_size must be at least 2")
        if not 1 <= self.samples_per_iteration < self.population_size:
            raise InferenceError("samples_per_iteration must lie in [1, population_size)")
        if not 0 < self.move_probability <= 1:
            raise InferenceError("move_probability must lie in (0, 1]")
        if self.max_iterations < 1:
            raise InferenceError("max_iterations must be at least 1")

    @property
    def steps(self) -> np.ndarray:
        return np.array([self.gradient_grid] * 4 + [self.apd_grid] * 2)

    def index_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        b = np.asarray(self.bounds)
        k_lo = np.ceil(b[:, 0] / self.steps - 1e-9).astype(np.int64)
        k_hi = np.floor(b[:, 1] / self.steps + 1e-9).astype(np.int64)
        if np.any(k_lo > k_hi):
            raise InferenceError("a parameter range contains no grid point")
        return k_lo, k_hi


@dataclass
class Particle:
    theta: ApdGradientParams
    discrepancy: float


@dataclass
class Population:
    thetas: np.ndarray
    discrepancies: np.ndarray
    iteration: int = 0
    thresholds: list = field(default_factory=list)
    best_history: list = field(default_factory=list)
    uniqueness_history: list = field(default_factory=list)
    termination: str | None = None
    n_forward: int = 0
    n_failed: int = 0

    @property
    def size(self) -> int:
        return len(self.thetas)

    @property
    def particles(self) -> list[Particle]:
        out = []
        for th, eps in zip(self.thetas, self.discrepancies):
            try:
                theta = ApdGradientParams.from_array(th)
            except ValueError:
                continue
            out.append(Particle(theta, float(eps)))
        return out

    def best(self) -> Particle:
        k = int(np.argmin(self.discrepancies))
        return Particle(ApdGradientParams.from_array(self.thetas[k]), float(self.discrepancies[k]))


def grid_index(values, config: InferenceConfig) -> np.ndarray:
    """Nearest grid index per value, ties toward negative infinity, clamped to bounds."""
    values = np.asarray(values, dtype=float)
    k = np.ceil(np.round(values / config.steps, 9) - 0.5).astype(np.int64)
    k_lo, k_hi = config.index_bounds()
    return np.clip(k, k_lo, k_hi)


def grid_values(idx, config: InferenceConfig) -> np.ndarray:
    return np.round(np.asarray(idx) * config.steps, 10)


def discretize_theta(theta, config: InferenceConfig):
    """Snap a parameter vector (or :class:`ApdGradientParams`) onto the grid."""
    if isinstance(theta, ApdGradientParams):
        return ApdGradientParams.from_array(grid_values(grid_index(theta.as_array(), config), config))
    return grid_values(grid_index(theta, config), config)


def latin_hypercube_sample(bounds, n: int, seed: int) -> np.ndarray:
    """Unsnapped LHS: each dimension split into ``n`` strata, one sample per stratum."""
    if n < 2:
        raise InferenceError("LHS needs at least two samples")
    b = np.asarray(bounds, dtype=float)
    u = qmc.LatinHypercube(d=len(b), seed=np.random.default_rng(seed)).random(n)
    return b[:, 0] + u * (b[:, 1] - b[:, 0])


def latin_hypercube_init(config: InferenceConfig) -> np.ndarray:
    """Grid-snapped initial population (values, not indices)."""
    raw = latin_hypercube_sample(config.bounds, config.population_size, config.seed)
    return discretize_theta(raw, config)


def uniqueness_fraction(pop) -> float:
    thetas = pop.thetas if isinstance(pop, Population) else np.asarray(pop)
    if len(thetas) == 0:
        raise InferenceError("empty population")
    return len(np.unique(np.round(thetas, 9), axis=0)) / len(thetas)


def _valid(values: np.ndarray) -> bool:
    return bool(values[4] < values[5])


def perturb(idx: np.ndarray, rng: np.random.Generator, config: InferenceConfig) -> np.ndarray:
    """One grid cell up or down per dimension with probability ``move_probability``,
    reflecting off the bounds."""
    k_lo, k_hi = config.index_bounds()
    moves = rng.random(len(idx)) < config.move_probability
    signs = np.where(rng.random(len(idx)) < 0.5, -1, 1)
    out = idx + moves * signs
    over, under = out > k_hi, out < k_lo
    out[over] = idx[over] - 1
    out[under] = idx[under] + 1
    return np.clip(out, k_lo, k_hi)


class _Evaluator:
    def __init__(self, forward, target, config):
        self.forward = forward
        self.target = target
        self.config = config
        self.cache: dict[tuple, float] = {}
        self.n_forward = 0
        self.n_failed = 0

    def __call__(self, idx: np.ndarray) -> float:
        key = tuple(int(v) for v in idx)
        if key in self.cache:
            return self.cache[key]
        values = grid_values(idx, self.config)
        eps = np.inf
        if _valid(values):
            self.n_forward += 1
            try:
                eps = float(discrepancy(self.forward(ApdGradientParams.from_array(values)), self.target))
            except FORWARD_ERRORS as exc:
                log.debug("forward failed at %s: %s", values, exc)
            if not np.isfinite(eps):
                eps = np.inf
                self.n_failed += 1
        self.cache[key] = eps
        return eps


def _stream(seed: int, iteration: int, k: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(iteration), int(k)])


def _termination(eps: np.ndarray, uniq: float, iteration: int, config: InferenceConfig):
    if np.all(eps < config.discrepancy_cutoff):
        return "discrepancy"
    if uniq < config.uniqueness_threshold:
        return "uniqueness"
    if iteration >= config.max_iterations:
        return "max_iterations"
    return None


def run_inference(forward, target, config: InferenceConfig | None = None, callback=None) -> Population:
    """Evolve a grid-aligned population toward ``target``.

    Iteration 1 evaluates the LHS population.  Each later iteration drops the
    ``samples_per_iteration`` worst particles, sets the threshold to the worst
    surviving discrepancy, and refills the dropped slots by resampling
    survivors, perturbing, and keeping the move only if it scores within the
    threshold (otherwise the survivor is copied).  ``callback`` receives the
    population after every iteration.
    """
    config = config or InferenceConfig()
    n, m = config.population_size, config.samples_per_iteration
    evaluate = _Evaluator(forward, target, config)
    idx = grid_index(latin_hypercube_init(config), config)
    eps = np.array([evaluate(row) for row in idx])
    pop = Population(grid_values(idx, config), eps, iteration=1)

    def record(threshold):
        pop.thetas = grid_values(idx, config)
        pop.discrepancies = eps.copy()
        pop.thresholds.append(float(threshold))
        pop.best_history.append(float(eps.min()))
        pop.uniqueness_history.append(uniqueness_fraction(pop))
        pop.n_forward, pop.n_failed = evaluate.n_forward, evaluate.n_failed
        log.info("iteration %d: threshold %.4g, best %.4g, unique %.3f", pop.iteration,
                 threshold, eps.min(), pop.uniqueness_history[-1])
        if callback is not None:
            callback(pop)

    record(eps.max())
    while True:
        pop.termination = _termination(eps, pop.uniqueness_history[-1], pop.iteration, config)
        if pop.termination:
            break
        pop.iteration += 1
        order = np.argsort(eps, kind="stable")
        survivors, dropped = order[: n - m], order[n - m :]
        threshold = eps[survivors[-1]]
        new_idx = np.empty((m, idx.shape[1]), dtype=np.int64)
        new_eps = np.empty(m)
        for k in range(m):
            rng = _stream(config.seed, pop.iteration, k)
            src = survivors[rng.integers(len(survivors))]
            proposal = perturb(idx[src], rng, config)
            e = evaluate(proposal) if _valid(grid_values(proposal, config)) else np.inf
            if e <= threshold:
                new_idx[k], new_eps[k] = proposal, e
            else:
                new_idx[k], new_eps[k] = idx[src], eps[src]
        idx = idx.copy()
        eps = eps.copy()
        idx[dropped] = new_idx
        eps[dropped] = new_eps
        record(threshold)
    return pop


def save_population(pop: Population, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(PARAM_NAMES) + ",discrepancy\n")
        for th, e in zip(pop.thetas, pop.discrepancies):
            fh.write(",".join(repr(float(v)) for v in th) + f",{float(e)!r}\n")


def load_population(path) -> Population:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    if header != list(PARAM_NAMES) + ["discrepancy"]:
        raise InferenceError(f"{path}: header must be " + ",".join(PARAM_NAMES) + ",discrepancy")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[0] == 0:
        raise InferenceError(f"{path}: empty population")
    return Population(data[:, :6].copy(), data[:, 6].copy())
