"""Genetic-algorithm calibration of GHR/IDM parameters.

Fitness is the mean over training events of each event's closed-loop
spacing MSE, with a fixed penalty added for any rollout that collides.
Population fitness is evaluated with a vectorized rollout that replicates
the scalar simulator's arithmetic step for step, so calibrated fitness
numbers agree with per-event :func:`followbench.sim.rollout` results.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import EventDataError, ModelEvaluationError
from .events import CarFollowingEvent
from .models.classic import (
    DEFAULT_MAX_DECEL_MPS2,
    GHRParams,
    IDMParams,
    make_policy,
    params_to_dict,
)
from .sim import rollout

FAMILIES = ("ghr", "idm")

COLLISION_PENALTY = 1e6


@dataclass(frozen=True)
class GAConfig:
    population_size: int = 100
    generations: int = 200
    tournament_k: int = 3
    crossover_rate: float = 0.9
    mutation_rate: float = 0.1
    mutation_sigma_frac: float = 0.1
    elitism: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.population_size < 2:
            raise ValueError("population_size must be >= 2")
        for rate in (self.crossover_rate, self.mutation_rate):
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"rates must lie in [0, 1], got {rate}")
        if not 0 <= self.elitism < self.population_size:
            raise ValueError("elitism must be < population_size")
        if self.tournament_k < 1:
            raise ValueError("tournament_k must be >= 1")
        if self.mutation_sigma_frac <= 0:
            raise ValueError("mutation_sigma_frac must be positive")


@dataclass(frozen=True)
class ParamBounds:
    names: tuple[str, ...]
    low: tuple[float, ...]
    high: tuple[float, ...]

    def __post_init__(self) -> None:
        if not (len(self.names) == len(self.low) == len(self.high)):
            raise ValueError("names/low/high lengths differ")
        for name, lo, hi in zip(self.names, self.low, self.high):
            if not lo < hi:
                raise ValueError(f"bound for {name} must satisfy low < high")

    @property
    def dim(self) -> int:
        return len(self.names)

    def low_array(self) -> np.ndarray:
        return np.asarray(self.low, dtype=float)

    def high_array(self) -> np.ndarray:
        return np.asarray(self.high, dtype=float)

    def contains(self, genes: Sequence[float]) -> bool:
        g = np.asarray(genes, dtype=float)
        return bool(np.all(g >= self.low_array()) and np.all(g <= self.high_array()))


DEFAULT_BOUNDS: dict[str, ParamBounds] = {
    "idm": ParamBounds(
        names=("a0", "b", "v_des", "t_des", "s0", "lambda_exp"),
        low=(0.1, 0.1, 1.0, 0.1, 0.1, 1.0),
        high=(5.0, 5.0, 45.0, 5.0, 10.0, 10.0),
    ),
    "ghr": ParamBounds(
        names=("c", "m_exp", "l_exp", "reaction_time_s"),
        low=(-10.0, -2.0, -1.0, 0.0),
        high=(10.0, 2.0, 4.0, 3.0),
    ),
}


def genes_to_params(family: str, genes: Sequence[float], dt_s: float) -> GHRParams | IDMParams:
    g = [float(x) for x in genes]
    if family == "idm":
        return IDMParams(a0=g[0], b=g[1], v_des=g[2], t_des=g[3], s0=g[4], lambda_exp=g[5])
    if family == "ghr":
        # The delay gene is continuous; snap it onto the step grid.
        lag = int(round(g[3] / dt_s))
        return GHRParams(c=g[0], m_exp=g[1], l_exp=g[2], reaction_time_s=lag * dt_s)
    raise ValueError(f"unknown family {family!r}")


def params_to_genes(params: GHRParams | IDMParams) -> np.ndarray:
    if isinstance(params, IDMParams):
        return np.array([params.a0, params.b, params.v_des, params.t_des, params.s0, params.lambda_exp])
    return np.array([params.c, params.m_exp, params.l_exp, params.reaction_time_s])


def fitness(
    params: GHRParams | IDMParams,
    events: Sequence[CarFollowingEvent],
    *,
    bounds: ParamBounds | None = None,
    collision_penalty: float = COLLISION_PENALTY,
) -> float:
    """Mean per-event spacing MSE of closed-loop rollouts (plus penalties).

    Out-of-bounds parameters and rollouts that abort on non-finite
    accelerations score +inf.
    """
    if not events:
        raise EventDataError("fitness needs at least one event")
    if bounds is not None and not bounds.contains(params_to_genes(params)):
        return math.inf
    total = 0.0
    for event in events:
        policy = make_policy(params, event.dt_s)
        try:
            result = rollout(policy, event)
        except ModelEvaluationError:
            return math.inf
        n = result.steps_completed
        err = result.spacing_sim_m - event.spacing_m[:n]
        total += float(np.mean(err * err))
        if result.collided:
            total += collision_penalty
    return total / len(events)


# ---------------------------------------------------------------------------
# Vectorized fitness over a whole population.
# ---------------------------------------------------------------------------


def _stack_events(events: Sequence[CarFollowingEvent]):
    dts = {e.dt_s for e in events}
    if max(dts) - min(dts) > 1e-12:
        raise EventDataError("calibration events must share one dt")
    dt = events[0].dt_s
    lengths = np.array([len(e) for e in events])
    n_max = int(lengths.max())
    n_events = len(events)
    spacing_obs = np.zeros((n_events, n_max))
    v_lv = np.zeros((n_events, n_max))
    x_lv = np.zeros((n_events, n_max))
    v0 = np.zeros(n_events)
    for i, e in enumerate(events):
        n = len(e)
        spacing_obs[i, :n] = e.spacing_m
        v_lv[i, :n] = e.v_lv_mps
        x_lv[i, 0] = e.spacing_m[0]
        x_lv[i, 1:n] = e.spacing_m[0] + np.cumsum(0.5 * (e.v_lv_mps[:-1] + e.v_lv_mps[1:]) * dt)
        v0[i] = e.v_fv_mps[0]
    return dt, lengths, spacing_obs, v_lv, x_lv, v0


def batch_fitness(
    family: str,
    genes: np.ndarray,
    events: Sequence[CarFollowingEvent],
    *,
    collision_penalty: float = COLLISION_PENALTY,
    max_decel: float = DEFAULT_MAX_DECEL_MPS2,
) -> np.ndarray:
    """Fitness of every gene row at once; matches the scalar path exactly.

    Simulates all (individual, event) pairs in lock step with the same
    ballistic update as :func:`followbench.sim.rollout`. Individuals that
    produce a non-finite acceleration anywhere score +inf, mirroring the
    scalar path's abort.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    genes = np.atleast_2d(np.asarray(genes, dtype=float))
    n_pop = genes.shape[0]
    dt, lengths, spacing_obs, v_lv, x_lv, v0 = _stack_events(events)
    n_events, n_max = spacing_obs.shape

    x = np.zeros((n_pop, n_events))
    v = np.tile(v0, (n_pop, 1))
    active = np.ones((n_pop, n_events), dtype=bool)
    collided = np.zeros((n_pop, n_events), dtype=bool)
    sq_sum = np.zeros((n_pop, n_events))
    steps = np.zeros((n_pop, n_events), dtype=np.int64)
    bad = np.zeros(n_pop, dtype=bool)

    if family == "idm":
        a0 = genes[:, 0:1]
        b = genes[:, 1:2]
        v_des = genes[:, 2:3]
        t_des = genes[:, 3:4]
        s0 = genes[:, 4:5]
        lam = genes[:, 5:6]
        sqrt_ab = np.sqrt(a0 * b)
    else:
        c = genes[:, 0:1]
        m_exp = genes[:, 1:2]
        l_exp = genes[:, 2:3]
        lag = np.round(genes[:, 3] / dt).astype(int)
        spacing_hist = np.zeros((n_max, n_pop, n_events))
        dv_hist = np.zeros((n_max, n_pop, n_events))
        rows = np.arange(n_pop)

    ends = lengths - 1
    with np.errstate(all="ignore"):
        for k in range(n_max):
            in_span = active & (k < lengths)[None, :]
            if not in_span.any():
                break
            spacing_k = x_lv[:, k][None, :] - x
            err = spacing_k - spacing_obs[:, k][None, :]
            sq_sum[in_span] += (err * err)[in_span]
            steps[in_span] += 1

            col_now = in_span & (spacing_k <= 0.0)
            collided |= col_now
            active &= ~col_now
            evaluate = in_span & ~col_now

            dv = v - v_lv[:, k][None, :]
            if family == "idm":
                dynamic = v * t_des + v * dv / (2.0 * sqrt_ab)
                dynamic = np.maximum(0.0, dynamic)
                desired = s0 + dynamic
                accel = a0 * (1.0 - (v / v_des) ** lam - (desired / spacing_k) ** 2)
                accel = np.minimum(np.maximum(accel, -max_decel), a0)
            else:
                spacing_hist[k] = spacing_k
                dv_hist[k] = dv
                back = np.maximum(k - lag, 0)
                spacing_d = spacing_hist[back, rows]
                dv_d = dv_hist[back, rows]
                accel = c * v**m_exp * (-dv_d) / spacing_d**l_exp

            bad |= np.any(evaluate & ~np.isfinite(accel), axis=1)

            ended = evaluate & (k == ends)[None, :]
            active &= ~ended
            advance = evaluate & ~ended
            v_next_raw = v + accel * dt
            stop = v_next_raw < 0.0
            safe_a = np.where(stop, np.where(accel < 0.0, accel, -1.0), -1.0)
            dx = np.where(stop, -0.5 * v * v / safe_a, v * dt + 0.5 * accel * dt * dt)
            x = np.where(advance, x + dx, x)
            v = np.where(advance, np.where(stop, 0.0, v_next_raw), v)

    per_event = sq_sum / steps + collision_penalty * collided
    out = per_event.mean(axis=1)
    out[bad] = math.inf
    return out


# ---------------------------------------------------------------------------
# GA driver
# ---------------------------------------------------------------------------


def _tournament(fitnesses: np.ndarray, cfg: GAConfig, rng: np.random.Generator) -> int:
    contenders = rng.integers(0, len(fitnesses), size=cfg.tournament_k)
    return int(contenders[np.argmin(fitnesses[contenders])])


def evolve_generation(
    population: np.ndarray,
    fitnesses: np.ndarray,
    bounds: ParamBounds,
    cfg: GAConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """One generation: elitism, tournament selection, BLX-0.5, Gaussian mutation."""
    population = np.asarray(population, dtype=float)
    fitnesses = np.asarray(fitnesses, dtype=float)
    if len(population) != len(fitnesses):
        raise ValueError("population and fitness lengths differ")
    low = bounds.low_array()
    high = bounds.high_array()
    sigma = cfg.mutation_sigma_frac * (high - low)
    n_genes = population.shape[1]

    order = np.argsort(fitnesses, kind="stable")
    next_pop = [population[i].copy() for i in order[: cfg.elitism]]
    while len(next_pop) < cfg.population_size:
        parent = population[_tournament(fitnesses, cfg, rng)]
        if rng.random() < cfg.crossover_rate:
            other = population[_tournament(fitnesses, cfg, rng)]
            lo = np.minimum(parent, other)
            hi = np.maximum(parent, other)
            span = hi - lo
            child = rng.uniform(lo - 0.5 * span, hi + 0.5 * span)
        else:
            child = parent.copy()
        mutate = rng.random(n_genes) < cfg.mutation_rate
        noise = rng.normal(0.0, sigma)
        child = np.where(mutate, child + noise, child)
        next_pop.append(np.clip(child, low, high))
    return np.vstack(next_pop)


@dataclass
class GAResult:
    best_genes: np.ndarray
    best_fitness: float
    trace: list[float]  # best-so-far after the initial and each evolved generation


def ga_minimize(
    objective: Callable[[np.ndarray], np.ndarray],
    bounds: ParamBounds,
    cfg: GAConfig,
) -> GAResult:
    """Minimize a population objective ((P, G) genes -> (P,) values)."""
    rng = np.random.default_rng(cfg.seed)
    population = rng.uniform(
        bounds.low_array(), bounds.high_array(), size=(cfg.population_size, bounds.dim)
    )
    fitnesses = np.asarray(objective(population), dtype=float)
    best_idx = int(np.argmin(fitnesses))
    best_genes = population[best_idx].copy()
    best_fitness = float(fitnesses[best_idx])
    trace = [best_fitness]
    for _ in range(cfg.generations):
        population = evolve_generation(population, fitnesses, bounds, cfg, rng)
        fitnesses = np.asarray(objective(population), dtype=float)
        gen_idx = int(np.argmin(fitnesses))
        if fitnesses[gen_idx] < best_fitness:
            best_fitness = float(fitnesses[gen_idx])
            best_genes = population[gen_idx].copy()
        trace.append(best_fitness)
    return GAResult(best_genes=best_genes, best_fitness=best_fitness, trace=trace)


@dataclass
class CalibrationResult:
    family: str
    params: GHRParams | IDMParams
    best_fitness: float
    trace: list[float]
    config: GAConfig
    bounds: ParamBounds

    def save(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = {
            "family": self.family,
            "best_fitness_m2": self.best_fitness,
            "params": params_to_dict(self.params),
            "ga_config": asdict(self.config),
            "bounds": {
                name: [lo, hi]
                for name, lo, hi in zip(self.bounds.names, self.bounds.low, self.bounds.high)
            },
        }
        with (out_dir / "calibration.json").open("w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        with (out_dir / "fitness_trace.csv").open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["generation", "best_fitness_m2"])
            for gen, value in enumerate(self.trace):
                writer.writerow([gen, repr(value)])


def calibrate(
    family: str,
    train_events: Sequence[CarFollowingEvent],
    bounds: ParamBounds | None = None,
    cfg: GAConfig | None = None,
    *,
    collision_penalty: float = COLLISION_PENALTY,
) -> CalibrationResult:
    """GA search for the parameter set minimizing mean rollout spacing MSE."""
    family = family.lower()
    if family not in FAMILIES:
        raise ValueError(f"family must be one of {FAMILIES}, got {family!r}")
    if not train_events:
        raise EventDataError("calibrate needs a nonempty training set")
    bounds = bounds or DEFAULT_BOUNDS[family]
    expected = DEFAULT_BOUNDS[family].dim
    if bounds.dim != expected:
        raise ValueError(f"{family} needs {expected} genes, bounds give {bounds.dim}")
    cfg = cfg or GAConfig()
    dt = train_events[0].dt_s

    def objective(population: np.ndarray) -> np.ndarray:
        return batch_fitness(
            family, population, train_events, collision_penalty=collision_penalty
        )

    result = ga_minimize(objective, bounds, cfg)
    params = genes_to_params(family, result.best_genes, dt)
    return CalibrationResult(
        family=family,
        params=params,
        best_fitness=result.best_fitness,
        trace=result.trace,
        config=cfg,
        bounds=bounds,
    )
