"""CMA-ES over evolutionary developmental-program genomes."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from functools import partial
from multiprocessing import get_context
from typing import Callable

import numpy as np

from .. import cmaes
from ..autodiff import ContractError
from ..envs import FitnessSpec, cartpole_returns, smallworld_fitness, xor_fitness
from ..evo import EvoDevConfig, NdpEvoParams, RecurrentPolicy, develop, param_count

log = logging.getLogger(__name__)


@dataclass
class EvoTrainConfig:
    generations: int = 300
    popsize: int = 512
    sigma0: float = 0.1
    init_std: float = 1.0
    restart_window: int = 300
    restart_tol: float = 1e-4
    target_fitness: float | None = None

    def validate(self) -> None:
        if self.popsize < 4:
            raise ContractError(f"popsize must be >= 4, got {self.popsize}")
        if self.generations < 1:
            raise ContractError(f"generations must be >= 1, got {self.generations}")


@dataclass
class GenerationRecord:
    generation: int
    best: float
    mean: float
    std: float
    nodes: int
    edges: int


@dataclass
class EvoResult:
    best_params: NdpEvoParams
    best_fitness: float
    history: list[GenerationRecord] = field(default_factory=list)
    restarts: int = 0


def make_policy(g, viable: bool, dev_cfg: EvoDevConfig):
    if not viable:
        return None
    return RecurrentPolicy(g, dev_cfg.eval_steps or None, dev_cfg.clamp_inputs)


def evaluate_genome(flat, dev_cfg: EvoDevConfig, spec: FitnessSpec, episode_seed: int = 0):
    """Develop one genome and score it; returns ``(fitness, nodes, edges)``."""
    params = NdpEvoParams(dev_cfg, flat)
    g, viable = develop(params, dev_cfg, spec.n_in, spec.n_out)
    if spec.task == "smallworld":
        fit = smallworld_fitness(g, spec.min_nodes, spec.n_random_refs, episode_seed, spec.penalty_nonviable)
    elif not viable:
        fit = spec.penalty_nonviable
    elif spec.task == "xor":
        fit = xor_fitness(make_policy(g, viable, dev_cfg), spec.n_in, spec.penalty_nonviable)
    elif spec.task == "cartpole":
        policy = make_policy(g, viable, dev_cfg)
        rng = np.random.default_rng(episode_seed)
        fit = float(cartpole_returns(policy, rng, spec.rollouts_per_eval).mean())
    else:
        raise ContractError(f"task {spec.task!r} is not an evolutionary task")
    return float(fit), g.num_nodes, g.num_edges


def _evaluate_population(pop, dev_cfg, spec, episode_seed, pool):
    fn = partial(evaluate_genome, dev_cfg=dev_cfg, spec=spec, episode_seed=episode_seed)
    if pool is None:
        return [fn(x) for x in pop]
    return pool.map(fn, list(pop), chunksize=max(1, len(pop) // (4 * pool._processes)))


def default_workers(popsize: int) -> int:
    return max(1, min(os.cpu_count() or 1, popsize))


def train_evo(cfg: EvoTrainConfig, dev_cfg: EvoDevConfig, spec: FitnessSpec, seed: int = 0,
              workers: int = 1, on_generation: Callable[[GenerationRecord, NdpEvoParams], None] | None = None) -> EvoResult:
    """Maximize ``spec``'s fitness of grown graphs; CMA-ES minimizes the negation."""
    cfg.validate()
    dev_cfg.validate(spec.n_in, spec.n_out)
    dim = param_count(dev_cfg)
    rng = np.random.default_rng(seed)
    state = cmaes.init(dim, rng.normal(0.0, cfg.init_std, dim), cfg.sigma0, cfg.popsize)
    run_best: list[float] = []
    best_x, best_f = None, -np.inf
    result = EvoResult(best_params=None, best_fitness=-np.inf)

    pool = get_context("fork").Pool(workers) if workers > 1 else None
    try:
        for gen in range(cfg.generations):
            pop = cmaes.ask(state, rng)
            episode_seed = int(rng.integers(2**31))
            scored = _evaluate_population(pop, dev_cfg, spec, episode_seed, pool)
            fits = np.array([s[0] for s in scored])
            cmaes.tell(state, pop, -fits)

            i = int(np.argmax(fits))
            if fits[i] > best_f:
                best_f, best_x = float(fits[i]), pop[i].copy()
            rec = GenerationRecord(gen, float(fits[i]), float(fits.mean()), float(fits.std()),
                                   scored[i][1], scored[i][2])
            result.history.append(rec)
            run_best.append(-float(fits[i]))
            if on_generation:
                on_generation(rec, NdpEvoParams(dev_cfg, best_x))
            log.info("gen %d best %.4f mean %.4f nodes %d edges %d (global %.4f)",
                     gen, rec.best, rec.mean, rec.nodes, rec.edges, best_f)

            if cfg.target_fitness is not None and best_f >= cfg.target_fitness:
                break
            if cmaes.should_restart(state, run_best, cfg.restart_window, cfg.restart_tol):
                result.restarts += 1
                log.info("restart %d at generation %d", result.restarts, gen)
                state = cmaes.init(dim, rng.normal(0.0, cfg.init_std, dim), cfg.sigma0, cfg.popsize)
                run_best = []
    finally:
        if pool is not None:
            pool.close()
            pool.join()

    result.best_params = NdpEvoParams(dev_cfg, best_x)
    result.best_fitness = best_f
    return result
