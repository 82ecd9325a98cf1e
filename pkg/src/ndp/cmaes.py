"""CMA-ES with an ask/tell interface (minimization).

Standard (mu/mu_w, lambda) strategy with cumulative step-size adaptation,
rank-one and rank-mu covariance updates, and a lazily refreshed
eigendecomposition of ``C``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError


@dataclass
class CmaesState:
    dim: int
    popsize: int
    mean: np.ndarray
    sigma: float
    C: np.ndarray
    p_sigma: np.ndarray
    p_c: np.ndarray
    B: np.ndarray
    D: np.ndarray
    mu: int
    weights: np.ndarray
    mu_eff: float
    c_sigma: float
    d_sigma: float
    c_c: float
    c_1: float
    c_mu: float
    chi_n: float
    generation: int = 0
    eigen_generation: int = 0
    eigen_interval: int = 1
    evaluations: int = 0

    @property
    def condition_number(self) -> float:
        return float((self.D.max() / self.D.min()) ** 2)

    def to_json(self) -> str:
        data = {}
        for key, value in self.__dict__.items():
            data[key] = value.tolist() if isinstance(value, np.ndarray) else value
        return json.dumps(data)

    @classmethod
    def from_json(cls, text: str) -> "CmaesState":
        data = json.loads(text)
        arrays = {"mean", "C", "p_sigma", "p_c", "B", "D", "weights"}
        return cls(**{k: (np.array(v, dtype=float) if k in arrays else v) for k, v in data.items()})


def init(dim: int, mean0, sigma0: float, popsize: int) -> CmaesState:
    if dim < 1:
        raise ContractError(f"dim must be >= 1, got {dim}")
    if not sigma0 > 0:
        raise ContractError(f"sigma0 must be > 0, got {sigma0}")
    if popsize < 4:
        raise ContractError(f"popsize must be >= 4, got {popsize}")
    mean = np.broadcast_to(np.asarray(mean0, dtype=float), (dim,)).copy()

    n, lam = dim, popsize
    mu = lam // 2
    raw = math.log((lam + 1) / 2) - np.log(np.arange(1, mu + 1))
    weights = raw / raw.sum()
    mu_eff = 1.0 / float(np.sum(weights ** 2))

    c_sigma = (mu_eff + 2) / (n + mu_eff + 5)
    d_sigma = 1 + 2 * max(0.0, math.sqrt((mu_eff - 1) / (n + 1)) - 1) + c_sigma
    c_c = (4 + mu_eff / n) / (n + 4 + 2 * mu_eff / n)
    c_1 = 2 / ((n + 1.3) ** 2 + mu_eff)
    c_mu = min(1 - c_1, 2 * (mu_eff - 2 + 1 / mu_eff) / ((n + 2) ** 2 + mu_eff))
    chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))

    return CmaesState(
        dim=n, popsize=lam, mean=mean, sigma=float(sigma0),
        C=np.eye(n), p_sigma=np.zeros(n), p_c=np.zeros(n), B=np.eye(n), D=np.ones(n),
        mu=mu, weights=weights, mu_eff=mu_eff, c_sigma=c_sigma, d_sigma=d_sigma,
        c_c=c_c, c_1=c_1, c_mu=c_mu, chi_n=chi_n,
        eigen_interval=max(1, math.ceil(1 / ((c_1 + c_mu) * n * 10))),
    )


def _refresh_eigen(state: CmaesState) -> None:
    C = np.triu(state.C) + np.triu(state.C, 1).T
    state.C = C
    eigvals, B = np.linalg.eigh(C)
    eigvals = np.maximum(eigvals, 1e-300)
    state.B = B
    state.D = np.sqrt(eigvals)
    state.eigen_generation = state.generation


def ask(state: CmaesState, rng: np.random.Generator) -> np.ndarray:
    """Return a ``(popsize, dim)`` array of candidates."""
    if state.generation - state.eigen_generation >= state.eigen_interval:
        _refresh_eigen(state)
    z = rng.standard_normal((state.popsize, state.dim))
    y = (z * state.D) @ state.B.T
    return state.mean + state.sigma * y


def tell(state: CmaesState, candidates, fitnesses) -> None:
    x = np.asarray(candidates, dtype=float)
    f = np.array(fitnesses, dtype=float)
    if x.shape != (state.popsize, state.dim) or f.shape != (state.popsize,):
        raise ContractError(
            f"expected {state.popsize} candidates of dim {state.dim}, got {x.shape} and {f.shape}"
        )
    finite = np.isfinite(f)
    if not finite.all():
        worst = f[finite].max() if finite.any() else 0.0
        f[~finite] = worst + 1.0

    n = state.dim
    if f.max() == f.min():
        # flat fitness carries no ranking information: keep the distribution, widen the step
        state.generation += 1
        state.sigma *= math.exp(0.2 + state.c_sigma / state.d_sigma)
        state.evaluations += state.popsize
        return
    order = np.argsort(f, kind="stable")[: state.mu]
    w = state.weights
    y = (x[order] - state.mean) / state.sigma
    y_w = w @ y
    old_mean = state.mean
    state.mean = old_mean + state.sigma * y_w

    # C^{-1/2} y_w via the cached eigenbasis
    inv_sqrt = state.B @ ((state.B.T @ y_w) / state.D)
    cs = state.c_sigma
    state.p_sigma = (1 - cs) * state.p_sigma + math.sqrt(cs * (2 - cs) * state.mu_eff) * inv_sqrt
    state.generation += 1
    norm_ps = float(np.linalg.norm(state.p_sigma))
    h_sigma = norm_ps / math.sqrt(1 - (1 - cs) ** (2 * state.generation)) / state.chi_n < 1.4 + 2 / (n + 1)
    cc = state.c_c
    state.p_c = (1 - cc) * state.p_c + h_sigma * math.sqrt(cc * (2 - cc) * state.mu_eff) * y_w

    c1, cmu = state.c_1, state.c_mu
    delta_h = (1 - h_sigma) * cc * (2 - cc)
    rank_one = np.outer(state.p_c, state.p_c)
    rank_mu = (y.T * w) @ y
    state.C = (1 - c1 - cmu) * state.C + c1 * (rank_one + delta_h * state.C) + cmu * rank_mu

    state.sigma *= math.exp((cs / state.d_sigma) * (norm_ps / state.chi_n - 1))
    state.evaluations += state.popsize


def should_restart(state: CmaesState, history, window: int = 300, tol: float = 1e-4,
                   max_condition: float = 1e14) -> bool:
    """``history`` holds the per-generation best fitness (minimization)."""
    if state.condition_number > max_condition:
        return True
    if len(history) < window:
        return False
    start = min(history[: len(history) - window + 1])
    return start - min(history) < tol
