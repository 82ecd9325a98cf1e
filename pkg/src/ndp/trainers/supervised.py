"""Supervised classification and behavioural cloning with the differentiable NDP."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import autodiff as ad
from ..autodiff import AdamState, ContractError, Tape, adam_step
from ..diff import DiffDevConfig, FrozenPolicy, NdpDiffParams, develop_diff, forward_dag
from ..envs import CartPole, Dataset, rollout
from .history import HistoryRow

log = logging.getLogger(__name__)

EVAL_GROWTH_SEED = 2024


@dataclass
class SupervisedConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    iterations: int = 10000
    log_every: int = 100
    eval_seed: int = EVAL_GROWTH_SEED

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.iterations < 0:
            raise ContractError(f"iterations must be >= 0, got {self.iterations}")
        if self.log_every < 1:
            raise ContractError(f"log_every must be >= 1, got {self.log_every}")


@dataclass
class BcConfig(SupervisedConfig):
    learning_rate: float = 1e-4
    eval_episodes: int = 10
    normalize_obs: bool = True  # standardize observations with dataset statistics


@dataclass
class ObsNorm:
    """Per-feature standardization fitted on a dataset; constant features pass through unscaled."""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "ObsNorm":
        sd = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(sd > 1e-8, sd, 1.0))

    def __call__(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ObsNorm":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


class NormalizedPolicy:
    """A frozen policy that standardizes observations before the grown network sees them."""

    def __init__(self, policy: FrozenPolicy, norm: ObsNorm):
        self.policy, self.norm = policy, norm

    def __call__(self, obs) -> np.ndarray:
        return self.policy(self.norm(obs))

    def value(self, obs) -> np.ndarray:
        return self.policy.value(self.norm(obs))


@dataclass
class FitResult:
    params: NdpDiffParams
    losses: list[float] = field(default_factory=list)
    history: list[HistoryRow] = field(default_factory=list)
    metric: float = float("nan")  # test accuracy (supervised) or mean return (cloning)
    metric_std: float = 0.0
    obs_norm: ObsNorm | None = None


def eval_network(params: NdpDiffParams, cfg: DiffDevConfig, seed: int = EVAL_GROWTH_SEED,
                 obs_norm: ObsNorm | None = None):
    """Grow once with the evaluation seed and freeze the result."""
    net = develop_diff(params, cfg, np.random.default_rng(seed))
    policy = FrozenPolicy(net, cfg)
    return net, (NormalizedPolicy(policy, obs_norm) if obs_norm is not None else policy)


def accuracy(policy: FrozenPolicy, data: Dataset) -> float:
    if len(data) == 0:
        return float("nan")
    pred = np.asarray(policy(data.inputs)).reshape(len(data), -1).argmax(axis=1)
    return float(np.mean(pred == data.targets))


def loss_on_batch(params: NdpDiffParams, cfg: DiffDevConfig, x: np.ndarray, y: np.ndarray,
                  rng: np.random.Generator, discrete: bool = True):
    """Grow on a fresh tape, run the batch, and return ``(tape, net, loss)``."""
    tape = Tape()
    net = develop_diff(params, cfg, rng, tape)
    out, _ = forward_dag(net, x, cfg)
    loss = ad.softmax_cross_entropy(out, y) if discrete else ad.mse(out, np.asarray(y, dtype=float))
    return tape, net, loss


def _fit(cfg: SupervisedConfig, diff_cfg: DiffDevConfig, data: Dataset, seed: int, discrete: bool,
         on_log: Callable[[HistoryRow, NdpDiffParams], None] | None, params: NdpDiffParams | None) -> FitResult:
    cfg.validate()
    diff_cfg.validate()
    if len(data) == 0:
        raise ContractError("dataset is empty")
    if data.n_in != diff_cfg.n_in:
        raise ContractError(f"dataset has {data.n_in} inputs, network expects {diff_cfg.n_in}")
    if discrete and (data.targets.min() < 0 or data.targets.max() >= diff_cfg.n_out):
        raise ContractError(f"labels outside 0..{diff_cfg.n_out - 1}")
    rng = np.random.default_rng(seed)
    params = params.copy() if params is not None else NdpDiffParams.init(diff_cfg, rng)
    opt = AdamState(lr=cfg.learning_rate)
    result = FitResult(params)
    window: list[float] = []
    for it in range(cfg.iterations):
        idx = rng.integers(len(data), size=min(cfg.batch_size, len(data)))
        tape, net, loss = loss_on_batch(params, diff_cfg, data.inputs[idx], data.targets[idx], rng, discrete)
        grads = tape.backward(loss)
        adam_step(opt, params.arrays, {k: grads[t] for k, t in net.leaves.items()})
        result.losses.append(loss.value.item())
        window.append(loss.value.item())
        if (it + 1) % cfg.log_every == 0 or it + 1 == cfg.iterations:
            w = np.array(window)
            row = HistoryRow(it + 1, float(w.min()), float(w.mean()), float(w.std()),
                             net.graph.num_nodes, net.graph.num_edges)
            result.history.append(row)
            window = []
            log.info("iter %d loss %.4f nodes %d", it + 1, row.mean, row.nodes)
            if on_log:
                on_log(row, params)
    return result


def train_supervised(cfg: SupervisedConfig, diff_cfg: DiffDevConfig, train: Dataset, test: Dataset | None = None,
                     seed: int = 0, on_log: Callable[[HistoryRow, NdpDiffParams], None] | None = None,
                     params: NdpDiffParams | None = None) -> FitResult:
    """Cross-entropy training; ``metric`` is held-out accuracy of the evaluation-seed network."""
    result = _fit(cfg, diff_cfg, train, seed, True, on_log, params)
    _, policy = eval_network(result.params, diff_cfg, cfg.eval_seed)
    result.metric = accuracy(policy, test if test is not None else train)
    return result


def evaluate_cartpole(policy, episodes: int, seed: int) -> np.ndarray:
    env = CartPole()
    rng = np.random.default_rng(seed)
    return np.array([rollout(policy, env, rng) for _ in range(episodes)])


def bc_obs_norm(cfg: BcConfig, data: Dataset) -> ObsNorm | None:
    """The observation standardization ``train_bc`` applies, or None when disabled."""
    return ObsNorm.fit(data.inputs) if cfg.normalize_obs and len(data) else None


def train_bc(cfg: BcConfig, diff_cfg: DiffDevConfig, data: Dataset, discrete: bool = True, seed: int = 0,
             on_log: Callable[[HistoryRow, NdpDiffParams], None] | None = None) -> FitResult:
    """Clone expert actions; ``metric`` is the mean CartPole return over ``cfg.eval_episodes``."""
    norm = bc_obs_norm(cfg, data)
    if norm is not None:
        data = Dataset(norm(data.inputs), data.targets, data.split)
    result = _fit(cfg, diff_cfg, data, seed, discrete, on_log, None)
    result.obs_norm = norm
    _, policy = eval_network(result.params, diff_cfg, cfg.eval_seed, norm)
    returns = evaluate_cartpole(policy, cfg.eval_episodes, seed + 1)
    result.metric, result.metric_std = float(returns.mean()), float(returns.std())
    return result
