"""PPO for grown CartPole policies; the critic is an extra output node of the grown network."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import autodiff as ad
from ..autodiff import AdamState, ContractError, Tape, adam_step
from ..diff import DiffDevConfig, FrozenPolicy, NdpDiffParams, develop_diff, forward_dag
from ..envs import MAX_STEPS, cartpole_reset, cartpole_step
from .history import HistoryRow
from .supervised import EVAL_GROWTH_SEED, eval_network, evaluate_cartpole

log = logging.getLogger(__name__)
HELD_OUT_OFFSET = 10_000


@dataclass
class PpoConfig:
    learning_rate: float = 5e-4
    entropy_coef: float = 0.001
    updates_per_rollout: int = 30
    clip_epsilon: float = 0.2
    discount: float = 0.99
    gae_lambda: float = 0.95
    value_coef: float = 0.5
    total_rollouts: int = 10000
    value_scale: float = 0.01  # rewards are scaled by this before the critic sees them
    episodes_per_rollout: int = 16  # parallel episodes on one grown network
    normalize_advantages: bool = True
    log_every: int = 10
    eval_every: int = 50
    eval_episodes: int = 10
    target_return: float | None = None
    eval_seed: int = EVAL_GROWTH_SEED

    def validate(self) -> None:
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ContractError(f"clip_epsilon must be in (0, 1), got {self.clip_epsilon}")
        if not 0.0 <= self.discount <= 1.0:
            raise ContractError(f"discount must be in [0, 1], got {self.discount}")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ContractError(f"gae_lambda must be in [0, 1], got {self.gae_lambda}")
        if self.episodes_per_rollout < 1:
            raise ContractError(f"episodes_per_rollout must be >= 1, got {self.episodes_per_rollout}")
        if self.updates_per_rollout < 1 or self.total_rollouts < 0:
            raise ContractError("updates_per_rollout must be >= 1 and total_rollouts >= 0")


@dataclass
class Episode:
    obs: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    bootstrap: float  # critic value after the last step (0 when the pole fell)
    choices: list

    @property
    def ret(self) -> float:
        return float(self.rewards.sum())


@dataclass
class PpoResult:
    params: NdpDiffParams
    episode_returns: list[float] = field(default_factory=list)
    history: list[HistoryRow] = field(default_factory=list)
    evals: list[tuple[int, float]] = field(default_factory=list)
    metric: float = float("nan")
    metric_std: float = 0.0


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def collect_rollout(params: NdpDiffParams, cfg: DiffDevConfig, rng: np.random.Generator, episodes: int = 1,
                    max_steps: int = MAX_STEPS) -> list[Episode]:
    """Grow once, then run ``episodes`` CartPole episodes side by side, sampling the softmax over output logits.

    Every episode shares the growth choices, so one replayed growth scores all of them.
    """
    net = develop_diff(params, cfg, rng)
    policy = FrozenPolicy(net, cfg)
    states = [cartpole_reset(rng) for _ in range(episodes)]
    logs = [{"obs": [], "actions": [], "logp": [], "values": [], "rewards": []} for _ in range(episodes)]
    bootstrap = [0.0] * episodes
    alive = list(range(episodes))
    for _ in range(max_steps):
        if not alive:
            break
        o = np.stack([states[i].obs for i in alive])
        probs = softmax(np.asarray(policy(o), dtype=float).reshape(len(alive), -1))
        values = np.asarray(policy.value(o), dtype=float).reshape(-1)
        still = []
        for j, i in enumerate(alive):
            a = ad.sample_categorical(probs[j], rng)
            rec = logs[i]
            rec["obs"].append(o[j])
            rec["actions"].append(a)
            rec["logp"].append(np.log(probs[j, a]))
            rec["values"].append(float(values[j]))
            states[i], r, done = cartpole_step(states[i], a)
            rec["rewards"].append(r)
            if not done:
                still.append(i)
            elif not states[i].failed:
                bootstrap[i] = float(policy.value(states[i].obs[None])[0, 0])
        alive = still
    return [Episode(np.array(rec["obs"]), np.array(rec["actions"]), np.array(rec["logp"]), np.array(rec["values"]),
                    np.array(rec["rewards"]), bootstrap[i], net.choices) for i, rec in enumerate(logs)]


def collect_episode(params: NdpDiffParams, cfg: DiffDevConfig, rng: np.random.Generator,
                    max_steps: int = MAX_STEPS) -> Episode:
    """Grow once and run a single sampled episode."""
    return collect_rollout(params, cfg, rng, 1, max_steps)[0]


def merge(episodes: list[Episode]) -> Episode:
    """Concatenate episodes that share one growth into a single batch for the loss."""
    cat = lambda name: np.concatenate([getattr(e, name) for e in episodes])  # noqa: E731
    return Episode(cat("obs"), cat("actions"), cat("logp"), cat("values"), cat("rewards"), 0.0, episodes[0].choices)


def gae(rewards: np.ndarray, values: np.ndarray, bootstrap: float, discount: float, lam: float) -> np.ndarray:
    """Generalized advantage estimates for one episode."""
    adv = np.zeros(len(rewards))
    nxt_v, last = bootstrap, 0.0
    for t in range(len(rewards) - 1, -1, -1):
        delta = rewards[t] + discount * nxt_v - values[t]
        last = delta + discount * lam * last
        adv[t] = last
        nxt_v = values[t]
    return adv


def ppo_loss(params: NdpDiffParams, cfg: DiffDevConfig, ep: Episode, adv: np.ndarray, returns: np.ndarray,
             pcfg: PpoConfig):
    """Clipped surrogate + value loss - entropy bonus, on the episode's replayed growth."""
    tape = Tape()
    net = develop_diff(params, cfg, None, tape, replay=ep.choices)
    logits, value = forward_dag(net, ep.obs, cfg)
    if value is None:
        raise ContractError("PPO needs a critic node (set critic = true)")
    logp_all = ad.log_softmax(logits)
    logp = ad.pick(logp_all, ep.actions)
    ratio = ad.exp(logp - tape.const(ep.logp))
    a = tape.const(adv)
    eps = pcfg.clip_epsilon
    surr = ad.minimum(ratio * a, ad.clip(ratio, 1.0 - eps, 1.0 + eps) * a)
    bound = adv * (1.0 + eps * np.sign(adv))
    assert np.all(surr.value <= bound + 1e-9), "clipped surrogate escaped its bound"
    entropy = ad.scale(ad.sum(ad.exp(logp_all) * logp_all), -1.0 / len(adv))
    value_loss = ad.mse(ad.reshape(value, (-1,)), returns)
    loss = ad.scale(ad.mean(surr), -1.0) + ad.scale(value_loss, pcfg.value_coef) \
        + ad.scale(entropy, -pcfg.entropy_coef)
    return tape, net, loss, ratio.value


def train_ppo(pcfg: PpoConfig, cfg: DiffDevConfig, seed: int = 0,
              on_log: Callable[[HistoryRow, NdpDiffParams], None] | None = None,
              params: NdpDiffParams | None = None) -> PpoResult:
    pcfg.validate()
    cfg.validate()
    if not cfg.critic:
        raise ContractError("PPO needs a critic node (set critic = true)")
    if (cfg.n_in, cfg.n_out) != (4, 2):
        raise ContractError(f"CartPole needs 4 inputs and 2 outputs, config has {cfg.n_in}/{cfg.n_out}")
    rng = np.random.default_rng(seed)
    params = params.copy() if params is not None else NdpDiffParams.init(cfg, rng)
    opt = AdamState(lr=pcfg.learning_rate)
    result = PpoResult(params)
    best_eval, best_arrays = -np.inf, None
    window: list[float] = []
    for k in range(pcfg.total_rollouts):
        episodes = collect_rollout(params, cfg, rng, pcfg.episodes_per_rollout)
        adv, returns = [], []
        for e in episodes:
            a = gae(e.rewards * pcfg.value_scale, e.values, e.bootstrap, pcfg.discount, pcfg.gae_lambda)
            adv.append(a)
            returns.append(a + e.values)
        ep, adv, returns = merge(episodes), np.concatenate(adv), np.concatenate(returns)
        if pcfg.normalize_advantages and len(adv) > 1:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        for _ in range(pcfg.updates_per_rollout):
            tape, net, loss, _ = ppo_loss(params, cfg, ep, adv, returns, pcfg)
            grads = tape.backward(loss)
            adam_step(opt, params.arrays, {name: grads[t] for name, t in net.leaves.items()})
        mean_ret = float(np.mean([e.ret for e in episodes]))
        result.episode_returns.append(mean_ret)
        window.append(mean_ret)
        if (k + 1) % pcfg.log_every == 0 or k + 1 == pcfg.total_rollouts:
            w = np.array(window)
            row = HistoryRow(k + 1, float(w.max()), float(w.mean()), float(w.std()),
                             net.graph.num_nodes, net.graph.num_edges)
            result.history.append(row)
            window = []
            log.info("rollout %d return %.1f (max %.0f)", k + 1, row.mean, row.best)
            if on_log:
                on_log(row, params)
        if pcfg.eval_every and ((k + 1) % pcfg.eval_every == 0 or k + 1 == pcfg.total_rollouts):
            _, policy = eval_network(params, cfg, pcfg.eval_seed)
            score = float(evaluate_cartpole(policy, pcfg.eval_episodes, seed + 1).mean())
            result.evals.append((k + 1, score))
            log.info("rollout %d greedy eval %.1f", k + 1, score)
            if score > best_eval:
                best_eval, best_arrays = score, {n: a.copy() for n, a in params.arrays.items()}
            if pcfg.target_return is not None and score >= pcfg.target_return:
                break
    if best_arrays is not None:
        result.params = NdpDiffParams(cfg, best_arrays)
    # score the kept parameters on fresh episodes, not the ones used to select them
    _, policy = eval_network(result.params, cfg, pcfg.eval_seed)
    returns = evaluate_cartpole(policy, pcfg.eval_episodes, seed + HELD_OUT_OFFSET)
    result.metric, result.metric_std = float(returns.mean()), float(returns.std())
    return result
