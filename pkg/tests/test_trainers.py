import json
from dataclasses import replace

import numpy as np
import pytest

from ndp import config as cfgmod
from ndp.autodiff import AdamState, ContractError, adam_step
from ndp.diff import DiffDevConfig, FrozenPolicy, NdpDiffParams, develop_diff
from ndp.cli import main
from ndp.envs import CartPole, Dataset, FitnessSpec, load_digits_csv, load_trajectories_csv
from ndp.evo import EvoDevConfig, param_count
from ndp.trainers.evo import EvoTrainConfig, evaluate_genome, train_evo
from ndp.trainers.history import HistoryRow, read_history_csv, write_history_csv
from ndp.trainers.ppo import (
    HELD_OUT_OFFSET, Episode, PpoConfig, collect_episode, collect_rollout, gae, merge, ppo_loss, softmax, train_ppo,
)
from ndp.trainers.supervised import (
    BcConfig, ObsNorm, SupervisedConfig, eval_network, evaluate_cartpole, loss_on_batch, train_bc, train_supervised,
)

XOR_DEV = EvoDevConfig(cycles=3, max_nodes=16, all_pairs=False, growth_noise=0.1, eval_steps=4)
TOY_DEV = DiffDevConfig(growth_steps=6, embedding_dim=4, n_in=2, n_out=2, conv_hidden=8, edge_hidden=8,
                        perturb_hidden=4)
PPO_DEV = DiffDevConfig(growth_steps=4, embedding_dim=4, critic=True, conv_hidden=8, edge_hidden=8,
                        perturb_hidden=4)


def blobs(n=200, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(2, size=n)
    x = rng.standard_normal((n, 2)) * 0.3 + np.where(y[:, None] == 1, 1.0, -1.0)
    return Dataset(x, y)


# ----------------------------------------------------------------- history
def test_history_csv_round_trip(tmp_path):
    rows = [HistoryRow(0, 0.1, -0.5, 0.25, 4, 5), HistoryRow(1, 1 / 3, -0.1, 0.0, 6, 9)]
    path = tmp_path / "h.csv"
    write_history_csv(path, rows)
    assert path.read_text().splitlines()[0] == "generation_or_iter,best,mean,std,nodes,edges"
    assert read_history_csv(path) == rows


# --------------------------------------------------------------------- evo
def test_evaluate_genome_nonviable_gets_penalty():
    # an all-zero genome replicates with probability 0.5, below a 0.99 threshold
    flat = np.zeros(param_count(XOR_DEV))
    fit, nodes, _ = evaluate_genome(flat, replace(XOR_DEV, replication_threshold=0.99), FitnessSpec("xor"))
    assert nodes == 1 and fit == -1.0


def test_train_evo_is_seed_deterministic():
    cfg = EvoTrainConfig(generations=4, popsize=8, sigma0=0.5)
    calls = []
    a = train_evo(cfg, XOR_DEV, FitnessSpec("xor"), seed=3, on_generation=lambda r, p: calls.append(r))
    b = train_evo(cfg, XOR_DEV, FitnessSpec("xor"), seed=3)
    assert a.history == b.history == calls
    assert len(a.history) == 4
    assert a.best_fitness == max(r.best for r in a.history)
    assert np.array_equal(a.best_params.pack(), b.best_params.pack())


def test_train_evo_worker_pool_matches_serial():
    cfg = EvoTrainConfig(generations=2, popsize=8, sigma0=0.5)
    a = train_evo(cfg, XOR_DEV, FitnessSpec("xor"), seed=1, workers=1)
    b = train_evo(cfg, XOR_DEV, FitnessSpec("xor"), seed=1, workers=2)
    assert a.history == b.history


def test_train_evo_stops_at_target():
    cfg = EvoTrainConfig(generations=50, popsize=8, target_fitness=-10.0)
    res = train_evo(cfg, XOR_DEV, FitnessSpec("xor"), seed=0)
    assert len(res.history) == 1


def test_train_evo_validates():
    with pytest.raises(ContractError):
        train_evo(EvoTrainConfig(popsize=2), XOR_DEV, FitnessSpec("xor"))


# -------------------------------------------------------------- supervised
def test_initial_digits_loss_is_near_chance():
    cfg = DiffDevConfig(growth_steps=48, n_in=64, n_out=10, init_scale=0.3)
    train, _ = load_digits_csv()
    rng = np.random.default_rng(0)
    p = NdpDiffParams.init(cfg, rng)
    _, _, loss = loss_on_batch(p, cfg, train.inputs[:256], train.targets[:256], rng)
    assert abs(loss.value.item() - np.log(10)) < 0.3 * np.log(10)


def test_supervised_learns_separable_blobs():
    cfg = SupervisedConfig(learning_rate=1e-2, batch_size=32, iterations=300, log_every=100)
    res = train_supervised(cfg, TOY_DEV, blobs(), blobs(seed=1), seed=0)
    assert res.metric >= 0.95
    assert len(res.history) == 3 and len(res.losses) == 300
    assert np.mean(res.losses[-50:]) < np.mean(res.losses[:50])


def test_supervised_contract_errors():
    cfg = SupervisedConfig(iterations=1)
    with pytest.raises(ContractError, match="empty"):
        train_supervised(cfg, TOY_DEV, Dataset(np.zeros((0, 2)), np.zeros(0, dtype=int)))
    with pytest.raises(ContractError, match="inputs"):
        train_supervised(cfg, TOY_DEV, Dataset(np.zeros((3, 5)), np.zeros(3, dtype=int)))
    with pytest.raises(ContractError, match="labels"):
        train_supervised(cfg, TOY_DEV, Dataset(np.zeros((3, 2)), np.array([0, 1, 2])))


def test_behavioural_cloning_reduces_loss():
    rng = np.random.default_rng(0)
    obs = rng.uniform(-1.0, 1.0, (400, 4))
    acts = (obs[:, 2] + 0.5 * obs[:, 3] > 0).astype(int)
    cfg = BcConfig(learning_rate=1e-2, iterations=200, log_every=50, eval_episodes=2)
    res = train_bc(cfg, replace(PPO_DEV, critic=False), Dataset(obs, acts), seed=0)
    assert np.mean(res.losses[-20:]) < 0.7 * np.mean(res.losses[:20])
    assert 0 < res.metric <= 500


# ---------------------------------------------------------------------- ppo
def test_gae_matches_brute_force():
    rng = np.random.default_rng(0)
    r, v = rng.standard_normal(6), rng.standard_normal(6)
    boot, gamma, lam = 0.7, 0.9, 0.8
    nxt = np.append(v[1:], boot)
    delta = r + gamma * nxt - v
    expected = [sum((gamma * lam) ** (k - t) * delta[k] for k in range(t, 6)) for t in range(6)]
    assert np.allclose(gae(r, v, boot, gamma, lam), expected)


def test_gae_with_unit_lambda_is_discounted_return_minus_value():
    r, v = np.ones(4), np.array([0.5, 0.2, -0.1, 0.3])
    ret = np.array([sum(0.9 ** (k - t) for k in range(t, 4)) for t in range(4)])
    assert np.allclose(gae(r, v, 0.0, 0.9, 1.0), ret - v)


def _episode(seed=0):
    rng = np.random.default_rng(seed)
    p = NdpDiffParams.init(PPO_DEV, rng)
    return p, collect_episode(p, PPO_DEV, rng)


def test_collect_episode_records_consistent_log_probs():
    p, ep = _episode()
    assert isinstance(ep, Episode)
    assert len(ep.obs) == len(ep.actions) == len(ep.logp) == len(ep.rewards) == ep.ret
    assert np.all(ep.logp <= 0)
    assert ep.bootstrap == 0.0 or ep.ret == 500


def test_ppo_loss_at_old_policy_has_unit_ratio():
    p, ep = _episode(1)
    adv = np.linspace(-1, 1, len(ep.rewards))
    returns = np.zeros(len(ep.rewards))
    pcfg = PpoConfig(entropy_coef=0.0, value_coef=0.0)
    tape, net, loss, ratio = ppo_loss(p, PPO_DEV, ep, adv, returns, pcfg)
    assert np.allclose(ratio, 1.0)
    assert loss.value.item() == pytest.approx(-adv.mean())


def test_clipping_blocks_gradient_past_the_trust_region():
    p, ep = _episode(2)
    pcfg = PpoConfig(entropy_coef=0.0, value_coef=0.0, clip_epsilon=0.2)
    adv = np.ones(len(ep.rewards))
    # make every recorded action look 10x less likely under the old policy: ratio >> 1 + eps
    ep.logp = ep.logp - np.log(10.0)
    tape, net, loss, ratio = ppo_loss(p, PPO_DEV, ep, adv, np.zeros(len(adv)), pcfg)
    assert np.all(ratio > 1.2)
    grads = tape.backward(loss)
    assert all(np.abs(g).max() == 0.0 for g in grads.values())


def test_large_entropy_bonus_flattens_the_policy():
    p, ep = _episode(3)
    pcfg = PpoConfig(entropy_coef=10.0, value_coef=0.0, learning_rate=1e-2)
    opt = AdamState(lr=1e-2)
    adv = np.zeros(len(ep.rewards))
    for _ in range(100):
        tape, net, loss, _ = ppo_loss(p, PPO_DEV, ep, adv, np.zeros(len(adv)), pcfg)
        grads = tape.backward(loss)
        adam_step(opt, p.arrays, {k: grads[t] for k, t in net.leaves.items()})
    net = develop_diff(p, PPO_DEV, None, replay=ep.choices)
    probs = softmax(FrozenPolicy(net, PPO_DEV)(ep.obs))
    assert np.abs(probs - 0.5).max() < 0.05


def test_train_ppo_smoke_and_contracts():
    pcfg = PpoConfig(total_rollouts=4, updates_per_rollout=2, log_every=2, eval_every=2, eval_episodes=2)
    res = train_ppo(pcfg, PPO_DEV, seed=0)
    assert len(res.episode_returns) == 4
    assert [r.generation_or_iter for r in res.history] == [2, 4]
    assert [k for k, _ in res.evals] == [2, 4]
    # the kept parameters are the best-scoring ones; the reported metric uses held-out episodes
    _, policy = eval_network(res.params, PPO_DEV, pcfg.eval_seed)
    assert evaluate_cartpole(policy, 2, 1).mean() == pytest.approx(max(s for _, s in res.evals))
    assert res.metric == pytest.approx(evaluate_cartpole(policy, 2, HELD_OUT_OFFSET).mean())
    with pytest.raises(ContractError):
        train_ppo(pcfg, replace(PPO_DEV, critic=False))
    with pytest.raises(ContractError):
        train_ppo(pcfg, replace(PPO_DEV, n_in=3))
    assert CartPole.n_obs == PPO_DEV.n_in


def test_collect_rollout_shares_one_growth():
    rng = np.random.default_rng(3)
    p = NdpDiffParams.init(PPO_DEV, rng)
    episodes = collect_rollout(p, PPO_DEV, rng, 5)
    assert len(episodes) == 5
    assert all(e.choices == episodes[0].choices for e in episodes)
    assert all(len(e.obs) == len(e.rewards) == len(e.logp) for e in episodes)
    merged = merge(episodes)
    assert len(merged.actions) == sum(len(e.actions) for e in episodes)
    with pytest.raises(ContractError):
        PpoConfig(episodes_per_rollout=0).validate()


def test_bc_loss_decreases_on_bundled_expert_data(tmp_path):
    data = tmp_path / "expert.csv"
    assert main(["gen-data", "cartpole-expert", "--episodes", "2", "--out", str(data)]) == 0
    assert json.loads(data.with_suffix(".manifest.json").read_text())["generator_reward"] >= 450
    rc = cfgmod.load(cfgmod.shipped("bc"))
    dataset, header = load_trajectories_csv(data)
    res = train_bc(replace(rc.trainer, iterations=500, eval_episodes=1), rc.dev, dataset, header.discrete)
    moving = np.convolve(res.losses, np.ones(100) / 100, mode="valid")
    assert moving[-1] < moving[0]


def test_obs_norm_standardizes_and_round_trips():
    x = np.random.default_rng(0).normal([1.0, -2.0, 5.0], [0.1, 3.0, 0.0], (200, 3))
    norm = ObsNorm.fit(x)
    z = norm(x)
    assert np.allclose(z[:, :2].mean(0), 0.0) and np.allclose(z[:, :2].std(0), 1.0)
    assert np.all(norm.std[2] == 1.0)  # constant feature is shifted, not divided by zero
    again = ObsNorm.from_dict(json.loads(json.dumps(norm.to_dict())))
    assert np.array_equal(again(x), z)


def test_bc_evaluates_through_its_normalization():
    rng = np.random.default_rng(0)
    obs = rng.uniform(-0.05, 0.05, (64, 4))
    data = Dataset(obs, (obs[:, 2] > 0).astype(int))
    cfg = BcConfig(iterations=3, log_every=3, eval_episodes=1)
    res = train_bc(cfg, replace(PPO_DEV, critic=False), data)
    assert res.obs_norm is not None and np.allclose(res.obs_norm.mean, obs.mean(0))
    assert train_bc(replace(cfg, normalize_obs=False), replace(PPO_DEV, critic=False), data).obs_norm is None
