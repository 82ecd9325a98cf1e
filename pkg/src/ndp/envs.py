"""Desk-scale tasks: XOR, CartPole, small-world growth, 8x8 digits, offline trajectories."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import ContractError
from .graph import DevGraph, MetricError, small_world_metrics

DATA_DIR = Path(__file__).parent / "data"
DIGITS_CSV = DATA_DIR / "digits.csv"


class ParseError(ValueError):
    pass


# ----------------------------------------------------------------------- XOR
XOR_CASES = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
XOR_TARGETS = np.array([0.0, 1.0, 1.0, 0.0])


def xor_inputs(n_in: int) -> np.ndarray:
    """The four cases, with a constant 1.0 bias column appended when ``n_in == 3``."""
    if n_in == 2:
        return XOR_CASES.copy()
    if n_in == 3:
        return np.hstack([XOR_CASES, np.ones((4, 1))])
    raise ContractError(f"XOR policies take 2 inputs (or 3 with bias), got {n_in}")


def xor_fitness(policy: Callable | None, n_in: int = 3, penalty_nonviable: float = -1.0) -> float:
    """Negative MSE over the truth table, outputs mapped from [-1, 1] to [0, 1]."""
    if policy is None:
        return penalty_nonviable
    out = np.asarray(policy(xor_inputs(n_in)), dtype=float).reshape(4, -1)[:, 0]
    return -float(np.mean(((out + 1.0) / 2.0 - XOR_TARGETS) ** 2))


# ------------------------------------------------------------------ CartPole
GRAVITY = 9.8
CART_MASS = 1.0
POLE_MASS = 0.1
TOTAL_MASS = CART_MASS + POLE_MASS
HALF_LENGTH = 0.5
POLE_MASS_LENGTH = POLE_MASS * HALF_LENGTH
FORCE_MAG = 10.0
TAU = 0.02
X_LIMIT = 2.4
THETA_LIMIT = 12 * 2 * math.pi / 360
MAX_STEPS = 500


@dataclass(frozen=True)
class CartPoleState:
    x: float = 0.0
    x_dot: float = 0.0
    theta: float = 0.0
    theta_dot: float = 0.0
    steps: int = 0

    @property
    def obs(self) -> np.ndarray:
        return np.array([self.x, self.x_dot, self.theta, self.theta_dot])

    @property
    def failed(self) -> bool:
        return abs(self.x) > X_LIMIT or abs(self.theta) > THETA_LIMIT

    @property
    def terminal(self) -> bool:
        return self.failed or self.steps >= MAX_STEPS


def cartpole_dynamics(x, x_dot, theta, theta_dot, force):
    """One semi-implicit Euler step; works on floats or numpy arrays."""
    cos, sin = np.cos(theta), np.sin(theta)
    temp = (force + POLE_MASS_LENGTH * theta_dot ** 2 * sin) / TOTAL_MASS
    theta_acc = (GRAVITY * sin - cos * temp) / (HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos ** 2 / TOTAL_MASS))
    x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos / TOTAL_MASS
    x_dot = x_dot + TAU * x_acc
    x = x + TAU * x_dot
    theta_dot = theta_dot + TAU * theta_acc
    theta = theta + TAU * theta_dot
    return x, x_dot, theta, theta_dot


def cartpole_step(s: CartPoleState, action: int) -> tuple[CartPoleState, float, bool]:
    if s.terminal:
        raise ContractError("cannot step a terminal CartPole state")
    if action not in (0, 1):
        raise ContractError(f"action must be 0 or 1, got {action}")
    force = FORCE_MAG if action == 1 else -FORCE_MAG
    x, x_dot, theta, theta_dot = cartpole_dynamics(s.x, s.x_dot, s.theta, s.theta_dot, force)
    nxt = CartPoleState(float(x), float(x_dot), float(theta), float(theta_dot), s.steps + 1)
    return nxt, 1.0, nxt.terminal


def cartpole_reset(rng: np.random.Generator) -> CartPoleState:
    return CartPoleState(*rng.uniform(-0.05, 0.05, 4).tolist(), steps=0)


class CartPole:
    """Single-episode environment wrapper around :func:`cartpole_step`."""

    n_obs = 4
    n_actions = 2
    discrete = True

    def __init__(self, max_steps: int = MAX_STEPS):
        self.max_steps = max_steps
        self.state: CartPoleState | None = None

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.state = cartpole_reset(rng)
        return self.state.obs

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        self.state, reward, done = cartpole_step(self.state, int(action))
        return self.state.obs, reward, done or self.state.steps >= self.max_steps


def rollout(policy: Callable, env, rng: np.random.Generator, max_steps: int = MAX_STEPS) -> float:
    """Run one greedy episode and return its cumulative reward."""
    obs = env.reset(rng)
    total = 0.0
    for _ in range(max_steps):
        out = np.asarray(policy(obs), dtype=float).reshape(-1)
        action = int(np.argmax(out)) if env.discrete else out
        obs, reward, done = env.step(action)
        total += reward
        if done:
            break
    return total


def cartpole_returns(policy: Callable, rng: np.random.Generator, episodes: int,
                     max_steps: int = MAX_STEPS) -> np.ndarray:
    """Greedy returns of ``episodes`` CartPole episodes simulated side by side.

    ``policy`` maps an ``(k, 4)`` observation batch to ``(k, 2)`` outputs.
    """
    state = rng.uniform(-0.05, 0.05, (episodes, 4))
    alive = np.ones(episodes, dtype=bool)
    returns = np.zeros(episodes)
    for _ in range(max_steps):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        out = np.asarray(policy(state[idx]), dtype=float).reshape(idx.size, -1)
        force = np.where(out.argmax(axis=1) == 1, FORCE_MAG, -FORCE_MAG)
        s = state[idx]
        state[idx] = np.stack(cartpole_dynamics(s[:, 0], s[:, 1], s[:, 2], s[:, 3], force), axis=1)
        returns[idx] += 1.0
        failed = (np.abs(state[idx, 0]) > X_LIMIT) | (np.abs(state[idx, 2]) > THETA_LIMIT)
        alive[idx[failed]] = False
    return returns


# ---------------------------------------------------------------- small world
def smallworld_fitness(g: DevGraph, min_nodes: int = 10, n_random_refs: int = 5, rng_seed: int = 0,
                       penalty_nonviable: float = -2.0) -> float:
    if g.num_nodes < min_nodes or not g.is_connected():
        return penalty_nonviable
    try:
        report = small_world_metrics(g, n_random_refs=n_random_refs, rng_seed=rng_seed)
    except MetricError:
        return penalty_nonviable
    return report.sigma - abs(report.omega)


# ------------------------------------------------------------------- datasets
@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    split: str = "train"

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ContractError(f"{len(self.inputs)} inputs but {len(self.targets)} targets")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def n_in(self) -> int:
        return self.inputs.shape[1]


def split_indices(n: int, seed: int, train_fraction: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(n * train_fraction)
    return perm[:n_train], perm[n_train:]


def load_digits_csv(path=DIGITS_CSV, seed: int = 0) -> tuple[Dataset, Dataset]:
    rows, labels = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != 65:
                raise ParseError(f"line {lineno}: expected 65 values, got {len(row)}")
            try:
                values = [float(v) for v in row]
            except ValueError as exc:
                raise ParseError(f"line {lineno}: {exc}") from None
            label = values[64]
            if label != int(label) or not 0 <= label <= 9:
                raise ParseError(f"line {lineno}: label {row[64]!r} outside 0-9")
            rows.append(values[:64])
            labels.append(int(label))
    x = np.array(rows, dtype=float).reshape(-1, 64) / 16.0
    y = np.array(labels, dtype=np.int64)
    tr, te = split_indices(len(y), seed)
    return Dataset(x[tr], y[tr], "train"), Dataset(x[te], y[te], "test")


@dataclass(frozen=True)
class TrajectoryHeader:
    obs_dim: int
    act_dim: int
    discrete: bool

    def line(self) -> str:
        return f"obs_dim={self.obs_dim},act_dim={self.act_dim},discrete={int(self.discrete)}"

    @classmethod
    def parse(cls, line: str) -> "TrajectoryHeader":
        try:
            fields = dict(item.split("=", 1) for item in line.strip().split(","))
            return cls(int(fields["obs_dim"]), int(fields["act_dim"]), bool(int(fields.get("discrete", "0"))))
        except (KeyError, ValueError) as exc:
            raise ParseError(f"line 1: bad trajectory header {line.strip()!r} ({exc})") from None


def write_trajectories_csv(path, header: TrajectoryHeader, obs: np.ndarray, actions: np.ndarray) -> None:
    actions = np.asarray(actions).reshape(len(obs), -1)
    with open(path, "w", newline="") as fh:
        fh.write(header.line() + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        for o, a in zip(obs, actions):
            acts = [int(v) for v in a] if header.discrete else [repr(float(v)) for v in a]
            writer.writerow([repr(float(v)) for v in o] + acts)


def load_trajectories_csv(path) -> tuple[Dataset, TrajectoryHeader]:
    with open(path, newline="") as fh:
        header = TrajectoryHeader.parse(fh.readline())
        width = header.obs_dim + header.act_dim
        obs, acts = [], []
        for lineno, row in enumerate(csv.reader(fh), start=2):
            if not row:
                continue
            if len(row) != width:
                raise ParseError(f"line {lineno}: expected {width} values, got {len(row)}")
            try:
                values = [float(v) for v in row]
            except ValueError as exc:
                raise ParseError(f"line {lineno}: {exc}") from None
            obs.append(values[: header.obs_dim])
            acts.append(values[header.obs_dim:])
    x = np.array(obs, dtype=float).reshape(-1, header.obs_dim)
    if header.discrete and header.act_dim == 1:
        y = np.array([a[0] for a in acts], dtype=np.int64)
    else:
        y = np.array(acts, dtype=float).reshape(-1, header.act_dim)
    return Dataset(x, y, "train"), header


def write_manifest(path, header: TrajectoryHeader, generator_reward: float) -> None:
    Path(path).write_text(json.dumps({
        "obs_dim": header.obs_dim, "act_dim": header.act_dim,
        "discrete": header.discrete, "generator_reward": generator_reward,
    }, indent=2) + "\n")


# ------------------------------------------------------------------- fitness
@dataclass(frozen=True)
class FitnessSpec:
    task: str
    rollouts_per_eval: int = 8
    penalty_nonviable: float | None = None
    min_nodes: int = 10
    n_random_refs: int = 5

    def __post_init__(self):
        if self.task not in TASKS:
            raise ContractError(f"unknown task {self.task!r}; choose from {sorted(TASKS)}")
        if self.rollouts_per_eval < 1:
            raise ContractError("rollouts_per_eval must be >= 1")
        if self.penalty_nonviable is None:
            object.__setattr__(self, "penalty_nonviable", TASKS[self.task]["penalty"])

    @property
    def n_in(self) -> int:
        return TASKS[self.task]["n_in"]

    @property
    def n_out(self) -> int:
        return TASKS[self.task]["n_out"]

    def with_(self, **changes) -> "FitnessSpec":
        return replace(self, **changes)


TASKS = {
    "xor": {"n_in": 3, "n_out": 1, "penalty": -1.0},
    "cartpole": {"n_in": 4, "n_out": 2, "penalty": 0.0},
    # the topology objective still needs a nominal I/O split for role assignment
    "smallworld": {"n_in": 1, "n_out": 1, "penalty": -2.0},
}
