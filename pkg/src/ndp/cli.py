"""Command-line entry point: ``ndp train | eval | grow | gen-data``.

Exit codes: 0 success, 1 runtime failure, 2 invalid input (config,
checkpoint, arguments).  ``NDP_LOG`` sets the log level (default WARNING).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .autodiff import ContractError
from .config import ConfigError, RunConfig
from .diff import DiffDevConfig, NdpDiffParams, develop_diff
from .envs import (XOR_TARGETS, CartPole, FitnessSpec, ParseError, TrajectoryHeader, load_digits_csv,
                   load_trajectories_csv, rollout, write_manifest, write_trajectories_csv, xor_inputs)
from .evo import NdpEvoParams, develop
from .graph import DevGraph, MetricError, export_dot, small_world_metrics
from .trainers.evo import default_workers, make_policy, train_evo
from .trainers.history import write_history_csv
from .trainers.ppo import train_ppo
from .trainers.supervised import (
    EVAL_GROWTH_SEED, ObsNorm, accuracy, bc_obs_norm, eval_network, evaluate_cartpole, train_bc, train_supervised,
)

log = logging.getLogger("ndp")

DATA_DIR = Path(__file__).parent / "data"
EXPERT_CHECKPOINT = DATA_DIR / "cartpole_expert.json"
EVAL_SEED_OFFSET = 10_000


class UsageError(ValueError):
    """Bad arguments or checkpoint; maps to exit code 2."""


# ------------------------------------------------------------------ checkpoints
def save_checkpoint(path, variant: str, task: str, params, fitness: FitnessSpec | None = None,
                    meta: dict | None = None) -> None:
    payload = {"variant": variant, "task": task, "params": json.loads(params.to_json())}
    if fitness is not None:
        payload["fitness"] = {k: v for k, v in fitness.__dict__.items()}
    if meta:
        payload["meta"] = meta
    Path(path).write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path):
    """Returns ``(variant, task, params, fitness_spec | None, meta)``."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        variant, task = data["variant"], data["task"]
        text = json.dumps(data["params"])
        if variant == "evo":
            params = NdpEvoParams.from_json(text)
            fitness = FitnessSpec(**data.get("fitness", {"task": task}))
        elif variant == "diff":
            params = NdpDiffParams.from_json(text)
            fitness = None
        else:
            raise UsageError(f"unknown variant {variant!r} in {path}")
    except (KeyError, TypeError, json.JSONDecodeError, ValueError) as exc:
        if isinstance(exc, UsageError):
            raise
        raise UsageError(f"invalid checkpoint {path}: {exc}") from exc
    return variant, task, params, fitness, data.get("meta", {})


# -------------------------------------------------------------------- helpers
def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_graph(out: Path, stem: str, g: DevGraph) -> None:
    (out / f"{stem}.json").write_text(g.to_json() + "\n", encoding="utf-8")
    (out / f"{stem}.dot").write_text(export_dot(g), encoding="utf-8")


def _stats(x) -> dict:
    x = np.asarray(x, dtype=float)
    return {"mean": float(x.mean()), "std": float(x.std()), "n": int(x.size)}


def evo_metrics(params: NdpEvoParams, spec: FitnessSpec, episodes: int, seed: int) -> tuple[dict, DevGraph]:
    """Task metrics of one evolutionary genome (fitness, returns, or topology)."""
    dev = params.cfg
    g, viable = develop(params, dev, spec.n_in, spec.n_out)
    out: dict = {"nodes": g.num_nodes, "edges": g.num_edges, "viable": bool(viable)}
    if spec.task == "xor":
        if viable:
            policy = make_policy(g, viable, dev)
            raw = np.asarray(policy(xor_inputs(spec.n_in))).reshape(-1)
            mapped = (raw + 1.0) / 2.0
            out["outputs"] = mapped.tolist()
            out["fitness"] = float(-np.mean((mapped - XOR_TARGETS) ** 2))
            out["all_correct"] = bool(np.all((mapped > 0.5) == (XOR_TARGETS > 0.5)))
        else:
            out["fitness"] = spec.penalty_nonviable
            out["all_correct"] = False
    elif spec.task == "cartpole":
        returns = np.zeros(episodes)
        if viable:
            env, rng = CartPole(), np.random.default_rng(seed)
            policy = make_policy(g, viable, dev)
            returns = np.array([rollout(policy, env, rng) for _ in range(episodes)])
        out["return"] = _stats(returns)
    else:
        try:
            rep = small_world_metrics(g, n_random_refs=10, rng_seed=seed)
            out.update({"sigma": rep.sigma, "omega": rep.omega, "clustering": rep.c,
                        "path_length": rep.l, "connected": True})
        except MetricError as exc:
            out.update({"sigma": None, "omega": None, "connected": g.is_connected(), "error": str(exc)})
    return out, g


def obs_norm_of(meta: dict) -> ObsNorm | None:
    return ObsNorm.from_dict(meta["obs_norm"]) if "obs_norm" in meta else None


def diff_metrics(params: NdpDiffParams, task: str, episodes: int, seed: int,
                 obs_norm: ObsNorm | None = None) -> tuple[dict, DevGraph]:
    cfg = params.cfg
    net, policy = eval_network(params, cfg, obs_norm=obs_norm)
    out: dict = {"nodes": net.graph.num_nodes, "edges": net.graph.num_edges}
    if task == "digits":
        _, test = load_digits_csv()
        out["accuracy"] = accuracy(policy, test)
    else:
        out["return"] = _stats(evaluate_cartpole(policy, episodes, seed))
    return out, net.graph


# ---------------------------------------------------------------------- train
def cmd_train(args) -> int:
    rc: RunConfig = cfgmod.load(args.config)
    if args.seed is not None:
        rc.seed = args.seed
    if args.workers is not None:
        rc.workers = args.workers
    out = Path(args.out or rc.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(cfgmod.dumps(rc), encoding="utf-8")
    every = getattr(args, "checkpoint_every", 0) or 0
    eval_seed = rc.seed + EVAL_SEED_OFFSET
    t0 = time.time()
    meta: dict = {}
    if rc.task == "bc":
        data, header = load_trajectories_csv(rc.data)
        norm = bc_obs_norm(rc.trainer, data)
        if norm is not None:
            meta["obs_norm"] = norm.to_dict()

    def on_log(row, params):
        # completed generations (evo records are 0-based) or iterations/rollouts
        step = row.generation + 1 if hasattr(row, "generation") else row.generation_or_iter
        if every and step % every == 0:
            save_checkpoint(out / f"checkpoint_{step:06d}.json", rc.variant, rc.task, params, rc.fitness, meta)

    report: dict = {"variant": rc.variant, "task": rc.task, "seed": rc.seed, "trainer": rc.trainer_kind}
    if rc.variant == "evo":
        workers = rc.workers or default_workers(rc.trainer.popsize)
        result = train_evo(rc.trainer, rc.dev, rc.fitness, seed=rc.seed, workers=workers, on_generation=on_log)
        params, history = result.best_params, result.history
        metrics, g = evo_metrics(params, rc.fitness, 100, eval_seed)
        report.update(best_training_fitness=result.best_fitness, restarts=result.restarts,
                      generations=len(history), param_count=int(params.flat.size), metrics=metrics)
    else:
        if rc.task == "digits":
            train, test = load_digits_csv()
            result = train_supervised(rc.trainer, rc.dev, train, test, seed=rc.seed, on_log=on_log)
            report["test_accuracy"] = result.metric
        elif rc.task == "bc":
            result = train_bc(rc.trainer, rc.dev, data, bool(header.discrete), seed=rc.seed, on_log=on_log)
            manifest = Path(rc.data).with_suffix(".manifest.json")
            report["mean_return"], report["std_return"] = result.metric, result.metric_std
            if manifest.is_file():
                gen = json.loads(manifest.read_text())["generator_reward"]
                report["generator_reward"] = gen
                report["return_ratio"] = result.metric / gen if gen else None
        else:
            result = train_ppo(rc.trainer, rc.dev, seed=rc.seed, on_log=on_log)
            r = np.asarray(result.episode_returns)
            report.update(mean_return=result.metric, std_return=result.metric_std, rollouts=int(r.size),
                          first100_mean=float(r[:100].mean()) if r.size else None,
                          last100_mean=float(r[-100:].mean()) if r.size else None, evals=result.evals)
        params, history = result.params, result.history
        net, _ = eval_network(params, rc.dev)
        g = net.graph
        report.update(param_count=params.count, nodes=g.num_nodes, edges=g.num_edges)
    write_history_csv(out / "history.csv", history)
    save_checkpoint(out / "checkpoint.json", rc.variant, rc.task, params, rc.fitness, meta)
    _write_graph(out, "graph", g)
    _write_json(out / "report.json", report)
    log.info("training finished in %.1fs", time.time() - t0)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


# ----------------------------------------------------------------------- eval
def cmd_eval(args) -> int:
    variant, task, params, fitness, meta = load_checkpoint(args.checkpoint)
    if args.episodes is not None and args.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    episodes = args.episodes or (100 if variant == "evo" else 10)
    if args.task and args.task != task:
        io = {"xor": (3, 1), "cartpole": (4, 2), "bc": (4, 2), "smallworld": (1, 1), "digits": (64, 10)}
        if args.task not in io or io[args.task] != io.get(task):
            raise UsageError(f"checkpoint was trained for {task!r}; its arity does not fit {args.task!r}")
        task = args.task
    seed = args.seed if args.seed is not None else EVAL_SEED_OFFSET
    if variant == "evo":
        spec = fitness if fitness.task == task else FitnessSpec(task)
        metrics, _ = evo_metrics(params, spec, episodes, seed)
    else:
        metrics, _ = diff_metrics(params, task, episodes, seed, obs_norm_of(meta))
    result = {"variant": variant, "task": task, "episodes": episodes, "seed": seed, "metrics": metrics}
    if "return" in metrics:
        print(f"return {metrics['return']['mean']:.2f} ± {metrics['return']['std']:.2f} over {episodes} episodes")
    elif "accuracy" in metrics:
        print(f"accuracy {metrics['accuracy']:.4f}")
    elif task == "xor":
        print(f"fitness {metrics['fitness']:.6f} all_correct={metrics['all_correct']}")
    else:
        print(f"sigma {metrics.get('sigma')} omega {metrics.get('omega')}")
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "eval.json", result)
    return 0


# ----------------------------------------------------------------------- grow
def cmd_grow(args) -> int:
    variant, task, params, fitness, _ = load_checkpoint(args.checkpoint)
    if args.steps is not None and args.steps < 0:
        raise UsageError("--steps must be >= 0")
    out = Path(args.out or "grow")
    out.mkdir(parents=True, exist_ok=True)
    snaps: list[DevGraph] = []
    if variant == "evo":
        dev = params.cfg
        if args.steps:
            dev = replace(dev, cycles=args.steps)
        develop(NdpEvoParams(dev, params.flat), dev, fitness.n_in, fitness.n_out, snaps)
        if args.steps == 0:
            snaps = snaps[:1]
    else:
        cfg = params.cfg
        if args.steps is not None:
            cfg = DiffDevConfig.from_dict({**cfg.to_dict(), "growth_steps": args.steps})
        seed = args.seed if args.seed is not None else EVAL_GROWTH_SEED
        develop_diff(NdpDiffParams(cfg, params.arrays), cfg, np.random.default_rng(seed), snapshots=snaps)
    with (out / "summary.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "nodes", "edges"])
        for k, g in enumerate(snaps):
            w.writerow([k, g.num_nodes, g.num_edges])
            _write_graph(out, f"step_{k:03d}", g)
    last = snaps[-1]
    print(f"{len(snaps)} snapshots; final graph {last.num_nodes} nodes, {last.num_edges} edges")
    return 0


# ------------------------------------------------------------------- gen-data
def cmd_gen_data(args) -> int:
    if args.kind != "cartpole-expert":
        raise UsageError(f"unknown data kind {args.kind!r}; available: cartpole-expert")
    ckpt = Path(args.checkpoint) if args.checkpoint else EXPERT_CHECKPOINT
    variant, task, params, _, meta = load_checkpoint(ckpt)
    if variant != "diff" or task not in ("cartpole", "bc"):
        raise UsageError(f"{ckpt} is not a differentiable CartPole policy")
    episodes = args.episodes
    if episodes < 1:
        raise UsageError("--episodes must be >= 1")
    seed = args.seed if args.seed is not None else 0
    _, policy = eval_network(params, params.cfg, obs_norm=obs_norm_of(meta))
    rng = np.random.default_rng(seed)
    env = CartPole()
    obs_rows, act_rows, returns = [], [], []
    for _ in range(episodes):
        obs, total, done = env.reset(rng), 0.0, False
        while not done:
            a = int(np.argmax(policy(obs)))
            obs_rows.append(obs)
            act_rows.append(a)
            obs, r, done = env.step(a)
            total += r
        returns.append(total)
    header = TrajectoryHeader(obs_dim=4, act_dim=1, discrete=True)
    path = Path(args.out or "cartpole_expert.csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    write_trajectories_csv(path, header, np.array(obs_rows), np.array(act_rows))
    reward = float(np.mean(returns))
    write_manifest(path.with_suffix(".manifest.json"), header, reward)
    print(f"wrote {len(obs_rows)} transitions from {episodes} episodes to {path}; generator_reward {reward:.1f}")
    return 0


# ----------------------------------------------------------------------- main
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ndp", description="Grow neural networks with developmental programs.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a trainer from a TOML config")
    p.add_argument("--config", required=True, help="TOML config path, or the name of a shipped config")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory (default: config output_dir)")
    p.add_argument("--checkpoint-every", type=int, default=0, help="extra checkpoint every N generations/iterations")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", help="task to evaluate on (default: the checkpoint's task)")
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="directory for eval.json (default: next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grow", help="export the growth trace of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--steps", type=int, help="developmental cycles (evo) or growth steps (diff)")
    p.add_argument("--seed", type=int, help="growth sampling seed (diff)")
    p.add_argument("--out", help="snapshot directory (default: ./grow)")
    p.set_defaults(func=cmd_grow)

    p = sub.add_parser("gen-data", help="write an expert trajectory dataset")
    p.add_argument("kind", help="dataset kind (cartpole-expert)")
    p.add_argument("--out", help="CSV path (manifest is written next to it)")
    p.add_argument("--seed", type=int)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--checkpoint", help="expert checkpoint (default: the bundled PPO expert)")
    p.set_defaults(func=cmd_gen_data)
    return parser


def _resolve_config(value: str) -> str:
    if Path(value).exists() or value.endswith(".toml"):
        return value
    try:
        return str(cfgmod.shipped(value))
    except ConfigError:
        return value


def main(argv=None) -> int:
    level = getattr(logging, os.environ.get("NDP_LOG", "WARNING").upper(), None)
    logging.basicConfig(level=level if isinstance(level, int) else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if getattr(args, "config", None):
        args.config = _resolve_config(args.config)
    try:
        return args.func(args)
    except (ConfigError, UsageError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, ValueError, OSError) as exc:
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
