"""Command-line entry points.

Subcommands: generate, train, finetune, solve, eval, oracle, bench. Options
can come from a JSON key-value config file (--config); explicit flags
override file values. Exit codes: 0 success, 2 invalid config, 3 infeasible
instance, 4 oracle budget exceeded.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import bench, env, oracles
from .errors import BudgetExceededError, ConfigError, InfeasibleInstanceError
from .instances import TaskKind, generate_uniform, load_instance, parse_tsplib, save_instance, to_routing_instance
from .model import ModelConfig, RoutingPolicy, load_checkpoint
from .training import FinetuneConfig, TrainConfig, finetune, train

DATA_DIR_ENV = "MINMAX_ROUTING_DATA"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_BUDGET = 4


def _data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "."))


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object of key/value pairs")
    return data


def _merged(args: argparse.Namespace, keys: list[str]) -> dict:
    """Config-file values overridden by explicitly passed flags."""
    merged = _load_config_file(getattr(args, "config", None))
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _instance_paths(spec: str) -> list[Path]:
    path = Path(spec)
    if not path.is_absolute() and not path.exists():
        candidate = _data_dir() / spec
        if candidate.exists():
            path = candidate
    if path.is_dir():
        paths = sorted(path.glob("*.json"))
        if not paths:
            raise ConfigError(f"no instance files in {path}")
        return paths
    if path.exists():
        return [path]
    raise ConfigError(f"instance path {spec} not found")


def _load_policy(args: argparse.Namespace) -> RoutingPolicy:
    if not getattr(args, "checkpoint", None):
        raise ConfigError("this command requires --checkpoint")
    return load_checkpoint(args.checkpoint)


def _cmd_generate(args: argparse.Namespace) -> int:
    cfg = _merged(args, ["task", "n", "m", "count", "seed", "out"])
    task = TaskKind(cfg.get("task", "mtsp"))
    n, m = int(cfg["n"]), int(cfg["m"])
    count = int(cfg.get("count", 1))
    seed = int(cfg.get("seed", 0))
    out = Path(cfg.get("out") or _data_dir())
    for i in range(count):
        instance = generate_uniform(task, n, m, seed + i)
        save_instance(instance, out / f"{instance.id}.json")
    print(f"wrote {count} instance(s) to {out}")
    return EXIT_OK


def _cmd_convert(args: argparse.Namespace) -> int:
    cfg = _merged(args, ["m", "out"])
    text = Path(args.tsplib).read_text()
    rows = parse_tsplib(text)
    coords = [(x, y) for _, x, y in rows]
    instance = to_routing_instance(coords, int(cfg["m"]), instance_id=Path(args.tsplib).stem)
    path = save_instance(instance, Path(cfg.get("out") or _data_dir()) / f"{instance.id}.json")
    print(f"wrote {path} (scale_factor {instance.scale_factor:g})")
    return EXIT_OK


def _model_config(cfg: dict) -> ModelConfig:
    fields = ("embed_dim", "num_heads", "num_encoder_layers", "feedforward_dim",
              "logit_clip", "use_mpe", "use_context_encoder")
    return ModelConfig(**{k: cfg[k] for k in fields if k in cfg})


def _cmd_train(args: argparse.Namespace) -> int:
    from dataclasses import asdict

    from .training import paper_profile, toy_profile

    cfg = _merged(args, ["seed", "out", "total_steps", "batch_size", "train_n", "train_m",
                         "task", "profile"])
    profile = cfg.pop("profile", None)
    if profile is not None:
        if profile not in ("toy", "paper"):
            raise ConfigError("profile must be 'toy' or 'paper'")
        model_base, train_base = toy_profile() if profile == "toy" else paper_profile()
        base = {**asdict(model_base), **asdict(train_base)}
        base.update(cfg)
        cfg = base
    try:
        train_cfg = TrainConfig(
            **{
                k: cfg[k]
                for k in (
                    "batch_size", "num_symmetric", "learning_rate", "epochs", "epoch_size",
                    "train_n", "train_m", "gradient_clip_norm", "seed", "task",
                    "total_steps", "checkpoint_every",
                )
                if k in cfg
            }
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    import torch

    torch.manual_seed(train_cfg.seed)
    policy = RoutingPolicy(_model_config(cfg))
    out = Path(cfg.get("out") or (_data_dir() / "train_run"))
    train(policy, train_cfg, out, progress=True)
    print(f"trained {train_cfg.steps} steps; checkpoints in {out}")
    return EXIT_OK


def _cmd_finetune(args: argparse.Namespace) -> int:
    cfg = _merged(args, ["seed", "out", "target_n", "target_m", "budget_steps", "task"])
    policy = _load_policy(args)
    try:
        ft_cfg = FinetuneConfig(
            **{
                k: cfg[k]
                for k in (
                    "target_n", "target_m", "learning_rate", "batch_size", "num_symmetric",
                    "budget_steps", "budget_seconds", "gradient_clip_norm", "seed", "task",
                )
                if k in cfg
            }
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(cfg.get("out") or (_data_dir() / "finetune_run"))
    finetune(policy, ft_cfg, out)
    print(f"finetuned; checkpoints in {out}")
    return EXIT_OK


def _cmd_solve(args: argparse.Namespace) -> int:
    cfg = _merged(args, ["width", "out"])
    policy = _load_policy(args)
    width = int(cfg.get("width", 8))
    instances = [load_instance(p) for p in _instance_paths(args.instances)]
    solved = [bench.solve_augmented(inst, policy, width=width) for inst in instances]
    out = Path(cfg.get("out") or (_data_dir() / "solutions"))
    paths = bench.write_solutions(solved, out)
    for (solution, cost), path in zip(solved, paths):
        print(f"{solution.instance_id}: cost {cost:.6f} -> {path}")
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    cfg = _merged(args, ["method", "width", "seed", "report", "summary", "allow_empty_tours"])
    method = cfg.get("method", "model-greedy")
    policy = None
    if method in ("model-greedy", "model-augmented"):
        policy = _load_policy(args)
    instances = [load_instance(p) for p in _instance_paths(args.instances)]
    report = bench.evaluate(
        method,
        instances,
        policy=policy,
        rng=np.random.default_rng(int(cfg.get("seed", 0))),
        augment_width=int(cfg.get("width", 8)),
        allow_empty_tours=bool(cfg.get("allow_empty_tours", False)),
    )
    if cfg.get("report"):
        report.write_csv(cfg["report"])
    if cfg.get("summary"):
        report.write_summary(cfg["summary"])
    print(json.dumps(report.summary(), indent=2))
    return EXIT_OK


def _cmd_oracle(args: argparse.Namespace) -> int:
    cfg = _merged(args, ["allow_empty_tours", "report"])
    instances = [load_instance(p) for p in _instance_paths(args.instances)]
    allow_empty = bool(cfg.get("allow_empty_tours", False))
    for instance in instances:
        cost, solution = oracles.brute_force(instance, allow_empty_tours=allow_empty)
        assert not env.validate(solution, instance)
        print(f"{instance.id}: optimal cost {cost:.6f}")
    return EXIT_OK


def _cmd_bench(args: argparse.Namespace) -> int:
    cfg = _merged(args, ["n", "m", "count", "mode", "seed"])
    policy = _load_policy(args)
    seconds = bench.throughput_bench(
        policy,
        int(cfg.get("count", 100)),
        int(cfg["n"]),
        int(cfg["m"]),
        mode=cfg.get("mode", "serial"),
        seed=int(cfg.get("seed", 0)),
    )
    print(f"{cfg.get('mode', 'serial')}: {seconds:.3f}s for {cfg.get('count', 100)} instances")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="minmax-routing")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser):
        p.add_argument("--config", help="JSON key-value config file")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("generate", help="write synthetic instances")
    common(p)
    p.add_argument("--task", choices=[t.value for t in TaskKind])
    p.add_argument("--n", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("convert", help="convert a TSPLIB file to an instance")
    common(p)
    p.add_argument("tsplib")
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_convert)

    p = sub.add_parser("train", help="train a policy")
    common(p)
    p.add_argument("--out")
    p.add_argument("--profile", choices=["toy", "paper"])
    p.add_argument("--total-steps", dest="total_steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--train-n", dest="train_n", type=int)
    p.add_argument("--train-m", dest="train_m", type=int)
    p.add_argument("--task", choices=[t.value for t in TaskKind])
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("finetune", help="finetune the context group to a target scale")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.add_argument("--target-n", dest="target_n", type=int)
    p.add_argument("--target-m", dest="target_m", type=int)
    p.add_argument("--budget-steps", dest="budget_steps", type=int)
    p.add_argument("--task", choices=[t.value for t in TaskKind])
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("solve", help="solve instances with augmented greedy decoding")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--instances", required=True)
    p.add_argument("--width", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("eval", help="evaluate a method over an instance set")
    common(p)
    p.add_argument("--method", choices=bench.EVAL_METHODS)
    p.add_argument("--checkpoint")
    p.add_argument("--instances", required=True)
    p.add_argument("--width", type=int)
    p.add_argument("--report", help="per-instance CSV output path")
    p.add_argument("--summary", help="JSON summary output path")
    p.add_argument("--allow-empty-tours", dest="allow_empty_tours", action="store_const", const=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("oracle", help="exact brute-force costs for tiny instances")
    common(p)
    p.add_argument("--instances", required=True)
    p.add_argument("--allow-empty-tours", dest="allow_empty_tours", action="store_const", const=True)
    p.add_argument("--report")
    p.set_defaults(func=_cmd_oracle)

    p = sub.add_parser("bench", help="serial vs parallel throughput")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--mode", choices=["serial", "parallel"])
    p.set_defaults(func=_cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleInstanceError as exc:
        print(f"infeasible instance: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except BudgetExceededError as exc:
        print(f"oracle budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET


if __name__ == "__main__":
    sys.exit(main())
