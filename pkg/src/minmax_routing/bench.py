"""Batch evaluation, augmented inference and throughput benchmarking."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import env, oracles
from .batched import ProblemBatch, greedy_solve_batch
from .errors import BudgetExceededError, ConfigError
from .instances import Instance, TaskKind, dihedral_transform, apply_transform, generate_uniform
from .model import RoutingPolicy

EVAL_METHODS = ("model-greedy", "model-augmented", "greedy_makespan", "random", "brute_force")


@dataclass(frozen=True)
class EvalRecord:
    instance_id: str
    cost: float
    seconds: float
    skipped: bool = False


@dataclass
class EvalReport:
    method: str
    n: int
    m: int
    records: list[EvalRecord] = field(default_factory=list)

    @property
    def solved(self) -> list[EvalRecord]:
        return [r for r in self.records if not r.skipped]

    @property
    def mean_cost(self) -> float:
        solved = self.solved
        return float(np.mean([r.cost for r in solved])) if solved else float("nan")

    @property
    def mean_seconds(self) -> float:
        solved = self.solved
        return float(np.mean([r.seconds for r in solved])) if solved else float("nan")

    def summary(self) -> dict:
        mean_cost = self.mean_cost
        mean_seconds = self.mean_seconds
        return {
            "method": self.method,
            "n": self.n,
            "m": self.m,
            "count": len(self.records),
            "skipped": sum(r.skipped for r in self.records),
            "mean_cost": None if np.isnan(mean_cost) else mean_cost,
            "mean_seconds": None if np.isnan(mean_seconds) else mean_seconds,
        }

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["instance_id,n,m,cost,seconds,skipped"]
        for r in self.records:
            lines.append(f"{r.instance_id},{self.n},{self.m},{r.cost:.12g},{r.seconds:.6g},{int(r.skipped)}")
        path.write_text("\n".join(lines) + "\n")
        return path

    def write_summary(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.summary(), indent=2))
        return path


def solve_augmented(
    instance: Instance, policy: RoutingPolicy, width: int = 8
) -> tuple[env.Solution, float]:
    """Greedy-decode the first `width` dihedral variants and keep the cheapest.

    Variant 0 is the identity, so width=1 is the plain greedy solve. Node
    labels are unchanged by the transforms, so each variant's sequence is
    scored directly against the original instance; ties keep the lowest
    variant index.
    """
    if not 1 <= width <= 8:
        raise ValueError("width must be in 1..8")
    variants = [apply_transform(instance, dihedral_transform(i)) for i in range(width)]
    result = greedy_solve_batch(policy, ProblemBatch.from_instances(variants, dtype=policy.dtype))
    best: tuple[env.Solution, float] | None = None
    for row in range(width):
        solution = env.Solution(tuple(result.sequences[row]), instance.id)
        cost = env.minmax_cost(solution, instance)
        if best is None or cost < best[1]:
            best = (solution, cost)
    return best


def solve_instance(policy: RoutingPolicy, instance: Instance) -> tuple[env.Solution, float]:
    """Plain greedy solve (the width-1 augmented path)."""
    return solve_augmented(instance, policy, width=1)


def evaluate(
    method: str,
    instance_set: list[Instance],
    policy: RoutingPolicy | None = None,
    rng: np.random.Generator | None = None,
    augment_width: int = 8,
    allow_empty_tours: bool = False,
) -> EvalReport:
    """Per-instance cost and wall time for one method over an instance set.

    Wall clock covers the solve only. Oracle calls beyond the enumeration
    budget are recorded as skipped rather than failing the run.
    """
    if method not in EVAL_METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {EVAL_METHODS}")
    if method in ("model-greedy", "model-augmented") and policy is None:
        raise ConfigError(f"method {method!r} requires model parameters")
    if not instance_set:
        raise ValueError("empty instance set")
    if method == "random" and rng is None:
        rng = np.random.default_rng(0)

    report = EvalReport(method=method, n=instance_set[0].n, m=instance_set[0].m)
    for instance in sorted(instance_set, key=lambda i: i.id):
        started = time.perf_counter()
        skipped = False
        cost = float("nan")
        if method == "model-greedy":
            _, cost = solve_instance(policy, instance)
        elif method == "model-augmented":
            _, cost = solve_augmented(instance, policy, width=augment_width)
        elif method == "greedy_makespan":
            solution = oracles.greedy_makespan(instance)
            cost = env.minmax_cost(solution, instance)
        elif method == "random":
            solution = oracles.random_policy(instance, rng)
            cost = env.minmax_cost(solution, instance)
        else:
            try:
                cost, _ = oracles.brute_force(instance, allow_empty_tours=allow_empty_tours)
            except BudgetExceededError:
                skipped = True
        elapsed = time.perf_counter() - started
        report.records.append(EvalRecord(instance.id, cost, elapsed, skipped))
    return report


def throughput_bench(
    policy: RoutingPolicy,
    instance_count: int,
    n: int,
    m: int,
    mode: str = "serial",
    task: TaskKind = TaskKind.MTSP,
    seed: int = 0,
) -> float:
    """Wall seconds to greedy-solve `instance_count` instances.

    serial: one instance at a time. parallel: the whole set as one batch
    through shared read-only parameters.
    """
    if mode not in ("serial", "parallel"):
        raise ConfigError("mode must be 'serial' or 'parallel'")
    instances = [generate_uniform(task, n, m, seed + i) for i in range(instance_count)]
    batches = (
        [ProblemBatch.from_instances([i], dtype=policy.dtype) for i in instances]
        if mode == "serial"
        else [ProblemBatch.from_instances(instances, dtype=policy.dtype)]
    )
    started = time.perf_counter()
    for batch in batches:
        greedy_solve_batch(policy, batch)
    return time.perf_counter() - started


def write_solutions(
    solutions: list[tuple[env.Solution, float]], out_dir: str | Path
) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for solution, cost in solutions:
        path = out / f"{solution.instance_id or 'solution'}.json"
        path.write_text(json.dumps(env.solution_to_dict(solution, cost), indent=2))
        paths.append(path)
    return paths
