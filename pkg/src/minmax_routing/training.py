"""REINFORCE training with symmetric shared baselines, plus scale finetuning.

Each training instance is rolled out on L isometric variants of itself
(identity first, then random center rotations composed with a fair-coin
reflection); the baseline for an instance is the mean cost over its L rollouts,
so advantages sum to zero per instance. Finetuning reruns the same loop on
target-scale instances but updates only the context-encoder parameter group,
with the encoder's normalization statistics frozen.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .batched import ProblemBatch, batch_rollout
from .errors import ConfigError, TrainingFaultError
from .instances import (
    GeometricTransform,
    Instance,
    TaskKind,
    TransformKind,
    apply_transform,
)
from .model import DecodeMode, ModelConfig, RoutingPolicy, save_checkpoint


def default_agent_count(n: int) -> int:
    """M for a given N keeping the practical ratio 10 <= N/M <= 20."""
    return max(1, n // 15)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 512
    num_symmetric: int = 8
    learning_rate: float = 1e-4
    epochs: int = 100
    epoch_size: int = 1_280_000
    train_n: int = 50
    train_m: int | None = None
    gradient_clip_norm: float | None = None
    seed: int = 0
    task: TaskKind = TaskKind.MTSP
    total_steps: int | None = None
    checkpoint_every: int = 2000

    def __post_init__(self):
        if self.num_symmetric < 2:
            raise ConfigError("num_symmetric must be >= 2 (a one-sample shared baseline is degenerate)")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("batch_size must be >= 1 and learning_rate positive")
        object.__setattr__(self, "task", TaskKind(self.task))

    @property
    def agents(self) -> int:
        return self.train_m if self.train_m is not None else default_agent_count(self.train_n)

    @property
    def steps(self) -> int:
        if self.total_steps is not None:
            return self.total_steps
        return self.epochs * self.epoch_size // self.batch_size


@dataclass(frozen=True)
class FinetuneConfig:
    target_n: int
    target_m: int | None = None
    learning_rate: float = 1e-5
    batch_size: int = 128
    num_symmetric: int = 8
    budget_steps: int | None = None
    budget_seconds: float | None = None
    gradient_clip_norm: float | None = None
    seed: int = 0
    task: TaskKind = TaskKind.MTSP

    def __post_init__(self):
        if self.budget_steps is None and self.budget_seconds is None:
            raise ConfigError("finetune needs a step or wall-clock budget")
        if self.num_symmetric < 2:
            raise ConfigError("num_symmetric must be >= 2")
        object.__setattr__(self, "task", TaskKind(self.task))

    @property
    def agents(self) -> int:
        return self.target_m if self.target_m is not None else default_agent_count(self.target_n)


def paper_profile() -> tuple[ModelConfig, TrainConfig]:
    """The full-scale configuration (shipped for large budgets; not run in CI)."""
    return ModelConfig(), TrainConfig()


def toy_profile(seed: int = 0, task: TaskKind = TaskKind.MTSP) -> tuple[ModelConfig, TrainConfig]:
    """Desk-scale profile: N=10, M=2, 64-dim model, ~20k steps."""
    model = ModelConfig(embed_dim=64, num_heads=8, feedforward_dim=128)
    train = TrainConfig(
        batch_size=128,
        num_symmetric=8,
        learning_rate=1e-4,
        train_n=10,
        train_m=2,
        total_steps=20_000,
        seed=seed,
    )
    return model, train


def symmetric_batch(instance: Instance, num_variants: int, rng: np.random.Generator) -> list[Instance]:
    """L variants of one instance: identity first, then random isometries.

    Each non-identity variant reflects across x -> 1-x with probability 1/2
    and then rotates about the square center by a uniform angle; coordinates
    may leave the unit square (the policy consumes raw coordinates).
    """
    if num_variants < 2:
        raise ValueError("num_variants must be >= 2")
    variants = [instance]
    for _ in range(num_variants - 1):
        variant = instance
        if rng.random() < 0.5:
            variant = apply_transform(variant, GeometricTransform(TransformKind.DIHEDRAL, 1))
        angle = rng.uniform(0.0, 2.0 * math.pi)
        rotation = GeometricTransform(TransformKind.ROTATION, angle)
        variants.append(apply_transform(variant, rotation, strict=False))
    return variants


def symmetric_coords(
    coords: torch.Tensor, num_variants: int, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Tensor twin of :func:`symmetric_batch` for training batches.

    coords (B, T, 2) -> (B * L, T, 2), variant-major per instance with the
    identity in slot 0.
    """
    bsz, tokens, _ = coords.shape
    dtype = coords.dtype
    angles = torch.rand(bsz, num_variants, generator=generator, dtype=dtype) * (2.0 * math.pi)
    reflect = torch.rand(bsz, num_variants, generator=generator, dtype=dtype) < 0.5
    angles[:, 0] = 0.0
    reflect[:, 0] = False

    cos, sin = torch.cos(angles), torch.sin(angles)
    sign = torch.where(reflect, -torch.ones_like(cos), torch.ones_like(cos))
    # p' = R (F p + f - c) + c with R the rotation, F = diag(sign, 1) the
    # optional x -> 1-x reflection, f = ((1-sign)/2, 0), c the square center.
    center = 0.5
    fx = (1.0 - sign) * 0.5
    bx = cos * (fx - center) + sin * center + center
    by = sin * (fx - center) - cos * center + center
    x = coords[:, None, :, 0]
    y = coords[:, None, :, 1]
    new_x = (cos * sign)[:, :, None] * x - sin[:, :, None] * y + bx[:, :, None]
    new_y = (sin * sign)[:, :, None] * x + cos[:, :, None] * y + by[:, :, None]
    out = torch.stack([new_x, new_y], dim=-1)  # (B, L, T, 2)
    return out.reshape(bsz * num_variants, tokens, 2)


def shared_baseline(costs) -> float:
    """Arithmetic mean of the L rollout costs of one instance."""
    values = np.asarray(costs, dtype=np.float64)
    if values.size == 0:
        raise ValueError("shared_baseline needs at least one cost")
    return float(values.mean())


def reinforce_loss(costs: torch.Tensor, log_probs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Surrogate whose gradient is the shared-baseline policy gradient.

    costs, log_probs: (B, L). Advantage = cost - per-instance mean cost, so a
    gradient-descent step lowers the probability of worse-than-baseline
    rollouts; instances whose L costs coincide contribute zero gradient.
    """
    baseline = costs.mean(dim=1, keepdim=True)
    advantage = (costs - baseline).detach()
    loss = (advantage * log_probs).mean()
    return loss, advantage


def _gradient_norm(parameters) -> float:
    total = 0.0
    for p in parameters:
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return math.sqrt(total)


def reinforce_step(
    policy: RoutingPolicy,
    optimizer: torch.optim.Optimizer,
    coords: torch.Tensor,
    num_symmetric: int,
    generator: torch.Generator,
    task: TaskKind,
    n: int,
    m: int,
    gradient_clip_norm: float | None = None,
) -> dict[str, float]:
    """One optimizer step: L sampled rollouts per instance, shared baseline."""
    bsz = coords.shape[0]
    sym = symmetric_coords(coords, num_symmetric, generator)
    batch = ProblemBatch(task, n, m, sym, torch.ones(sym.shape[0], dtype=coords.dtype))
    result = batch_rollout(policy, batch, DecodeMode.SAMPLE, generator=generator)
    costs = result.cost.detach().view(bsz, num_symmetric)
    log_probs = result.log_prob.view(bsz, num_symmetric)
    loss, advantage = reinforce_loss(costs, log_probs)
    if not torch.isfinite(loss):
        raise TrainingFaultError(
            "non-finite training loss",
            snapshot={
                "loss": float(loss.detach()),
                "mean_cost": float(costs.mean()),
                "finite_log_probs": bool(torch.isfinite(log_probs.detach()).all()),
            },
        )
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    trained = [p for group in optimizer.param_groups for p in group["params"]]
    if gradient_clip_norm is not None:
        torch.nn.utils.clip_grad_norm_(trained, gradient_clip_norm)
    grad_norm = _gradient_norm(trained)
    optimizer.step()
    return {
        "loss": float(loss.detach()),
        "mean_cost": float(costs.mean()),
        "mean_abs_advantage": float(advantage.abs().mean()),
        "grad_norm": grad_norm,
    }


class MetricsLog:
    """CSV metrics writer for a training run directory."""

    FIELDS = ("step", "mean_cost", "loss", "grad_norm")

    def __init__(self, path: Path):
        self.path = path
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh).writerow(self.FIELDS)

    def append(self, step: int, metrics: dict[str, float]) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(
                [step, metrics["mean_cost"], metrics["loss"], metrics["grad_norm"]]
            )


def train(
    policy: RoutingPolicy,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    log_every: int = 50,
    progress: bool = False,
) -> list[dict[str, float]]:
    """Run the REINFORCE loop; writes config, metrics CSV and checkpoints."""
    out = Path(out_dir) if out_dir is not None else None
    log = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_config.json").write_text(json.dumps(_config_dict(config), indent=2))
        (out / "model_config.json").write_text(json.dumps(asdict(policy.config), indent=2))
        log = MetricsLog(out / "metrics.csv")

    generator = torch.Generator().manual_seed(config.seed)
    optimizer = torch.optim.Adam(policy.parameters(), lr=config.learning_rate)
    policy.train()
    history: list[dict[str, float]] = []
    n, m = config.train_n, config.agents
    try:
        for step in range(1, config.steps + 1):
            coords = ProblemBatch.sample(
                config.task, config.batch_size, n, m, generator=generator, dtype=policy.dtype
            ).coords
            metrics = reinforce_step(
                policy,
                optimizer,
                coords,
                config.num_symmetric,
                generator,
                config.task,
                n,
                m,
                config.gradient_clip_norm,
            )
            if step % log_every == 0 or step == 1 or step == config.steps:
                history.append({"step": step, **metrics})
                if log is not None:
                    log.append(step, metrics)
                if progress:
                    print(
                        f"step {step}/{config.steps} cost {metrics['mean_cost']:.4f} "
                        f"loss {metrics['loss']:.5f} grad {metrics['grad_norm']:.3f}",
                        flush=True,
                    )
            if out is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                save_checkpoint(policy, out / f"checkpoint_{step:07d}.pt")
    except TrainingFaultError as fault:
        if out is not None:
            save_checkpoint(policy, out / "checkpoint_fault.pt")
            (out / "fault.json").write_text(json.dumps(fault.snapshot, indent=2))
        raise
    finally:
        policy.eval()
    if out is not None:
        save_checkpoint(policy, out / "checkpoint_final.pt")
    return history


def finetune(
    policy: RoutingPolicy,
    config: FinetuneConfig,
    out_dir: str | Path | None = None,
    log_every: int = 50,
) -> list[dict[str, float]]:
    """Adapt the context-encoder group to a target scale.

    Only theta_context receives optimizer updates; the encoder runs with
    frozen normalization statistics so theta_en stays bit-identical.
    """
    out = Path(out_dir) if out_dir is not None else None
    log = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "finetune_config.json").write_text(json.dumps(_config_dict(config), indent=2))
        log = MetricsLog(out / "metrics.csv")

    generator = torch.Generator().manual_seed(config.seed)
    optimizer = torch.optim.Adam(policy.context.parameters(), lr=config.learning_rate)
    policy.train()
    policy.encoder.eval()
    frozen = list(policy.encoder.parameters()) + list(policy.decoder.parameters())
    for param in frozen:
        param.requires_grad_(False)
    history: list[dict[str, float]] = []
    n, m = config.target_n, config.agents
    started = time.perf_counter()
    step = 0
    try:
        while True:
            if config.budget_steps is not None and step >= config.budget_steps:
                break
            if (
                config.budget_seconds is not None
                and time.perf_counter() - started >= config.budget_seconds
            ):
                break
            step += 1
            coords = ProblemBatch.sample(
                config.task, config.batch_size, n, m, generator=generator, dtype=policy.dtype
            ).coords
            metrics = reinforce_step(
                policy,
                optimizer,
                coords,
                config.num_symmetric,
                generator,
                config.task,
                n,
                m,
                config.gradient_clip_norm,
            )
            if step % log_every == 0 or step == 1:
                history.append({"step": step, **metrics})
                if log is not None:
                    log.append(step, metrics)
    finally:
        for param in frozen:
            param.requires_grad_(True)
        policy.eval()
    if out is not None:
        save_checkpoint(policy, out / "checkpoint_final.pt")
    return history


def parameter_checksums(policy: RoutingPolicy) -> dict[str, str]:
    """SHA-256 over every tensor (parameters and buffers) per named group."""
    sums = {}
    for name, module in policy.parameter_groups().items():
        digest = hashlib.sha256()
        for key, tensor in sorted(module.state_dict().items()):
            digest.update(key.encode())
            digest.update(tensor.detach().cpu().numpy().tobytes())
        sums[name] = digest.hexdigest()
    return sums


def _config_dict(config) -> dict:
    data = asdict(config)
    for key, value in data.items():
        if isinstance(value, TaskKind):
            data[key] = value.value
    return data
