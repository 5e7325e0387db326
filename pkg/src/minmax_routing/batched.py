"""Vectorized rollouts over batches of same-shape instances.

This is the high-throughput twin of the scalar reference path
(:func:`minmax_routing.model.RoutingPolicy.rollout` over
:mod:`minmax_routing.env`): identical masking rules and transitions, expressed
as tensor operations so that training batches and parallel evaluation run a
whole batch through the policy per decoding step. Agreement between the two
paths is enforced by tests.

Action selection loops without gradient recording; the log probabilities of
the chosen sequence are then recomputed for all steps in one teacher-forced
replay pass, which is where gradients flow during training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import InfeasibleInstanceError
from .instances import Instance, TaskKind
from .model import DecodeMode, RoutingPolicy


@dataclass
class ProblemBatch:
    """A batch of instances sharing task kind, N and M.

    `coords` is (batch, N+M, 2): city rows first (index order 1..N), then the
    M agent depot rows.
    """

    task: TaskKind
    n: int
    m: int
    coords: torch.Tensor
    scale: torch.Tensor
    ids: tuple[str, ...] = ()

    @property
    def batch_size(self) -> int:
        return self.coords.shape[0]

    @classmethod
    def from_instances(cls, instances: list[Instance], dtype: torch.dtype = torch.float32) -> "ProblemBatch":
        if not instances:
            raise ValueError("empty instance list")
        first = instances[0]
        if any(
            i.task_kind != first.task_kind or i.n != first.n or i.m != first.m for i in instances
        ):
            raise ValueError("all instances in a batch must share task kind, N and M")
        coords = torch.stack([torch.tensor(i.all_coords, dtype=dtype) for i in instances])
        scale = torch.tensor([i.scale_factor for i in instances], dtype=dtype)
        return cls(first.task_kind, first.n, first.m, coords, scale, tuple(i.id for i in instances))

    @classmethod
    def sample(
        cls,
        task: TaskKind,
        batch_size: int,
        n: int,
        m: int,
        generator: torch.Generator | None = None,
        dtype: torch.dtype = torch.float32,
    ) -> "ProblemBatch":
        """Uniform synthetic batch; all M depot tokens share one coordinate."""
        task = TaskKind(task)
        if task == TaskKind.MPDP and n % 2 != 0:
            raise ValueError("MPDP requires an even n")
        points = torch.rand(batch_size, n + 1, 2, generator=generator, dtype=dtype)
        coords = torch.cat([points[:, :n], points[:, n:].expand(-1, m, -1)], dim=1)
        return cls(task, n, m, coords, torch.ones(batch_size, dtype=dtype))


@dataclass
class BatchRolloutResult:
    sequences: np.ndarray        # (batch, N+M) int64, 1-based node indices
    log_prob: torch.Tensor       # (batch,) sum of chosen-action log probabilities
    cost: torch.Tensor           # (batch,) max tour length, original units
    agent_lengths: torch.Tensor  # (batch, M) normalized tour lengths


def _sample_rows(probs: torch.Tensor, generator: torch.Generator | None) -> torch.Tensor:
    # Inverse-CDF sampling; searchsorted(right=True) can never return a
    # zero-probability (masked) entry for u in [0, total).
    cdf = probs.cumsum(dim=-1)
    u = torch.rand(probs.shape[0], 1, generator=generator, dtype=probs.dtype) * cdf[:, -1:]
    return torch.searchsorted(cdf, u, right=True).squeeze(1).clamp(max=probs.shape[-1] - 1)


def batch_rollout(
    policy: RoutingPolicy,
    batch: ProblemBatch,
    mode: DecodeMode = DecodeMode.GREEDY,
    generator: torch.Generator | None = None,
    forced: np.ndarray | torch.Tensor | None = None,
) -> BatchRolloutResult:
    """Decode every instance in the batch, one action column per step.

    `forced` replays given action sequences (1-based, shape (batch, N+M)) and
    returns their log probabilities under the current policy; mode is ignored
    in that case. Caller controls train/eval mode and gradient recording; the
    returned log_prob carries gradients when grad mode is on.
    """
    mode = DecodeMode(mode)
    if mode == DecodeMode.SAMPLE and generator is None and forced is None:
        raise ValueError("SAMPLE mode requires a torch.Generator")
    n, m, task = batch.n, batch.m, batch.task
    total = n + m
    pairs = n // 2 if task == TaskKind.MPDP else 0
    feasible_n = 2 * m if task == TaskKind.MPDP else m
    if n < feasible_n:
        raise InfeasibleInstanceError(f"batch needs N >= {feasible_n} for M={m}")

    dtype = policy.dtype
    coords = batch.coords.to(dtype)
    bsz = coords.shape[0]
    rows = torch.arange(bsz)
    if forced is not None:
        forced = torch.as_tensor(np.asarray(forced), dtype=torch.long) - 1

    h = policy.encoder(coords[:, :n], coords[:, n:])
    h_detached = h.detach()
    cache = policy.decoder.precompute(h)
    select_cache = tuple(t.detach() for t in cache)
    h_mean = h.mean(dim=1)
    h_mean_detached = h_mean.detach()

    # (batch, M, N) distances from each agent's depot to each city; visited
    # cities are masked to -inf in place as the rollout proceeds.
    depot_city_d = torch.linalg.vector_norm(
        coords[:, n:, None, :] - coords[:, None, :n, :], dim=-1
    ).detach()

    visited = torch.zeros(bsz, total, dtype=torch.bool)
    active = torch.zeros(bsz, dtype=torch.long)
    last = torch.full((bsz,), n, dtype=torch.long)
    lengths = torch.zeros(bsz, m, dtype=dtype)
    in_tour = torch.zeros(bsz, dtype=torch.long)
    n_rem = torch.full((bsz,), n, dtype=torch.long)
    if task == TaskKind.MPDP:
        open_pickups = torch.zeros(bsz, pairs, dtype=torch.bool)
        pickups_rem = torch.full((bsz,), pairs, dtype=torch.long)

    chosen = torch.zeros(bsz, total, dtype=torch.long)
    trace_masks = torch.zeros(bsz, total, total, dtype=torch.bool)
    trace_active = torch.zeros(bsz, total, dtype=torch.long)
    trace_last = torch.zeros(bsz, total, dtype=torch.long)
    trace_scalars = torch.zeros(bsz, total, 3, dtype=dtype)  # ratio, d_source, d_target

    with torch.no_grad():
        coords_d = coords.detach()
        for t in range(total):
            feasible = ~visited
            feasible[:, n:] = False
            agents_after = (m - 1) - active
            if task == TaskKind.MTSP:
                feasible[:, :n] &= (n_rem > agents_after).unsqueeze(1)
            else:
                feasible[:, :pairs] &= (pickups_rem > agents_after).unsqueeze(1)
                feasible[:, pairs:n] = open_pickups
            open_empty = (
                ~open_pickups.any(dim=1)
                if task == TaskKind.MPDP
                else torch.ones(bsz, dtype=torch.bool)
            )
            depot_ok = (in_tour > 0) & open_empty & ((active < m - 1) | (n_rem == 0))
            feasible[rows, n + active] = depot_ok

            ratio = n_rem.to(dtype) / (m - active).to(dtype)
            d_source = lengths[rows, active]
            d_target = depot_city_d[rows, active].amax(dim=1).clamp(min=0.0)

            trace_masks[:, t] = feasible
            trace_active[:, t] = n + active
            trace_last[:, t] = last
            trace_scalars[:, t, 0] = ratio
            trace_scalars[:, t, 1] = d_source
            trace_scalars[:, t, 2] = d_target

            if forced is not None:
                choice = forced[:, t]
            else:
                context, _ = policy.context(
                    h_mean_detached,
                    h_detached[rows, n + active],
                    h_detached[rows, last],
                    ratio,
                    d_source,
                    d_target,
                )
                logits = policy.decoder.logits(
                    context.unsqueeze(1), select_cache, feasible.unsqueeze(1)
                ).squeeze(1)
                if mode == DecodeMode.GREEDY:
                    choice = logits.argmax(dim=-1)
                else:
                    choice = _sample_rows(torch.exp(logits), generator)
            chosen[:, t] = choice

            step_d = torch.linalg.vector_norm(
                coords_d[rows, choice] - coords_d[rows, last], dim=-1
            )
            lengths = lengths.index_put((rows, active), step_d, accumulate=True)
            visited[rows, choice] = True
            is_city = choice < n
            city_rows = rows[is_city]
            depot_city_d[city_rows, :, choice[is_city]] = float("-inf")
            n_rem = n_rem - is_city.long()
            in_tour = torch.where(is_city, in_tour + 1, torch.zeros_like(in_tour))
            if task == TaskKind.MPDP:
                is_pick = choice < pairs
                is_delivery = is_city & ~is_pick
                open_pickups[rows[is_pick], choice[is_pick]] = True
                open_pickups[rows[is_delivery], (choice - pairs).clamp(min=0)[is_delivery]] = False
                pickups_rem = pickups_rem - is_pick.long()
            new_active = torch.where(is_city, active, active + 1)
            last = torch.where(is_city, choice, n + new_active.clamp(max=m - 1))
            active = new_active.clamp(max=m - 1)

    # Teacher-forced replay of the whole trajectory; gradients flow here.
    token_rows = rows.unsqueeze(1)
    contexts, _ = policy.context(
        h_mean.unsqueeze(1).expand(-1, total, -1),
        h[token_rows, trace_active],
        h[token_rows, trace_last],
        trace_scalars[:, :, 0],
        trace_scalars[:, :, 1],
        trace_scalars[:, :, 2],
    )
    log_probs_all = policy.decoder.replay(contexts, cache, trace_masks)
    total_log_prob = log_probs_all.gather(-1, chosen.unsqueeze(-1)).squeeze(-1).sum(dim=1)

    cost = lengths.max(dim=1).values * batch.scale.to(dtype)
    sequences = (chosen + 1).numpy().astype(np.int64)
    return BatchRolloutResult(sequences, total_log_prob, cost, lengths)


def greedy_solve_batch(policy: RoutingPolicy, batch: ProblemBatch) -> BatchRolloutResult:
    """Inference helper: eval mode, no gradients, greedy decode."""
    was_training = policy.training
    policy.eval()
    try:
        with torch.no_grad():
            return batch_rollout(policy, batch, DecodeMode.GREEDY)
    finally:
        policy.train(was_training)


def sample_solve_batch(
    policy: RoutingPolicy, batch: ProblemBatch, generator: torch.Generator
) -> BatchRolloutResult:
    """Inference helper: eval mode, no gradients, sampled decode."""
    was_training = policy.training
    policy.eval()
    try:
        with torch.no_grad():
            return batch_rollout(policy, batch, DecodeMode.SAMPLE, generator=generator)
    finally:
        policy.train(was_training)
