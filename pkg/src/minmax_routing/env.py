"""Sequential-generation environment for min-max routing.

A solution is a permutation of the indices 1..N+M: 1..N are cities and
N+1..N+M are per-agent dummy depot tokens. Selecting agent m's token closes
its tour; tokens are forced in increasing agent order, so the token positions
partition the sequence into the M agent tours. The cost of a solution is the
maximum cyclic tour length over agents.

States are immutable; `apply_action` returns a new state, so many rollouts can
run concurrently without shared mutable data.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConstraintViolationError, IllegalStateError, InvalidSolutionError
from .instances import Instance, TaskKind


@dataclass(frozen=True)
class Solution:
    """Permutation of 1..N+M; `sequence` uses 1-based node indices."""

    sequence: tuple[int, ...]
    instance_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "sequence", tuple(int(e) for e in self.sequence))


@dataclass(frozen=True)
class SequenceState:
    """Rolling decoder state of a partially generated solution.

    `remaining_cities` is N_t and `idle_agents` is M_t = M minus the number of
    closed tours. `open_pickups` holds pickups collected by the active agent
    whose deliveries are still pending (MPDP only). The active agent's current
    position is `last_node`; at a tour start this is its own depot token.
    """

    t: int
    active_agent: int               # 1..M
    visited: np.ndarray             # (N+M,) bool; entry i-1 <-> node i
    last_node: int                  # 1-based node index
    per_agent_length: np.ndarray    # (M,)
    remaining_cities: int
    idle_agents: int
    cities_in_tour: int
    open_pickups: frozenset[int]
    partial_sequence: tuple[int, ...]

    @property
    def terminal(self) -> bool:
        return self.idle_agents == 0


def initial_state(instance: Instance) -> SequenceState:
    visited = np.zeros(instance.num_tokens, dtype=bool)
    visited.setflags(write=False)
    lengths = np.zeros(instance.m, dtype=np.float64)
    lengths.setflags(write=False)
    return SequenceState(
        t=0,
        active_agent=1,
        visited=visited,
        last_node=instance.n + 1,
        per_agent_length=lengths,
        remaining_cities=instance.n,
        idle_agents=instance.m,
        cities_in_tour=0,
        open_pickups=frozenset(),
        partial_sequence=(),
    )


def feasible_actions(state: SequenceState, instance: Instance) -> np.ndarray:
    """Boolean mask over node indices 1..N+M (entry i-1 <-> node i).

    Rules: visited nodes are infeasible; among depots only the active agent's
    own token can be feasible, and only once its tour holds at least one city
    (no empty tours), all its pickups are delivered (MPDP), and - for the last
    agent - no city remains. Cities are additionally withheld when the
    remaining stock is exactly reserved for the agents that have not started,
    which keeps at least one action feasible at every reachable state.
    """
    if state.terminal:
        raise IllegalStateError("feasible_actions on a terminal state")
    n, m = instance.n, instance.m
    mask = np.zeros(n + m, dtype=bool)
    agents_after = m - state.active_agent
    if instance.task_kind == TaskKind.MTSP:
        if state.remaining_cities > agents_after:
            mask[:n] = ~state.visited[:n]
    else:
        half = instance.num_pairs
        unvisited_pickups = ~state.visited[:half]
        if int(unvisited_pickups.sum()) > agents_after:
            mask[:half] = unvisited_pickups
        for pickup in state.open_pickups:
            mask[pickup + half - 1] = True
    depot_ok = state.cities_in_tour >= 1 and not state.open_pickups
    if state.active_agent == m:
        depot_ok = depot_ok and state.remaining_cities == 0
    if depot_ok:
        mask[n + state.active_agent - 1] = True
    return mask


def _violation_reason(state: SequenceState, index: int, instance: Instance) -> str:
    n, m = instance.n, instance.m
    if not 1 <= index <= n + m:
        return f"index {index} out of range 1..{n + m}"
    if state.visited[index - 1]:
        return f"rule (a): node {index} already visited"
    if index > n:
        agent = index - n
        if agent != state.active_agent:
            return f"rule (b): depot token {index} belongs to agent {agent}, not the active agent"
        if state.cities_in_tour == 0:
            return "rule (c): active agent's depot is infeasible before it visits a city"
        if state.open_pickups:
            return "pair co-assignment: active agent holds undelivered pickups"
        return "rule (d): last agent cannot return while cities remain"
    if instance.task_kind == TaskKind.MPDP and instance.is_delivery(index):
        return f"rule (e): delivery {index} requires its pickup in the active agent's tour"
    return f"city reserve: remaining cities are needed by agents {state.active_agent + 1}..{m}"


def apply_action(state: SequenceState, index: int, instance: Instance) -> SequenceState:
    """Visit node `index` and return the successor state."""
    mask = feasible_actions(state, instance)
    if not (1 <= index <= instance.num_tokens) or not mask[index - 1]:
        raise ConstraintViolationError(_violation_reason(state, index, instance))

    visited = state.visited.copy()
    visited[index - 1] = True
    visited.setflags(write=False)
    lengths = state.per_agent_length.copy()
    step_dist = float(np.linalg.norm(instance.coord(index) - instance.coord(state.last_node)))
    lengths[state.active_agent - 1] += step_dist
    lengths.setflags(write=False)
    sequence = state.partial_sequence + (index,)

    if index <= instance.n:
        open_pickups = state.open_pickups
        if instance.task_kind == TaskKind.MPDP:
            if instance.is_pickup(index):
                open_pickups = open_pickups | {index}
            else:
                open_pickups = open_pickups - {instance.pickup_of(index)}
        return replace(
            state,
            t=state.t + 1,
            visited=visited,
            last_node=index,
            per_agent_length=lengths,
            remaining_cities=state.remaining_cities - 1,
            cities_in_tour=state.cities_in_tour + 1,
            open_pickups=open_pickups,
            partial_sequence=sequence,
        )

    # Depot token: the tour closes and the next agent starts at its own depot.
    next_agent = min(state.active_agent + 1, instance.m)
    idle = state.idle_agents - 1
    last_node = instance.n + next_agent if idle > 0 else index
    return replace(
        state,
        t=state.t + 1,
        active_agent=next_agent,
        visited=visited,
        last_node=last_node,
        per_agent_length=lengths,
        idle_agents=idle,
        cities_in_tour=0,
        open_pickups=frozenset(),
        partial_sequence=sequence,
    )


def validate(solution: Solution, instance: Instance) -> list[str]:
    """Check every Solution invariant; returns all violations (empty = OK)."""
    n, m = instance.n, instance.m
    seq = solution.sequence
    violations: list[str] = []
    if len(seq) != n + m:
        violations.append(f"length: expected {n + m} entries, got {len(seq)}")
    if sorted(seq) != list(range(1, n + m + 1)):
        violations.append(f"not a permutation of 1..{n + m}")
        return violations
    depot_tokens = [e for e in seq if e > n]
    if depot_tokens != list(range(n + 1, n + m + 1)):
        violations.append("depot tokens out of increasing agent order")
    if seq[-1] != n + m:
        violations.append(f"last entry must be {n + m}, got {seq[-1]}")
    if instance.task_kind == TaskKind.MPDP:
        half = instance.num_pairs
        segment_of: dict[int, int] = {}
        position: dict[int, int] = {}
        segment = 0
        for pos, e in enumerate(seq):
            if e <= n:
                segment_of[e] = segment
                position[e] = pos
            else:
                segment += 1
        for pickup in range(1, half + 1):
            delivery = pickup + half
            if segment_of.get(pickup) != segment_of.get(delivery):
                violations.append(f"pair split: pickup {pickup} and delivery {delivery} in different tours")
            elif position[delivery] < position[pickup]:
                violations.append(f"precedence: delivery {delivery} before pickup {pickup}")
    return violations


def decompose(solution: Solution, instance: Instance) -> list[tuple[int, ...]]:
    """Split a valid solution after each depot token; tour m ends with token N+m."""
    violations = validate(solution, instance)
    if violations:
        raise InvalidSolutionError(violations)
    tours: list[tuple[int, ...]] = []
    current: list[int] = []
    for e in solution.sequence:
        current.append(e)
        if e > instance.n:
            tours.append(tuple(current))
            current = []
    return tours


def tour_length(tour: tuple[int, ...], instance: Instance) -> float:
    """Cyclic length: consecutive edges plus the closing edge first-to-last.

    The last entry is the agent's depot token, so the closing edge is the
    depot-to-first-city leg. A depot-only tour has length 0.
    """
    if len(tour) == 0:
        raise ValueError("tour must be non-empty")
    if tour[-1] <= instance.n:
        raise ValueError("tour must end with a depot token")
    points = np.stack([instance.coord(e) for e in tour])
    if len(tour) == 1:
        return 0.0
    consecutive = np.linalg.norm(np.diff(points, axis=0), axis=1).sum()
    closing = np.linalg.norm(points[0] - points[-1])
    return float(consecutive + closing)


def minmax_cost(solution: Solution, instance: Instance) -> float:
    """Maximum tour length over agents, in the instance's original units."""
    tours = decompose(solution, instance)
    return max(tour_length(t, instance) for t in tours) * instance.scale_factor


def min_cities_required(instance: Instance) -> int:
    """Smallest N for which a no-empty-tour solution exists at this M."""
    if instance.task_kind == TaskKind.MPDP:
        return 2 * instance.m
    return instance.m


def is_feasible_instance(instance: Instance) -> bool:
    return instance.n >= min_cities_required(instance)


def solution_to_dict(solution: Solution, cost: float) -> dict:
    return {
        "instance_id": solution.instance_id,
        "sequence": list(solution.sequence),
        "cost": float(cost),
    }


def solution_from_dict(data: dict) -> tuple[Solution, float]:
    return Solution(tuple(data["sequence"]), str(data["instance_id"])), float(data["cost"])
