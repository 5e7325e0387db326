"""Reference solvers: exact brute force for tiny instances, a greedy makespan
heuristic, and a uniform random policy.

The brute force enumerates every assignment of cities (MPDP: pickup/delivery
pairs) to agents via restricted-growth partition strings; per-part optimal
tours come from a Held-Karp style subset DP (MTSP) or a memoized
precedence-respecting search (MPDP). Ties are broken by the lexicographically
smallest full sequence. It supports both the empty-tours-allowed and
empty-tours-forbidden regimes so the environment's no-empty-tour rule is
auditable.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import env
from .errors import BudgetExceededError, InfeasibleInstanceError
from .instances import Instance, TaskKind

# Documented enumeration limits (cities for MTSP, cities = 2*pairs for MPDP).
MAX_BRUTE_FORCE_CITIES_MTSP = 12
MAX_BRUTE_FORCE_CITIES_MPDP = 10
MAX_BRUTE_FORCE_AGENTS = 4

_TIE_EPS = 1e-12


def _check_budget(instance: Instance) -> None:
    limit = (
        MAX_BRUTE_FORCE_CITIES_MTSP
        if instance.task_kind == TaskKind.MTSP
        else MAX_BRUTE_FORCE_CITIES_MPDP
    )
    if instance.n > limit or instance.m > MAX_BRUTE_FORCE_AGENTS:
        raise BudgetExceededError(
            f"brute force refused: N={instance.n}, M={instance.m} exceeds the "
            f"documented limits (N <= {limit} for {instance.task_kind.value}, "
            f"M <= {MAX_BRUTE_FORCE_AGENTS})"
        )


def _partitions(num_items: int, num_parts: int) -> Iterator[list[int]]:
    """Set partitions of items 0..num_items-1 into exactly num_parts parts,
    yielded as restricted-growth label lists (each partition once)."""
    labels = [0] * num_items

    def rec(i: int, used: int):
        if num_items - i < num_parts - used:
            return
        if i == num_items:
            if used == num_parts:
                yield labels.copy()
            return
        for lab in range(min(used + 1, num_parts)):
            labels[i] = lab
            yield from rec(i + 1, max(used, lab + 1))

    yield from rec(0, 0)


class _TourTable:
    """Per-subset optimal closed tours for one instance (shared depot)."""

    def __init__(self, instance: Instance):
        self.instance = instance
        cities = instance.city_coords
        depot = instance.depot_coords[0]
        diff = cities[:, None, :] - cities[None, :, :]
        self.d_cc = np.linalg.norm(diff, axis=2)
        self.d_dc = np.linalg.norm(cities - depot, axis=1)
        self._cache: dict[int, tuple[float, tuple[int, ...]]] = {0: (0.0, ())}

    def best(self, subset_mask: int) -> tuple[float, tuple[int, ...]]:
        """(optimal closed-tour cost, lex-min optimal visiting order, 1-based)."""
        raise NotImplementedError


class _MtspTourTable(_TourTable):
    """Held-Karp DP over city subsets.

    g[S][j] = shortest path that starts at city j, visits all of S, and ends
    at the depot; queried only with j outside S.
    """

    def __init__(self, instance: Instance):
        super().__init__(instance)
        n = instance.n
        self.g = np.full((1 << n, n), np.inf)
        self.g[0, :] = self.d_dc
        for mask in range(1, 1 << n):
            best = np.full(n, np.inf)
            rest = mask
            while rest:
                k = (rest & -rest).bit_length() - 1
                rest &= rest - 1
                best = np.minimum(best, self.d_cc[:, k] + self.g[mask ^ (1 << k), k])
            self.g[mask] = best

    def best(self, subset_mask: int) -> tuple[float, tuple[int, ...]]:
        cached = self._cache.get(subset_mask)
        if cached is not None:
            return cached
        members = _mask_members(subset_mask)
        cost = min(self.d_dc[c] + self.g[subset_mask ^ (1 << c), c] for c in members)
        # Reconstruct the lex-smallest optimal order by greedy argmin choice.
        order: list[int] = []
        mask = subset_mask
        current = -1
        for step in range(len(members)):
            for c in _mask_members(mask):
                head = self.d_dc[c] if step == 0 else self.d_cc[current, c]
                target = cost if step == 0 else self.g[mask][current]
                if head + self.g[mask ^ (1 << c), c] == target:
                    order.append(c + 1)
                    mask ^= 1 << c
                    current = c
                    break
        result = (float(cost), tuple(order))
        self._cache[subset_mask] = result
        return result


class _MpdpTourTable(_TourTable):
    """Optimal precedence-respecting tour per subset of pickup/delivery pairs.

    Pair i (0-based) is pickup city i+1 and delivery city i+1+P. Depth-first
    search in ascending city order with branch-and-bound pruning; the first
    optimum kept under strictly-better replacement plus explicit lex
    comparison on ties is the lex-min optimal order.
    """

    def __init__(self, instance: Instance):
        super().__init__(instance)
        self.pairs = instance.num_pairs

    def best(self, pair_mask: int) -> tuple[float, tuple[int, ...]]:
        cached = self._cache.get(pair_mask)
        if cached is not None:
            return cached
        pairs = _mask_members(pair_mask)
        size = 2 * len(pairs)
        best_cost = np.inf
        best_order: tuple[int, ...] = ()
        order: list[int] = []

        def rec(pending_picks: list[int], open_picks: list[int], current: int, length: float):
            nonlocal best_cost, best_order
            if length > best_cost + _TIE_EPS:
                return
            if len(order) == size:
                total = length + (self.d_dc[current] if current >= 0 else 0.0)
                candidate = tuple(c + 1 for c in order)
                if total < best_cost - _TIE_EPS or (
                    total <= best_cost + _TIE_EPS and (not best_order or candidate < best_order)
                ):
                    best_cost = min(best_cost, total)
                    best_order = candidate
                return
            # Candidates in ascending 0-based city row: pickup p is row p,
            # delivery of pair p is row p + P.
            moves = sorted(pending_picks + [self.pairs + p for p in open_picks])
            for city in moves:
                step = self.d_dc[city] if current < 0 else self.d_cc[current, city]
                order.append(city)
                if city < self.pairs:
                    rec(
                        [p for p in pending_picks if p != city],
                        open_picks + [city],
                        city,
                        length + step,
                    )
                else:
                    pair = city - self.pairs
                    rec(pending_picks, [p for p in open_picks if p != pair], city, length + step)
                order.pop()

        rec(pairs, [], -1, 0.0)
        result = (float(best_cost), best_order)
        self._cache[pair_mask] = result
        return result

    def pair_cities(self, pair_mask: int) -> tuple[int, ...]:
        out = []
        for p in _mask_members(pair_mask):
            out.extend((p + 1, p + 1 + self.pairs))
        return tuple(out)


def _mask_members(mask: int) -> list[int]:
    members = []
    while mask:
        members.append((mask & -mask).bit_length() - 1)
        mask &= mask - 1
    return members


def _assemble_sequence(parts: list[tuple[int, ...]], n: int, m: int) -> tuple[int, ...]:
    """Concatenate part orders (padded with empty tours) into a full sequence,
    picking the agent assignment that lex-minimizes it. Depot tokens compare
    greater than any city, so sort on order + (sentinel,)."""
    padded = list(parts) + [()] * (m - len(parts))
    sentinel = n + m + 1
    padded.sort(key=lambda order: order + (sentinel,))
    sequence: list[int] = []
    for agent, order in enumerate(padded, start=1):
        sequence.extend(order)
        sequence.append(n + agent)
    return tuple(sequence)


def brute_force(instance: Instance, allow_empty_tours: bool = False) -> tuple[float, env.Solution]:
    """Exact min-max optimum by exhaustive partition enumeration.

    Returns (optimal cost in original units, one arg-min solution); ties are
    broken by the lexicographically smallest sequence. Refuses instances above
    the documented size limits.
    """
    _check_budget(instance)
    if not instance.has_shared_depot():
        raise ValueError("brute force supports shared-depot instances only")
    n, m = instance.n, instance.m

    if instance.task_kind == TaskKind.MTSP:
        table: _TourTable = _MtspTourTable(instance)
        num_units = n
        unit_cities = None
    else:
        table = _MpdpTourTable(instance)
        num_units = instance.num_pairs
        unit_cities = table.pair_cities

    if not allow_empty_tours and num_units < m:
        raise InfeasibleInstanceError(
            f"no solution without empty tours: {num_units} assignable units for {m} agents"
        )

    part_counts = range(1, m + 1) if allow_empty_tours else [min(m, num_units)]
    best_cost = np.inf
    best_seq: tuple[int, ...] | None = None
    for k in part_counts:
        if k > num_units:
            continue
        for labels in _partitions(num_units, k):
            masks = [0] * k
            for item, lab in enumerate(labels):
                masks[lab] |= 1 << item
            cost = max(table.best(mask)[0] for mask in masks)
            if cost > best_cost + _TIE_EPS:
                continue
            seq = _assemble_sequence([table.best(mask)[1] for mask in masks], n, m)
            if cost < best_cost - _TIE_EPS or best_seq is None or (seq < best_seq):
                best_cost = min(best_cost, cost)
                best_seq = seq
    assert best_seq is not None
    solution = env.Solution(best_seq, instance.id)
    return float(best_cost) * instance.scale_factor, solution


def greedy_makespan(instance: Instance) -> env.Solution:
    """Deterministic makespan-balancing construction.

    Repeatedly assigns the (agent, city) pair that minimizes the resulting
    maximum of per-agent tour-so-far lengths, reserving cities (MPDP: pairs)
    for agents that have none yet, then closes all tours in agent order.
    Tie-break: lowest city index, then lowest agent index.
    """
    if not env.is_feasible_instance(instance):
        raise InfeasibleInstanceError(
            f"greedy_makespan needs N >= {env.min_cities_required(instance)} for M={instance.m}"
        )
    n, m = instance.n, instance.m
    coords = instance.all_coords
    positions = [instance.coord(n + a) for a in range(1, m + 1)]
    lengths = [0.0] * m
    tours: list[list[int]] = [[] for _ in range(m)]
    open_pickups: list[set[int]] = [set() for _ in range(m)]
    unvisited = set(range(1, n + 1))
    half = instance.num_pairs

    while unvisited:
        empty_agents = [a for a in range(m) if not tours[a]]
        candidates: list[tuple[float, int, int]] = []  # (resulting max, city, agent)
        if instance.task_kind == TaskKind.MTSP:
            reserve = len(unvisited) <= len(empty_agents)
            for a in range(m):
                if reserve and tours[a]:
                    continue
                for c in unvisited:
                    new_len = lengths[a] + float(np.linalg.norm(coords[c - 1] - positions[a]))
                    resulting = max(new_len, *(lengths[:a] + lengths[a + 1:]), 0.0)
                    candidates.append((resulting, c, a))
        else:
            pickups_left = [c for c in unvisited if c <= half]
            reserve = len(pickups_left) <= len(empty_agents)
            for a in range(m):
                moves = [half + p for p in open_pickups[a]]
                if not (reserve and tours[a]):
                    moves.extend(pickups_left)
                for c in moves:
                    new_len = lengths[a] + float(np.linalg.norm(coords[c - 1] - positions[a]))
                    resulting = max(new_len, *(lengths[:a] + lengths[a + 1:]), 0.0)
                    candidates.append((resulting, c, a))
        resulting, city, agent = min(candidates)
        lengths[agent] += float(np.linalg.norm(coords[city - 1] - positions[agent]))
        positions[agent] = coords[city - 1]
        tours[agent].append(city)
        unvisited.discard(city)
        if instance.task_kind == TaskKind.MPDP:
            if city <= half:
                open_pickups[agent].add(city)
            else:
                open_pickups[agent].discard(city - half)

    sequence: list[int] = []
    for a in range(m):
        sequence.extend(tours[a])
        sequence.append(n + a + 1)
    return env.Solution(tuple(sequence), instance.id)


def random_policy(instance: Instance, rng: np.random.Generator) -> env.Solution:
    """Uniform choice among feasible actions at every step."""
    if not env.is_feasible_instance(instance):
        raise InfeasibleInstanceError(
            f"random_policy needs N >= {env.min_cities_required(instance)} for M={instance.m}"
        )
    state = env.initial_state(instance)
    while not state.terminal:
        mask = env.feasible_actions(state, instance)
        choices = np.flatnonzero(mask) + 1
        state = env.apply_action(state, int(rng.choice(choices)), instance)
    return env.Solution(state.partial_sequence, instance.id)
