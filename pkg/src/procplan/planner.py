"""Optimal forward-search planner (A* with a goal-count heuristic, or plain BFS)."""
from __future__ import annotations

import heapq
import time
from collections import deque
from dataclasses import dataclass

from .world import (
    Domain, GroundedAction, SymbolicState, TaskInstance, applicable, apply, ground_actions,
)

TIMEOUT_CHECK_EVERY = 1024


class Unsolvable(RuntimeError):
    pass


class PlannerTimeout(RuntimeError):
    pass


@dataclass(frozen=True)
class Plan:
    actions: tuple[GroundedAction, ...]

    @property
    def cost(self) -> int:
        return len(self.actions)

    def __len__(self) -> int:
        return len(self.actions)


@dataclass(frozen=True)
class PlannerReport:
    plan: Plan | None
    expanded: int
    elapsed: float
    timed_out: bool = False

    @property
    def solved(self) -> bool:
        return self.plan is not None

    def unwrap(self) -> Plan:
        if self.timed_out:
            raise PlannerTimeout(f"timed out after {self.elapsed:.3f}s ({self.expanded} expanded)")
        if self.plan is None:
            raise Unsolvable(f"no plan ({self.expanded} expanded)")
        return self.plan


@dataclass(frozen=True)
class ValidationResult:
    success: bool
    executed_prefix: int
    goals_met: int
    final_state: SymbolicState | None = None


def relevant_actions(domain: Domain, instance: TaskInstance) -> list[GroundedAction]:
    """Ground, drop actions whose static preconditions fail at init, sort by name."""
    static = domain.static_predicates()
    init = instance.init.atoms
    out = []
    for a in ground_actions(domain, instance.objects):
        if any(p.pred in static and p not in init for p in a.pre_pos):
            continue
        if any(p.pred in static and p in init for p in a.pre_neg):
            continue
        out.append(a)
    out.sort(key=str)
    return out


class _Compiled:
    """Atoms interned to ints; states as frozensets of ints."""

    def __init__(self, actions, init, goal):
        index: dict = {}

        def ids(atoms):
            return frozenset(index.setdefault(a, len(index)) for a in atoms)

        self.init = ids(init)
        self.goal = ids(goal)
        self.actions = [(a, ids(a.pre_pos), ids(a.pre_neg), ids(a.add), ids(a.delete)) for a in actions]


def _static_unreachable(domain: Domain, instance: TaskInstance) -> bool:
    addable = {a.pred for s in domain.schemas for a in s.add}
    return any(g not in instance.init.atoms and g.pred not in addable for g in instance.goal)


def solve(instance: TaskInstance, domain: Domain, max_depth: int = 20, timeout: float = float("inf"),
          algorithm: str = "astar") -> PlannerReport:
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    start = time.perf_counter()

    def report(plan, expanded, timed_out=False):
        return PlannerReport(plan, expanded, time.perf_counter() - start, timed_out)

    if timeout <= 0:
        return report(None, 0, True)
    if instance.goal <= instance.init.atoms:
        return report(Plan(()), 0)
    if _static_unreachable(domain, instance):
        return report(None, 0)

    c = _Compiled(relevant_actions(domain, instance), instance.init.atoms, instance.goal)
    goal = c.goal
    if algorithm == "bfs":
        return _bfs(c, goal, max_depth, timeout, start, report)
    if algorithm != "astar":
        raise ValueError(f"unknown algorithm {algorithm!r}")

    # each action reduces the unmet-goal count by at most max_add, so this is consistent
    max_add = domain.max_add_effects()

    def h(state):
        return len(goal - state) / max_add

    parent: dict = {c.init: None}
    best_g = {c.init: 0}
    seq = 0
    frontier = [(h(c.init), 0, seq, c.init)]
    closed = set()
    expanded = 0
    while frontier:
        if expanded % TIMEOUT_CHECK_EVERY == 0 and time.perf_counter() - start > timeout:
            return report(None, expanded, True)
        f, g, _, state = heapq.heappop(frontier)
        if state in closed:
            continue
        if goal <= state:
            return report(_extract(parent, state), expanded)
        closed.add(state)
        expanded += 1
        if g >= max_depth:
            continue
        for act, pre, neg, add, dele in c.actions:
            if pre <= state and not (neg & state):
                nxt = (state - dele) | add
                ng = g + 1
                if nxt in closed or best_g.get(nxt, ng + 1) <= ng:
                    continue
                best_g[nxt] = ng
                parent[nxt] = (state, act)
                seq += 1
                heapq.heappush(frontier, (ng + h(nxt), ng, seq, nxt))
    return report(None, expanded)


def _bfs(c, goal, max_depth, timeout, start, report):
    parent: dict = {c.init: None}
    queue = deque([(c.init, 0)])
    expanded = 0
    while queue:
        if expanded % TIMEOUT_CHECK_EVERY == 0 and time.perf_counter() - start > timeout:
            return report(None, expanded, True)
        state, g = queue.popleft()
        expanded += 1
        if g >= max_depth:
            continue
        for act, pre, neg, add, dele in c.actions:
            if pre <= state and not (neg & state):
                nxt = (state - dele) | add
                if nxt in parent:
                    continue
                parent[nxt] = (state, act)
                if goal <= nxt:
                    return report(_extract(parent, nxt), expanded)
                queue.append((nxt, g + 1))
    return report(None, expanded)


def _extract(parent, state) -> Plan:
    acts = []
    while parent[state] is not None:
        state, act = parent[state]
        acts.append(act)
    return Plan(tuple(reversed(acts)))


def validate(instance: TaskInstance, domain: Domain, plan) -> ValidationResult:
    """Simulate `plan` from init; halt at the first inapplicable action."""
    actions = plan.actions if isinstance(plan, Plan) else tuple(plan)
    state = instance.init
    prefix = 0
    for a in actions:
        if not applicable(state, a):
            break
        state = apply(state, a)
        prefix += 1
    met = len(instance.goal & state.atoms)
    ok = prefix == len(actions) and met == len(instance.goal)
    return ValidationResult(ok, prefix, met, state)
