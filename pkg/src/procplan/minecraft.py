"""Built-in Minecraft-style crafting world and its task-suite generator."""
from __future__ import annotations

import random
from dataclasses import dataclass
from pathlib import Path

from . import planner
from .world import Atom, Domain, SymbolicState, TaskInstance, parse_domain, print_domain, print_instance

DOMAIN_TEXT = """\
(define (domain minecraft)
  (:types moveable agent static)
  (:predicates
    (isgrass ?v0 - moveable)
    (islog ?v0 - moveable)
    (isplanks ?v0 - moveable)
    (hypothetical ?v0 - moveable)
    (at ?v0 - moveable ?v1 - static)
    (agentat ?v0 - static)
    (adjacent ?v0 - static ?v1 - static)
    (inventory ?v0 - moveable)
    (equipped ?v0 - moveable ?v1 - agent)
  )
  (:action recall
    :parameters (?var0 - moveable ?var1 - agent)
    :precondition (and (equipped ?var0 ?var1))
    :effect (and (inventory ?var0) (not (equipped ?var0 ?var1))))
  (:action move
    :parameters (?var0 - static ?var1 - static)
    :precondition (and (agentat ?var0) (adjacent ?var0 ?var1))
    :effect (and (agentat ?var1) (not (agentat ?var0))))
  (:action craftplank
    :parameters (?var0 - moveable ?var1 - agent ?var2 - moveable)
    :precondition (and (hypothetical ?var0) (equipped ?var2 ?var1) (islog ?var2))
    :effect (and (isplanks ?var0) (inventory ?var0)
                 (not (hypothetical ?var0)) (not (equipped ?var2 ?var1))))
  (:action equip
    :parameters (?var0 - moveable ?var1 - agent)
    :precondition (and (inventory ?var0))
    :effect (and (equipped ?var0 ?var1) (not (inventory ?var0))))
  (:action pick
    :parameters (?var0 - moveable ?var1 - static)
    :precondition (and (agentat ?var1) (at ?var0 ?var1))
    :effect (and (inventory ?var0) (not (at ?var0 ?var1))))
)
"""

TASK_TYPES = (
    "move_equip", "collect_move", "craft_equip",
    "move_inventory", "equip_inventory", "craft_inventory",
)


def minecraft_domain() -> Domain:
    return parse_domain(DOMAIN_TEXT)


def loc(x: int, y: int) -> str:
    return f"loc-{x}-{y}"


def grid_atoms(w: int, h: int) -> set[Atom]:
    atoms = set()
    for x in range(w):
        for y in range(h):
            for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                nx, ny = x + dx, y + dy
                if 0 <= nx < w and 0 <= ny < h:
                    atoms.add(Atom("adjacent", (loc(x, y), loc(nx, ny))))
    return atoms


@dataclass
class SuiteConfig:
    grid_w: int = 4
    grid_h: int = 4
    max_grass: int = 2
    max_logs: int = 2
    n_new: int = 1
    distractors: int = 0  # extra grass/log items that no goal mentions
    max_depth: int = 20
    task_types: tuple[str, ...] = TASK_TYPES


def _sample(rng: random.Random, cfg: SuiteConfig, task_type: str):
    locs = [loc(x, y) for x in range(cfg.grid_w) for y in range(cfg.grid_h)]
    n_grass = rng.randint(1, cfg.max_grass)
    n_log = rng.randint(1, cfg.max_logs)
    extra = cfg.distractors
    n_grass_total = n_grass + extra // 2
    n_log_total = n_log + extra - extra // 2
    items = [f"grass-{i}" for i in range(n_grass_total)] + [f"log-{i}" for i in range(n_log_total)]
    news = [f"new-{i}" for i in range(cfg.n_new)]
    if len(items) > len(locs) * 2:
        raise ValueError("grid too small for requested object count")
    start = rng.choice(locs)
    objects = [("agent", "agent")] + [(l, "static") for l in locs]
    objects += [(m, "moveable") for m in items + news]
    init = grid_atoms(cfg.grid_w, cfg.grid_h) | {Atom("agentat", (start,))}
    for m in items:
        init.add(Atom("at", (m, rng.choice(locs))))
        init.add(Atom("isgrass" if m.startswith("grass") else "islog", (m,)))
    for m in news:
        init.add(Atom("hypothetical", (m,)))

    grass = [f"grass-{i}" for i in range(n_grass)]
    logs = [f"log-{i}" for i in range(n_log)]
    pool = grass + logs
    a, b = rng.sample(pool, 2) if len(pool) >= 2 else (pool[0], pool[0])
    new = rng.choice(news)
    target = rng.choice([l for l in locs if l != start])

    def eq(x):
        return Atom("equipped", (x, "agent"))

    if task_type == "move_equip":
        goal = {eq(a), eq(b)}
    elif task_type == "collect_move":
        goal = {eq(a), Atom("agentat", (target,))}
    elif task_type == "craft_equip":
        goal = {eq(new), Atom("isplanks", (new,))}
    elif task_type == "move_inventory":
        goal = {Atom("inventory", (a,)), Atom("agentat", (target,))}
    elif task_type == "equip_inventory":
        goal = {eq(a), Atom("inventory", (b,))}
    elif task_type == "craft_inventory":
        other = rng.choice(grass)
        goal = {Atom("inventory", (other,)), Atom("isplanks", (new,))}
    else:
        raise ValueError(f"unknown task type {task_type!r}")
    return tuple(objects), frozenset(init), frozenset(goal)


def generate_suite(cfg: SuiteConfig, n_train: int, n_test: int, seed: int,
                   prefix: str = "") -> tuple[Domain, list[TaskInstance], list[TaskInstance]]:
    """Draw unique solvable instances; the first `n_train` are train, the next `n_test` test.

    Task types cycle in a seeded random order so each split covers all of them.
    Every instance is solved by the planner and annotated with its optimal plan length.
    """
    if cfg.grid_w < 2 or cfg.grid_h < 2:
        raise ValueError("grid must be at least 2x2")
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    domain = minecraft_domain()
    rng = random.Random(seed)
    seen: set = set()
    out: list[TaskInstance] = []
    attempts = 0
    total = n_train + n_test
    while len(out) < total:
        attempts += 1
        if attempts > 200 * total:
            raise ValueError("infeasible configuration: could not draw enough unique instances")
        ttype = cfg.task_types[len(out) % len(cfg.task_types)]
        objects, init, goal = _sample(rng, cfg, ttype)
        if goal <= init:
            continue
        key = (tuple(sorted(init)), tuple(sorted(goal)))
        if key in seen:
            continue
        split = "train" if len(out) < n_train else "test"
        idx = len(out) if split == "train" else len(out) - n_train
        inst = TaskInstance(f"{prefix}{split}-{idx:03d}", objects, SymbolicState(init), goal,
                            {"task_type": ttype})
        rep = planner.solve(inst, domain, max_depth=cfg.max_depth)
        if not rep.solved:
            continue
        seen.add(key)
        inst.meta["optimal_length"] = rep.plan.cost
        inst.meta["plan"] = [str(a) for a in rep.plan.actions]
        out.append(inst)
    return domain, out[:n_train], out[n_train:]


def generate_minecraft_suite(grid_w: int, grid_h: int, n_train: int, n_test: int, seed: int, **kw):
    return generate_suite(SuiteConfig(grid_w=grid_w, grid_h=grid_h, **kw), n_train, n_test, seed)


def write_suite(out_dir, domain: Domain, train, test) -> None:
    out = Path(out_dir)
    (out / "train").mkdir(parents=True, exist_ok=True)
    (out / "test").mkdir(parents=True, exist_ok=True)
    (out / "domain.pddl").write_text(print_domain(domain))
    for split, insts in (("train", train), ("test", test)):
        for inst in insts:
            (out / split / f"{inst.id}.pddl").write_text(print_instance(inst, domain.name))
