"""Evaluation metrics, continual task sequences, and the planner latency study."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import planner
from .encoding import Vocabulary
from .inference import Banks, DecodeConfig, EpisodeResult, run_closed_loop, run_open_loop, update_banks
from .model import ProcedureLM
from .world import Domain, TaskInstance


# --------------------------------------------------------------------------- #
# episode metrics

def _nonempty(results):
    results = list(results)
    if not results:
        raise ValueError("no episode results")
    return results


def csr(results: Iterable[EpisodeResult]) -> float:
    r = _nonempty(results)
    return 100.0 * sum(e.success for e in r) / len(r)


def cgc(results: Iterable[EpisodeResult]) -> float:
    r = _nonempty(results)
    total = sum(e.goal_size for e in r)
    if total == 0:
        raise ValueError("no goal atoms in results")
    return 100.0 * sum(e.goals_met for e in r) / total


def exe(results: Iterable[EpisodeResult]) -> float:
    r = _nonempty(results)
    emitted = sum(e.emitted for e in r)
    if emitted == 0:
        raise ValueError("no actions emitted")
    return 100.0 * sum(e.feasible for e in r) / emitted


def spl(results: Iterable[EpisodeResult]) -> float:
    r = _nonempty(results)
    total = 0.0
    for e in r:
        if e.optimal_length is None:
            raise ValueError(f"episode {e.instance_id} has no optimal length")
        if e.success:
            opt = e.optimal_length
            total += 1.0 if max(opt, e.plan_length) == 0 else opt / max(opt, e.plan_length)
    return total / len(r)


def summarize(results: Sequence[EpisodeResult]) -> dict:
    out = {"n": len(results), "csr": csr(results), "cgc": cgc(results), "spl": spl(results)}
    try:
        out["exe"] = exe(results)
    except ValueError:
        out["exe"] = None
    return out


def write_episodes(path, results: Iterable[EpisodeResult], timing: bool = False) -> None:
    with open(path, "w") as fh:
        for e in results:
            fh.write(e.to_json(timing) + "\n")


def read_episodes(path) -> list[EpisodeResult]:
    return [EpisodeResult.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]


# --------------------------------------------------------------------------- #
# continual metrics

def _rate(num: int, den: int):
    """Percentage with a zero-denominator guard; returns (value, flagged)."""
    if den == 0:
        return 0.0, True
    return 100.0 * num / den, False


def forgetting_rate(prev: dict, now: dict):
    """FR: share of previously succeeded tasks that now fail."""
    before = [t for t in now if prev.get(t) is True]
    return _rate(sum(not now[t] for t in before), len(before))


def recovery_rate(prev: dict, now: dict):
    """RR: share of previously failed tasks that now succeed."""
    before = [t for t in now if prev.get(t) is False]
    return _rate(sum(bool(now[t]) for t in before), len(before))


def forward_transfer(with_banks: Sequence[bool], empty_banks: Sequence[bool]) -> float:
    """SR on new tasks with the current banks minus SR on the same tasks with empty banks."""
    if len(with_banks) != len(empty_banks):
        raise ValueError("outcome lists differ in length")
    if not with_banks:
        return 0.0
    return 100.0 * (sum(with_banks) - sum(empty_banks)) / len(with_banks)


def backward_transfer(first: dict, now: dict) -> float:
    """SR at re-evaluation minus SR at first encounter, over the re-evaluated tasks."""
    if not now:
        return 0.0
    return 100.0 * (sum(bool(now[t]) for t in now) - sum(bool(first[t]) for t in now)) / len(now)


# --------------------------------------------------------------------------- #
# continual sequences

@dataclass
class SequenceConfig:
    task_ids: list
    boundaries: list  # exclusive end index of each phase, strictly increasing
    reeval: str | list = "all"  # phases whose end triggers re-evaluation of earlier phases
    seed: int = 0
    loop: str = "open"
    max_steps: int = 20

    def __post_init__(self):
        b = list(self.boundaries)
        if not b or any(x >= y for x, y in zip([0] + b, b)) or b[-1] != len(self.task_ids):
            raise ValueError("phase boundaries must be strictly increasing and end at len(task_ids)")
        if self.loop not in ("open", "closed"):
            raise ValueError(f"bad loop mode {self.loop!r}")

    def phases(self) -> list[list]:
        out, start = [], 0
        for b in self.boundaries:
            out.append(self.task_ids[start:b])
            start = b
        return out

    def reevaluates(self, k: int) -> bool:
        return self.reeval == "all" or k in self.reeval


@dataclass
class Variant:
    """Which test-time adaptation pieces are active."""
    banks: bool = True  # banks updated between tasks
    pos: bool = True
    neg: bool = True
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    persist_memory: bool = False  # carry working memory from task to task

    @classmethod
    def stateless(cls) -> "Variant":
        return cls(banks=False, decode=DecodeConfig(use_cp=False))


@dataclass
class PhaseRecord:
    phase: int
    n_new: int
    sr_new: float
    sr_new_empty: float
    fwt: float
    n_reeval: int
    sr_reeval: float
    bwt: float
    fr: float
    rr: float
    flags: list = field(default_factory=list)


@dataclass
class ContinualReport:
    phases: list
    episodes: list  # (phase, kind, EpisodeResult) with kind in {"new", "empty", "reeval"}
    first: dict
    history: dict  # task id -> list of outcomes in evaluation order

    def series(self, name: str) -> list:
        return [getattr(p, name) for p in self.phases]


def _run(model, inst, domain, vocab, banks, variant: Variant, seq: SequenceConfig, memory=None):
    if seq.loop == "open":
        return run_open_loop(model, inst, domain, vocab, banks, variant.decode, memory)
    dc = variant.decode
    if dc.max_tokens > 16:
        dc = DecodeConfig(**{**dc.__dict__, "max_tokens": 16})
    return run_closed_loop(model, inst, domain, vocab, banks, dc, seq.max_steps, variant.persist_memory, memory)


def continual_run(model: ProcedureLM, instances: dict, domain: Domain, vocab: Vocabulary,
                  seq: SequenceConfig, variant: Variant | None = None,
                  banks: Banks | None = None) -> ContinualReport:
    """Run the task sequence phase by phase with bank updates between tasks.

    Each new task is also run with empty banks (no update) for forward transfer.
    At a re-evaluation phase k > 0 every task from phases < k is re-run with the
    banks frozen and compared with its previous outcome.
    """
    variant = variant or Variant()
    banks = banks or Banks.empty(model.cfg.d_model)
    empty = Banks.empty(model.cfg.d_model)
    first, last, history = {}, {}, {}
    records, episodes = [], []
    seen: list = []
    memory = None  # only threaded through when variant.persist_memory

    def run(inst, b):
        nonlocal memory
        ep = _run(model, inst, domain, vocab, b, variant, seq, memory)
        if variant.persist_memory:
            memory = ep.final_memory
        return ep

    for k, new in enumerate(seq.phases()):
        flags = []
        outs, base = [], []
        for tid in new:
            inst = instances[tid]
            eb = _run(model, inst, domain, vocab, empty, variant, seq, memory)
            ep = run(inst, banks)
            episodes.append((k, "new", ep))
            episodes.append((k, "empty", eb))
            outs.append(ep.success)
            base.append(eb.success)
            first[tid] = last[tid] = ep.success
            history.setdefault(tid, []).append(ep.success)
            if variant.banks:
                update_banks(banks, ep, variant.pos, variant.neg)
        now = {}
        if k > 0 and seq.reevaluates(k):
            for tid in seen:
                ep = run(instances[tid], banks)
                episodes.append((k, "reeval", ep))
                now[tid] = ep.success
                history[tid].append(ep.success)
        fr, f1 = forgetting_rate(last, now)
        rr, f2 = recovery_rate(last, now)
        if f1:
            flags.append("fr_undefined")
        if f2:
            flags.append("rr_undefined")
        last.update(now)
        sr_new = 100.0 * sum(outs) / len(outs)
        records.append(PhaseRecord(
            k, len(new), sr_new, 100.0 * sum(base) / len(base), forward_transfer(outs, base), len(now),
            100.0 * sum(now.values()) / len(now) if now else 0.0, backward_transfer(first, now), fr, rr, flags))
        seen.extend(new)
    return ContinualReport(records, episodes, first, history)


PHASE_FIELDS = ("phase", "n_new", "sr_new", "sr_new_empty", "fwt", "n_reeval", "sr_reeval", "bwt", "fr", "rr",
                "flags")


def write_phases(path, records: Sequence[PhaseRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PHASE_FIELDS)
        for r in records:
            w.writerow([getattr(r, f) if f != "flags" else ";".join(r.flags) for f in PHASE_FIELDS])


# --------------------------------------------------------------------------- #
# planner comparison

@dataclass
class CompareRow:
    instance_id: str
    model_success: bool
    model_latency: float
    planner_solved: bool
    planner_latency: float
    planner_timed_out: bool


def compare_planner(model: ProcedureLM, instances: Sequence[TaskInstance], domain: Domain,
                    vocab: Vocabulary, planner_timeout: float = 5.0, max_depth: int = 20,
                    decode_cfg: DecodeConfig | None = None) -> list[CompareRow]:
    rows = []
    for inst in instances:
        ep = run_open_loop(model, inst, domain, vocab, None, decode_cfg)
        rep = planner.solve(inst, domain, max_depth=max_depth, timeout=planner_timeout)
        ok = rep.solved and planner.validate(inst, domain, rep.plan).success
        rows.append(CompareRow(inst.id, ep.success, ep.latency, ok, rep.elapsed, rep.timed_out))
    return rows


def success_under_budget(rows: Sequence[CompareRow], budget: float) -> tuple[float, float]:
    """(model %, planner %) of instances solved in strictly less than `budget` seconds."""
    if not rows:
        raise ValueError("no rows")
    m = sum(r.model_success and r.model_latency < budget for r in rows)
    p = sum(r.planner_solved and r.planner_latency < budget for r in rows)
    return 100.0 * m / len(rows), 100.0 * p / len(rows)


def budget_curve(rows, budgets: Sequence[float]) -> list[dict]:
    out = []
    for b in budgets:
        m, p = success_under_budget(rows, b)
        out.append({"budget_s": b, "model_pct": m, "planner_pct": p})
    return out


def crossover_budgets(curve: Sequence[dict]) -> list[float]:
    return [c["budget_s"] for c in curve if c["model_pct"] > c["planner_pct"]]


def write_compare(path, rows: Sequence[CompareRow], curve: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "model_success", "model_latency_s", "planner_solved", "planner_latency_s",
                    "planner_timed_out"])
        for r in rows:
            w.writerow([r.instance_id, int(r.model_success), f"{r.model_latency:.6f}", int(r.planner_solved),
                        f"{r.planner_latency:.6f}", int(r.planner_timed_out)])
        w.writerow([])
        w.writerow(["budget_s", "model_pct", "planner_pct"])
        for c in curve:
            w.writerow([c["budget_s"], f"{c['model_pct']:.2f}", f"{c['planner_pct']:.2f}"])


def bench_planner(instances: Sequence[TaskInstance], domain: Domain, timeout: float = float("inf"),
                  max_depth: int = 20, algorithm: str = "astar") -> list[dict]:
    rows = []
    for inst in instances:
        rep = planner.solve(inst, domain, max_depth=max_depth, timeout=timeout, algorithm=algorithm)
        rows.append({"id": inst.id, "solved": int(rep.solved), "length": rep.plan.cost if rep.solved else "",
                     "expanded": rep.expanded, "elapsed_s": f"{rep.elapsed:.6f}", "timed_out": int(rep.timed_out)})
    return rows


# --------------------------------------------------------------------------- #
# codebook usage

def codebook_usage_report(episodes: Sequence[EpisodeResult]) -> tuple[list, np.ndarray]:
    """Per task type, normalized usage counts over book units (summed over layers)."""
    if not episodes:
        raise ValueError("no episodes")
    counts: dict = {}
    for e in episodes:
        if not e.chunk_hist or not any(len(h) for h in e.chunk_hist):
            continue
        h = np.sum([np.asarray(x, dtype=np.float64) for x in e.chunk_hist if len(x)], axis=0)
        key = e.task_type or "unknown"
        counts[key] = counts.get(key, 0) + h
    if not counts:
        raise ValueError("episodes carry no chunk histograms")
    types = sorted(counts)
    mat = np.array([counts[t] for t in types])
    mat = mat / mat.sum(axis=1, keepdims=True)
    return types, mat


def write_usage(path, types, mat) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task_type"] + [f"unit_{k}" for k in range(mat.shape[1])])
        for t, row in zip(types, mat):
            w.writerow([t] + [repr(float(x)) for x in row])


def write_json(path, obj) -> None:
    def default(o):
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        if isinstance(o, float) and math.isinf(o):
            return "inf"
        raise TypeError(type(o))

    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=default) + "\n")
