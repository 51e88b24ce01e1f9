"""Test-time planning with procedure banks and contrastive decoding.

Two banks hold composite procedures (per layer) from solved and failed
episodes. Each decoding step runs the model twice: once with its runtime
procedures reconstructed against the success bank (p+) and once against the
failure bank (p-). Tokens in the plausible head of p+ are rescored by
log p+ - log p- and the head's probability mass is redistributed by softmax of
that score. Model parameters and the procedure book are never modified here.
"""
from __future__ import annotations

import json
import time
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .encoding import EOS, ParseFailure, Vocabulary, decode_action, decode_plan as parse_plan, encode_context
from .model import IncrementalDecoder, ProcedureLM, cosine_matrix
from .planner import validate
from .world import Domain, TaskInstance, applicable, apply, goal_satisfied

PROB_FLOOR = 1e-12


# --------------------------------------------------------------------------- #
# banks

class ProcedureBank:
    """Per-layer FIFO store of D-dimensional composite procedures."""

    def __init__(self, label: str, dim: int, capacity: int = 4096, dedup: float = 0.999):
        if label not in ("positive", "negative"):
            raise ValueError(f"bad bank label {label!r}")
        self.label, self.dim, self.capacity, self.dedup = label, dim, capacity, dedup
        self._store: dict[int, deque] = {}

    def add(self, layer: int, vectors) -> int:
        """Append rows of `vectors`, skipping near-duplicates; returns the number added."""
        vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        if vectors.shape[1] != self.dim:
            raise ValueError(f"entry width {vectors.shape[1]} != bank width {self.dim}")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("bank entries must be finite")
        q = self._store.setdefault(layer, deque())
        added = 0
        for v in vectors:
            if q and cosine_matrix(v[None], np.asarray(q)).max() > self.dedup:
                continue
            q.append(v.copy())
            if len(q) > self.capacity:
                q.popleft()
            added += 1
        return added

    def entries(self, layer: int) -> np.ndarray | None:
        q = self._store.get(layer)
        return np.asarray(q) if q else None

    def as_mapping(self) -> dict:
        return {l: np.asarray(q) for l, q in self._store.items() if q}

    def __len__(self) -> int:
        return sum(len(q) for q in self._store.values())

    def size(self, layer: int) -> int:
        return len(self._store.get(layer, ()))

    def copy(self) -> "ProcedureBank":
        b = ProcedureBank(self.label, self.dim, self.capacity, self.dedup)
        b._store = {l: deque(v.copy() for v in q) for l, q in self._store.items()}
        return b


@dataclass
class Banks:
    pos: ProcedureBank
    neg: ProcedureBank

    @classmethod
    def empty(cls, dim: int, capacity: int = 4096) -> "Banks":
        return cls(ProcedureBank("positive", dim, capacity), ProcedureBank("negative", dim, capacity))

    def copy(self) -> "Banks":
        return Banks(self.pos.copy(), self.neg.copy())

    def __len__(self) -> int:
        return len(self.pos) + len(self.neg)


# --------------------------------------------------------------------------- #
# contrastive decoding algebra

def adaptive_head(p_plus: np.ndarray, theta: float = 0.1) -> np.ndarray:
    """Boolean mask of tokens with p+ >= theta * max p+."""
    p_plus = np.asarray(p_plus, dtype=np.float64)
    return p_plus >= theta * p_plus.max()


def contrastive_scores(p_plus, p_minus, head) -> np.ndarray:
    """log p+ - log p- on the head (floored at PROB_FLOOR); -inf elsewhere."""
    p_plus, p_minus = np.asarray(p_plus, dtype=np.float64), np.asarray(p_minus, dtype=np.float64)
    s = np.full(p_plus.shape, -np.inf)
    s[head] = np.log(np.maximum(p_plus[head], PROB_FLOOR)) - np.log(np.maximum(p_minus[head], PROB_FLOOR))
    return s


def cp_distribution(p_plus, scores, head, tol: float = 1e-9) -> np.ndarray:
    p_plus = np.asarray(p_plus, dtype=np.float64)
    out = p_plus.copy()
    s = scores[head]
    e = np.exp(s - s.max())
    out[head] = e / e.sum() * p_plus[head].sum()
    dev = abs(out.sum() - 1.0)
    if dev > tol:
        raise FloatingPointError(f"contrastive distribution sums to 1{out.sum() - 1.0:+.3e}")
    return out


def select_token(p_cp: np.ndarray, p_plus: np.ndarray, head: np.ndarray) -> int:
    """Argmax of p_CP over the head; ties broken by larger p+, then lower id."""
    ids = np.flatnonzero(head)
    best = p_cp[ids].max()
    cand = ids[p_cp[ids] == best]
    if len(cand) == 1:
        return int(cand[0])
    top = p_plus[cand].max()
    return int(cand[p_plus[cand] == top][0])


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


# --------------------------------------------------------------------------- #
# decoding

@dataclass
class DecodeConfig:
    max_tokens: int = 96
    theta: float = 0.1
    upsilon: float = 0.95
    use_cp: bool = True  # False: plain greedy decoding, banks ignored
    follow: str | None = None  # "pos" | "neg": greedy on p+ or p- instead of contrasting
    final_layer_only: bool = False
    temperature: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.follow not in (None, "pos", "neg"):
            raise ValueError(f"bad follow {self.follow!r}")


@dataclass
class DecodeOutput:
    tokens: list
    r_pos: list  # per layer S x D composites used in the positive pass
    r_neg: list
    chunk_indices: list  # per layer S x q
    memory: np.ndarray
    truncated: bool
    max_cp_dev: float = 0.0
    steps: int = 0


def _bank_map(bank: ProcedureBank | None, n_layers: int, final_only: bool):
    if bank is None:
        return {}
    m = bank.as_mapping()
    if final_only:
        m = {l: v for l, v in m.items() if l == n_layers - 1}
    return m


def decode(model: ProcedureLM, context_ids, banks: Banks | None = None, cfg: DecodeConfig | None = None,
           memory: np.ndarray | None = None, stop_at=None) -> DecodeOutput:
    """Greedy contrastive decoding of a token sequence after `context_ids`.

    Stops at EOS, at `max_tokens`, or when `stop_at(tokens)` returns True.
    """
    cfg = cfg or DecodeConfig()
    L = model.cfg.n_layers
    ctx = list(context_ids)
    ctx_len = len(ctx)
    pos_map = _bank_map(banks.pos if banks else None, L, cfg.final_layer_only)
    neg_map = _bank_map(banks.neg if banks else None, L, cfg.final_layer_only)
    contrast = cfg.use_cp and (pos_map or neg_map)
    rng = np.random.default_rng(cfg.seed) if cfg.temperature > 0 else None
    out = DecodeOutput([], [], [], [], None, False)
    if ctx_len > model.cfg.max_len:
        raise OverflowError(f"context length {ctx_len} exceeds max_len {model.cfg.max_len}")
    if contrast:
        dp = IncrementalDecoder(model, ctx, "positive", memory, pos_map, cfg.upsilon)
        dn = IncrementalDecoder(model, ctx, "negative", memory, neg_map, cfg.upsilon)
    else:
        dp = dn = IncrementalDecoder(model, ctx, "plain", memory)
    n = ctx_len
    while True:
        if len(out.tokens) >= cfg.max_tokens:
            out.truncated = True
            break
        p_plus = softmax(dp.last_logits)
        p_minus = softmax(dn.last_logits)
        if not contrast:
            dist, head = p_plus, np.ones_like(p_plus, dtype=bool)
        elif cfg.follow == "pos":
            dist, head = p_plus, np.ones_like(p_plus, dtype=bool)
        elif cfg.follow == "neg":
            dist, head = p_minus, np.ones_like(p_plus, dtype=bool)
        else:
            head = adaptive_head(p_plus, cfg.theta)
            dist = cp_distribution(p_plus, contrastive_scores(p_plus, p_minus, head), head)
            out.max_cp_dev = max(out.max_cp_dev, abs(dist.sum() - 1.0))
        if rng is not None:
            w = dist ** (1.0 / cfg.temperature)
            tok = int(rng.choice(len(w), p=w / w.sum()))
        else:
            tok = select_token(dist, p_minus if cfg.follow == "neg" else p_plus, head)
        out.steps += 1
        out.tokens.append(tok)
        if tok == EOS or (stop_at is not None and stop_at(out.tokens)):
            break
        if n >= model.cfg.max_len:
            out.truncated = True
            break
        dp.extend(tok)
        if dn is not dp:
            dn.extend(tok)
        n += 1
    out.r_pos = [t.composites.copy() for t in dp.traces]
    out.r_neg = [t.composites.copy() for t in dn.traces]
    out.chunk_indices = [None if t.chunk_indices is None else t.chunk_indices.copy() for t in dp.traces]
    out.memory = dp.memory
    return out


def greedy_decode(model: ProcedureLM, context_ids, max_tokens: int = 96) -> list:
    """Plain argmax decoding with no banks; the reference for empty-bank equivalence."""
    seq = list(context_ids)
    ctx_len = len(seq)
    toks = []
    with ad.no_grad():
        while len(toks) < max_tokens and len(seq) <= model.cfg.max_len:
            logits = model.forward(seq, ctx_len, "plain").logits.data[-1]
            tok = int(np.argmax(logits))
            toks.append(tok)
            seq.append(tok)
            if tok == EOS:
                break
    return toks


# --------------------------------------------------------------------------- #
# episodes

@dataclass
class EpisodeResult:
    instance_id: str
    success: bool
    goals_met: int
    goal_size: int
    executed_prefix: int
    plan_length: int  # executed actions
    optimal_length: int | None
    emitted: int  # actions emitted, parse failures included
    feasible: int  # emitted actions that were applicable
    latency: float
    loop: str = "open"
    task_type: str | None = None
    failure: str | None = None
    r_pos: list = field(default_factory=list)
    r_neg: list = field(default_factory=list)
    chunk_hist: list = field(default_factory=list)  # per layer, counts over book units
    max_cp_dev: float = 0.0
    plan: list = field(default_factory=list)
    final_memory: object = field(default=None, repr=False, compare=False)  # not serialized

    def __post_init__(self):
        if self.success and self.goals_met != self.goal_size:
            raise ValueError("a successful episode must meet every goal")

    def to_json(self, timing: bool = False) -> str:
        """One JSON line. Wall-clock latency is left out unless `timing`, so logs are reproducible."""
        d = asdict(self)
        d.pop("final_memory")
        if not timing:
            d["latency"] = 0.0
        d["r_pos"] = [np.asarray(r).tolist() for r in self.r_pos]
        d["r_neg"] = [np.asarray(r).tolist() for r in self.r_neg]
        d["chunk_hist"] = [np.asarray(h).tolist() for h in self.chunk_hist]
        return json.dumps(d)

    @classmethod
    def from_json(cls, line: str) -> "EpisodeResult":
        d = json.loads(line)
        d["r_pos"] = [np.asarray(r) for r in d["r_pos"]]
        d["r_neg"] = [np.asarray(r) for r in d["r_neg"]]
        return cls(**d)


def _hist(model: ProcedureLM, chunk_indices) -> list:
    K = model.cfg.book_size
    return [np.bincount(np.asarray(c).reshape(-1), minlength=K).tolist() if c is not None else []
            for c in chunk_indices]


def run_open_loop(model: ProcedureLM, instance: TaskInstance, domain: Domain, vocab: Vocabulary,
                  banks: Banks | None = None, cfg: DecodeConfig | None = None,
                  memory: np.ndarray | None = None) -> EpisodeResult:
    """Decode a whole plan from the initial state, then validate it.

    `memory` replaces the learned initial working memory (for carrying it across tasks).
    """
    t0 = time.perf_counter()
    ctx = encode_context(instance.init, instance.goal, domain, vocab)
    out = decode(model, ctx.ids, banks, cfg, memory=memory)
    actions, failure = parse_plan(out.tokens, vocab, domain, instance.objects)
    if out.truncated and failure is not None:
        failure = ParseFailure("max tokens reached", len(out.tokens))
    latency = time.perf_counter() - t0
    v = validate(instance, domain, actions)
    success = v.success and failure is None
    emitted = len(actions) + (failure is not None)
    return EpisodeResult(
        instance.id, success, v.goals_met, len(instance.goal),
        v.executed_prefix, v.executed_prefix, instance.meta.get("optimal_length"), emitted, v.executed_prefix,
        latency, "open", instance.meta.get("task_type"), None if failure is None else failure.reason,
        out.r_pos, out.r_neg, _hist(model, out.chunk_indices), out.max_cp_dev, [str(a) for a in actions],
        out.memory)


def run_closed_loop(model: ProcedureLM, instance: TaskInstance, domain: Domain, vocab: Vocabulary,
                    banks: Banks | None = None, cfg: DecodeConfig | None = None, max_steps: int = 20,
                    persist_memory: bool = False, memory: np.ndarray | None = None) -> EpisodeResult:
    """Act one decoded action at a time; inapplicable or unparsable actions are skipped.

    With `persist_memory` the working memory carries from step to step instead of
    restarting from `memory` (the learned initial value when None).
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    cfg = cfg or DecodeConfig(max_tokens=16)
    close = vocab.id(")")
    t0 = time.perf_counter()
    state = instance.init
    emitted = feasible = 0
    start_memory = memory
    out = None
    failure = None
    executed = []
    steps = 0
    max_dev = 0.0
    while not goal_satisfied(state, instance.goal) and steps < max_steps:
        steps += 1
        ctx = encode_context(state, instance.goal, domain, vocab)
        out = decode(model, ctx.ids, banks, cfg, memory=memory, stop_at=lambda t: t[-1] == close)
        max_dev = max(max_dev, out.max_cp_dev)
        memory = out.memory if persist_memory else start_memory
        emitted += 1
        try:
            act, _ = decode_action(out.tokens, vocab, domain, instance.objects)
        except ParseFailure as e:
            failure = e.reason
            continue
        if applicable(state, act):
            state = apply(state, act)
            feasible += 1
            executed.append(str(act))
        else:
            failure = "inapplicable action"
    latency = time.perf_counter() - t0
    met = len(instance.goal & state.atoms)
    success = met == len(instance.goal)
    r_pos = out.r_pos if out else []
    r_neg = out.r_neg if out else []
    hist = _hist(model, out.chunk_indices) if out else []
    return EpisodeResult(instance.id, success, met, len(instance.goal), len(executed), len(executed),
                         instance.meta.get("optimal_length"), emitted, feasible, latency, "closed",
                         instance.meta.get("task_type"), None if success else (failure or "max steps"),
                         r_pos, r_neg, hist, max_dev, executed, out.memory if out else start_memory)


def update_banks(banks: Banks, episode: EpisodeResult, pos_enabled: bool = True,
                 neg_enabled: bool = True) -> Banks:
    """Success banks the positive-pass composites, failure the negative-pass ones (in place)."""
    if episode.success and pos_enabled:
        for l, r in enumerate(episode.r_pos):
            banks.pos.add(l, r)
    elif not episode.success and neg_enabled:
        for l, r in enumerate(episode.r_neg):
            banks.neg.add(l, r)
    return banks
