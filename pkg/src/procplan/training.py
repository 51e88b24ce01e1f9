"""Supervised training on planner-computed plans.

Each step: teacher-forced forward over the target plan, total loss (NLL plus
the per-layer VQ terms), backward, gradient clipping, AdamW, then an EMA
update of the procedure book from the quantized memory chunks.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import planner
from .encoding import EncodedContext, Vocabulary, encode_context, encode_plan
from .model import ModelConfig, ProcedureBook, ProcedureLM, ema_update
from .optim import AdamWState, adamw_step, clip_grad_norm
from .world import Domain, TaskInstance, apply

LOG_FIELDS = ("epoch", "nll", "vq_loss", "book_util", "train_csr_probe")
_DS_MAGIC = b"NSDS"


@dataclass(frozen=True)
class TrainingExample:
    instance_id: str
    context: EncodedContext
    target: tuple[int, ...]  # EOS-terminated

    @property
    def ids(self) -> np.ndarray:
        return np.asarray(self.context.ids + self.target, dtype=np.int64)


@dataclass
class TrainRunConfig:
    epochs: int = 50
    lr: float = 2e-4
    batch: int = 1
    grad_clip: float = 1.0
    weight_decay: float = 0.01
    seed: int = 0
    checkpoint_every: int = 0  # steps; 0 = only at the end
    ema: bool = True
    schedule: str = "constant"  # or "cosine": linear warmup then cosine decay to lr_min_frac * lr
    warmup_steps: int = 0
    lr_min_frac: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch != 1:
            raise ValueError("only batch size 1 is supported")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def lr_at(self, step: int, total: int) -> float:
        """Learning rate for optimizer step `step` (0-based) out of `total`."""
        if self.schedule == "constant":
            return self.lr
        if step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        frac = (step - self.warmup_steps) / max(1, total - self.warmup_steps)
        lo = self.lr * self.lr_min_frac
        return lo + 0.5 * (self.lr - lo) * (1.0 + np.cos(np.pi * min(frac, 1.0)))


# --------------------------------------------------------------------------- #
# dataset

def generate_dataset(domain: Domain, instances: Sequence[TaskInstance], vocab: Vocabulary,
                     max_depth: int = 20, timeout: float = float("inf"),
                     fmt: str = "open") -> list[TrainingExample]:
    """One example per instance ("open") or one per plan step ("closed").

    Planner failures propagate: a partial dataset is never returned.
    """
    if fmt not in ("open", "closed"):
        raise ValueError(f"unknown format {fmt!r}")
    out = []
    for inst in instances:
        plan = planner.solve(inst, domain, max_depth=max_depth, timeout=timeout).unwrap()
        check = planner.validate(inst, domain, plan)
        if not check.success:  # pragma: no cover - planner postcondition
            raise AssertionError(f"planner returned an invalid plan for {inst.id}")
        if fmt == "open":
            ctx = encode_context(inst.init, inst.goal, domain, vocab)
            out.append(TrainingExample(inst.id, ctx, tuple(encode_plan(plan.actions, vocab))))
            continue
        state = inst.init
        for t, act in enumerate(plan.actions):
            ctx = encode_context(state, inst.goal, domain, vocab)
            out.append(TrainingExample(f"{inst.id}#{t}", ctx, tuple(encode_plan([act], vocab))))
            state = apply(state, act)
    return out


def _pack_ids(ids) -> bytes:
    return struct.pack(f"<I{len(ids)}I", len(ids), *ids)


def dumps_dataset(examples: Sequence[TrainingExample]) -> bytes:
    parts = [_DS_MAGIC, struct.pack("<I", len(examples))]
    for ex in examples:
        name = ex.instance_id.encode()
        parts.append(struct.pack("<H", len(name)) + name)
        spans = [ex.context.spans[k] for k in ("dk", "observation", "goal")]
        parts.append(struct.pack("<6I", *(v for s in spans for v in s)))
        parts.append(_pack_ids(ex.context.ids))
        parts.append(_pack_ids(ex.target))
    return b"".join(parts)


def loads_dataset(blob: bytes) -> list[TrainingExample]:
    if blob[:4] != _DS_MAGIC:
        raise ValueError("not a dataset file")
    pos = 4

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, blob, pos)
        pos += struct.calcsize(fmt)
        return vals

    (n,) = take("<I")
    out = []
    for _ in range(n):
        (nlen,) = take("<H")
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        s = take("<6I")
        spans = {"dk": (s[0], s[1]), "observation": (s[2], s[3]), "goal": (s[4], s[5])}
        (clen,) = take("<I")
        ctx = take(f"<{clen}I")
        (tlen,) = take("<I")
        tgt = take(f"<{tlen}I")
        out.append(TrainingExample(name, EncodedContext(tuple(ctx), spans), tuple(tgt)))
    return out


def save_dataset(path, examples) -> None:
    Path(path).write_bytes(dumps_dataset(examples))


def load_dataset(path) -> list[TrainingExample]:
    return loads_dataset(Path(path).read_bytes())


def dump_dataset_text(examples, vocab: Vocabulary) -> str:
    lines = []
    for ex in examples:
        lines.append(f"# {ex.instance_id}")
        lines.append(" ".join(vocab.token(i) for i in ex.context.ids))
        lines.append(" ".join(vocab.token(i) for i in ex.target))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- #
# training

@dataclass
class EpochStats:
    nll: float = 0.0
    vq: float = 0.0
    hits: int = 0
    n: int = 0
    used: set = field(default_factory=set)

    def to_json(self) -> dict:
        return {"nll": self.nll, "vq": self.vq, "hits": self.hits, "n": self.n, "used": sorted(self.used)}

    @classmethod
    def from_json(cls, d) -> "EpochStats":
        return cls(d["nll"], d["vq"], d["hits"], d["n"], set(d["used"]))


class Trainer:
    """Holds model, optimizer state and progress so a run can stop and resume exactly."""

    def __init__(self, model: ProcedureLM, cfg: TrainRunConfig, vocab_size: int | None = None):
        if vocab_size is not None and vocab_size != model.cfg.vocab_size:
            raise ValueError(f"model vocab_size {model.cfg.vocab_size} != vocabulary size {vocab_size}")
        self.model = model
        self.cfg = cfg
        self.opt = AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.epoch = 0
        self.index = 0  # position within the current epoch's order
        self.stats = EpochStats()
        self.log: list[dict] = []

    # -- one step
    def _seed_book(self, ex: TrainingExample) -> None:
        m = self.model
        with ad.no_grad():
            res = m.forward(ex.ids[:-1], len(ex.context), "plain")
        chunks = np.concatenate([t.memory.reshape(-1, m.cfg.unit_dim) for t in res.traces])
        m.book.seed_from_chunks(chunks, np.random.default_rng([self.cfg.seed, 7]))

    def step(self, ex: TrainingExample, total_steps: int | None = None) -> dict:
        m, cfg = self.model, self.cfg
        self.opt.lr = cfg.lr_at(self.opt.step, total_steps or 1)
        if m.cfg.use_book and not m.book.seeded:
            self._seed_book(ex)
        ids, ctx_len = ex.ids, len(ex.context)
        m.zero_grad()
        loss, res = m.loss(ids, ctx_len)
        loss.backward()
        grads = {k: t.grad if t.grad is not None else np.zeros_like(t.data) for k, t in m.params.items()}
        clip_grad_norm(grads, cfg.grad_clip)
        adamw_step(m.arrays(), grads, self.opt)

        logits = res.logits.data[ctx_len - 1:]
        targets = ids[ctx_len:]
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        nll = float(-logp[np.arange(len(targets)), targets].mean())
        vq = float(sum(v.item() for v in res.vq_losses))
        hit = bool(np.all(logits.argmax(axis=1) == targets))
        used = set()
        if m.cfg.use_book:
            chunks = np.concatenate([t.memory.reshape(-1, m.cfg.unit_dim) for t in res.traces])
            idx = np.concatenate([t.chunk_indices.reshape(-1) for t in res.traces])
            used = set(int(i) for i in idx)
            if cfg.ema:
                ema_update(m.book, chunks, idx, m.cfg.ema_decay,
                           rng=np.random.default_rng([cfg.seed, 11, self.opt.step]),
                           dead_after=m.cfg.dead_after)
        return {"loss": loss.item(), "nll": nll, "vq": vq, "hit": hit, "used": used}

    # -- epochs
    def order(self, n: int, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.cfg.seed, epoch]).permutation(n)

    def run(self, dataset: Sequence[TrainingExample], log_path=None, ckpt_path=None,
            stop_after: int | None = None) -> list[dict]:
        """Train until `cfg.epochs` are done (or `stop_after` more steps, for tests)."""
        n = len(dataset)
        if n == 0:
            raise ValueError("empty dataset")
        steps = 0
        while self.epoch < self.cfg.epochs:
            order = self.order(n, self.epoch)
            while self.index < n:
                if stop_after is not None and steps >= stop_after:
                    if ckpt_path is not None:
                        self.save(ckpt_path)
                    return self.log
                # NonFiniteGradient propagates; the last checkpoint on disk is left as is
                out = self.step(dataset[order[self.index]], n * self.cfg.epochs)
                s = self.stats
                s.nll += out["nll"]
                s.vq += out["vq"]
                s.hits += out["hit"]
                s.n += 1
                s.used |= out["used"]
                self.index += 1
                steps += 1
                every = self.cfg.checkpoint_every
                if ckpt_path is not None and every and self.opt.step % every == 0:
                    self.save(ckpt_path)
            s = self.stats
            row = {"epoch": self.epoch, "nll": s.nll / s.n, "vq_loss": s.vq / s.n,
                   "book_util": len(s.used) / self.model.cfg.book_size if self.model.cfg.use_book else 0.0,
                   "train_csr_probe": 100.0 * s.hits / s.n}
            self.log.append(row)
            if log_path is not None:
                write_log(log_path, self.log)
            self.epoch += 1
            self.index = 0
            self.stats = EpochStats()
        if ckpt_path is not None:
            self.save(ckpt_path)
        return self.log

    # -- persistence
    def state(self) -> tuple[dict, dict]:
        m = self.model
        header = {
            "model": m.cfg.to_dict(),
            "train": asdict(self.cfg),
            "optimizer": {"lr": self.opt.lr, "betas": list(self.opt.betas), "eps": self.opt.eps,
                          "weight_decay": self.opt.weight_decay, "step": self.opt.step},
            "book": {"eps": m.book.eps, "seeded": m.book.seeded},
            "progress": {"epoch": self.epoch, "index": self.index, "stats": self.stats.to_json(),
                         "log": self.log},
        }
        tensors = {f"param/{k}": t.data for k, t in m.params.items()}
        tensors.update({"book/units": m.book.units, "book/ema_counts": m.book.ema_counts,
                        "book/ema_sums": m.book.ema_sums,
                        "book/usage_age": m.book.usage_age.astype(np.float64)})
        for k in self.opt.m:
            tensors[f"adam_m/{k}"] = self.opt.m[k]
            tensors[f"adam_v/{k}"] = self.opt.v[k]
        return header, tensors

    def save(self, path) -> None:
        ckpt.save(path, *self.state())

    @classmethod
    def load(cls, path, expected_model: ModelConfig | None = None) -> "Trainer":
        header, tensors = ckpt.load(path)
        if expected_model is not None:
            ckpt.check_config(header["model"], expected_model.to_dict())
        model = model_from_state(header, tensors)
        tr = cls(model, TrainRunConfig(**header["train"]))
        o = header["optimizer"]
        tr.opt = AdamWState(lr=o["lr"], betas=tuple(o["betas"]), eps=o["eps"],
                            weight_decay=o["weight_decay"], step=o["step"])
        for k in model.params:
            if f"adam_m/{k}" in tensors:
                tr.opt.m[k] = tensors[f"adam_m/{k}"]
                tr.opt.v[k] = tensors[f"adam_v/{k}"]
        p = header["progress"]
        tr.epoch, tr.index = p["epoch"], p["index"]
        tr.stats = EpochStats.from_json(p["stats"])
        tr.log = p["log"]
        return tr


def model_from_state(header: dict, tensors: dict) -> ProcedureLM:
    model = ProcedureLM(ModelConfig(**header["model"]))
    for k, t in model.params.items():
        arr = tensors[f"param/{k}"]
        if arr.shape != t.data.shape:
            raise ckpt.ConfigMismatch(f"tensor {k} has shape {arr.shape}, expected {t.data.shape}")
        t.data = arr.copy()
    b = header["book"]
    model.book = ProcedureBook(tensors["book/units"].copy(), tensors["book/ema_counts"].copy(),
                               tensors["book/ema_sums"].copy(),
                               tensors["book/usage_age"].astype(np.int64), b["eps"], b["seeded"])
    return model


def load_model(path, expected: ModelConfig | None = None) -> ProcedureLM:
    header, tensors = ckpt.load(path)
    if expected is not None:
        ckpt.check_config(header["model"], expected.to_dict())
    return model_from_state(header, tensors)


def write_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.10g}" if isinstance(r[k], float) else r[k]) for k in LOG_FIELDS})


def train(model: ProcedureLM, dataset: Sequence[TrainingExample], cfg: TrainRunConfig,
          log_path=None, ckpt_path=None) -> Trainer:
    tr = Trainer(model, cfg)
    tr.run(dataset, log_path, ckpt_path)
    return tr
