"""Suite persistence, config files, presets, and the train/evaluate pipeline
shared by the CLI, the experiment scripts, and the acceptance tests."""
from __future__ import annotations

import configparser
import json
import typing
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

from .encoding import Vocabulary, build_vocab
from .harness import summarize
from .inference import Banks, DecodeConfig, EpisodeResult, run_closed_loop, run_open_loop, update_banks
from .minecraft import SuiteConfig, generate_suite, minecraft_domain
from .model import ModelConfig, ProcedureLM
from .training import Trainer, TrainRunConfig, generate_dataset
from .world import Domain, TaskInstance, parse_domain, parse_instance, print_domain, print_instance


@dataclass
class SuiteSpec:
    grid_w: int = 4
    grid_h: int = 4
    n_train: int = 29
    n_test: int = 60
    seed: int = 0
    max_grass: int = 2
    max_logs: int = 2
    distractors: int = 0
    max_depth: int = 20

    def suite_config(self) -> SuiteConfig:
        return SuiteConfig(grid_w=self.grid_w, grid_h=self.grid_h, max_grass=self.max_grass,
                           max_logs=self.max_logs, distractors=self.distractors, max_depth=self.max_depth)


@dataclass
class Suite:
    spec: SuiteSpec
    domain: Domain
    train: list
    test: list
    vocab: Vocabulary

    def split(self, name: str) -> list:
        if name not in ("train", "test"):
            raise ValueError(f"unknown split {name!r}")
        return self.train if name == "train" else self.test

    def by_id(self) -> dict:
        return {i.id: i for i in self.train + self.test}


def build_suite(spec: SuiteSpec, vocab: Vocabulary | None = None) -> Suite:
    domain, train, test = generate_suite(spec.suite_config(), spec.n_train, spec.n_test, spec.seed)
    return Suite(spec, domain, train, test, vocab or build_vocab(domain, train + test))


def save_suite(suite: Suite, out_dir) -> None:
    out = Path(out_dir)
    for split in ("train", "test"):
        (out / split).mkdir(parents=True, exist_ok=True)
        for inst in suite.split(split):
            (out / split / f"{inst.id}.pddl").write_text(print_instance(inst, suite.domain.name))
    (out / "domain.pddl").write_text(print_domain(suite.domain))
    suite.vocab.save(out / "vocab.txt")
    meta = {"spec": asdict(suite.spec),
            "train": [i.id for i in suite.train], "test": [i.id for i in suite.test],
            "meta": {i.id: i.meta for i in suite.train + suite.test}}
    (out / "suite.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_suite(path) -> Suite:
    src = Path(path)
    info = json.loads((src / "suite.json").read_text())
    domain = parse_domain((src / "domain.pddl").read_text())
    splits = {}
    for split in ("train", "test"):
        insts = []
        for iid in info[split]:
            inst = parse_instance((src / split / f"{iid}.pddl").read_text(), domain)
            inst.meta.update(info["meta"].get(iid, {}))
            insts.append(inst)
        splits[split] = insts
    return Suite(SuiteSpec(**info["spec"]), domain, splits["train"], splits["test"],
                 Vocabulary.load(src / "vocab.txt"))


# --------------------------------------------------------------------------- #
# config files: "key = value" lines under [suite] [model] [train] [decode]

def read_config(path) -> dict:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read_string(Path(path).read_text())
    return {s: dict(cp[s]) for s in cp.sections()}


def _convert(value: str, typ):
    origin = typing.get_origin(typ)
    if typ is bool or typ == "bool":
        v = value.strip().lower()
        if v not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise ValueError(f"not a boolean: {value!r}")
        return v in ("1", "true", "yes", "on")
    if typ in (int, "int"):
        return int(value)
    if typ in (float, "float"):
        return float(value)
    if origin is tuple or (isinstance(typ, str) and typ.startswith("tuple")):
        return tuple(x.strip() for x in value.split(",") if x.strip())
    if isinstance(typ, str) and "None" in typ:
        return None if value.strip().lower() in ("none", "") else value.strip()
    return value.strip()


def override(obj, values: dict):
    """dataclasses.replace with string values converted to each field's type."""
    if not values:
        return obj
    types = {f.name: f.type for f in fields(obj)}
    kw = {}
    for k, v in values.items():
        if k not in types:
            raise KeyError(f"unknown option {k!r} for {type(obj).__name__}")
        kw[k] = _convert(v, types[k]) if isinstance(v, str) else v
    return replace(obj, **kw)


# --------------------------------------------------------------------------- #
# presets

TOY_MODEL = dict(n_layers=2, d_model=128, n_slots=4, n_heads=4, ffn_mult=2, book_size=16, unit_dim=32)
TOY_TRAIN = dict(epochs=50, lr=3e-3, schedule="cosine", warmup_steps=100)


def toy_model_config(vocab_size: int, seed: int = 0, **kw) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, seed=seed, **{**TOY_MODEL, **kw})


def toy_train_config(seed: int = 0, **kw) -> TrainRunConfig:
    return TrainRunConfig(seed=seed, **{**TOY_TRAIN, **kw})


# --------------------------------------------------------------------------- #
# pipeline

def train_on_suite(suite: Suite, model_cfg: ModelConfig, train_cfg: TrainRunConfig, fmt: str = "open",
                   log_path=None, ckpt_path=None, instances: Sequence[TaskInstance] | None = None) -> Trainer:
    data = generate_dataset(suite.domain, instances if instances is not None else suite.train, suite.vocab,
                            max_depth=suite.spec.max_depth, fmt=fmt)
    tr = Trainer(ProcedureLM(model_cfg), train_cfg, vocab_size=len(suite.vocab))
    tr.run(data, log_path, ckpt_path)
    return tr


def evaluate(model: ProcedureLM, instances: Sequence[TaskInstance], domain: Domain, vocab: Vocabulary,
             loop: str = "open", decode_cfg: DecodeConfig | None = None, banks: Banks | None = None,
             update: bool = False, pos: bool = True, neg: bool = True,
             max_steps: int = 20) -> list[EpisodeResult]:
    """Run every instance in order; with `update` the banks adapt between episodes."""
    out = []
    for inst in instances:
        if loop == "open":
            ep = run_open_loop(model, inst, domain, vocab, banks, decode_cfg)
        else:
            ep = run_closed_loop(model, inst, domain, vocab, banks, decode_cfg or DecodeConfig(max_tokens=16),
                                 max_steps)
        if update and banks is not None:
            update_banks(banks, ep, pos, neg)
        out.append(ep)
    return out


def report(results) -> dict:
    return summarize(results)
