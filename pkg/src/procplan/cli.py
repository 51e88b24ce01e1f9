"""Command-line entry point: ``python -m procplan.cli <command> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .experiments import (SuiteSpec, build_suite, evaluate, load_suite, override, read_config, save_suite,
                          toy_model_config, toy_train_config)
from .inference import Banks, DecodeConfig
from .training import (Trainer, dump_dataset_text, generate_dataset, load_model, save_dataset)
from .model import ProcedureLM

EXIT_CHECK_FAILED = 2


def _config(args) -> dict:
    return read_config(args.config) if args.config else {}


def _decode_cfg(args, conf) -> DecodeConfig:
    dc = override(DecodeConfig(), conf.get("decode", {}))
    kw = {}
    if getattr(args, "no_cp", False):
        kw["use_cp"] = False
    if getattr(args, "follow", None):
        kw["follow"] = args.follow
    if getattr(args, "final_layer_only", False):
        kw["final_layer_only"] = True
    return override(dc, kw) if kw else dc


def _bank_flags(args) -> tuple[bool, bool, bool]:
    """(update banks, positive enabled, negative enabled)"""
    mode = getattr(args, "bank", "both")
    if getattr(args, "no_bank", False) or mode == "none":
        return False, False, False
    return True, mode in ("both", "pos-only"), mode in ("both", "neg-only")


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------- #
# commands

def cmd_gen_data(args) -> int:
    conf = _config(args)
    spec = override(SuiteSpec(seed=args.seed), conf.get("suite", {}))
    kw = {k: getattr(args, k) for k in ("grid_w", "grid_h", "n_train", "n_test", "distractors")
          if getattr(args, k) is not None}
    spec = override(spec, kw)
    suite = build_suite(spec)
    out = _out(args)
    save_suite(suite, out)
    for fmt in ("open", "closed"):
        data = generate_dataset(suite.domain, suite.train, suite.vocab, spec.max_depth, fmt=fmt)
        save_dataset(out / f"train_{fmt}.bin", data)
        (out / f"train_{fmt}.txt").write_text(dump_dataset_text(data, suite.vocab))
    print(f"wrote {len(suite.train)} train / {len(suite.test)} test instances to {out}")
    return 0


def cmd_train(args) -> int:
    conf = _config(args)
    suite = load_suite(args.data)
    mkw = dict(conf.get("model", {}))
    if args.no_book:
        mkw["use_book"] = "false"
    if args.lam is not None:
        mkw["lam"] = str(args.lam)
    mcfg = override(toy_model_config(len(suite.vocab), seed=args.seed), mkw)
    tkw = dict(conf.get("train", {}))
    if args.no_ema:
        tkw["ema"] = "false"
    if args.epochs is not None:
        tkw["epochs"] = str(args.epochs)
    tcfg = override(toy_train_config(seed=args.seed), tkw)
    out = _out(args)
    ckpt = out / "checkpoint.nspr"
    data = generate_dataset(suite.domain, suite.train, suite.vocab, suite.spec.max_depth, fmt=args.format)
    if args.resume and ckpt.exists():
        tr = Trainer.load(ckpt, mcfg)
    else:
        tr = Trainer(ProcedureLM(mcfg), tcfg, vocab_size=len(suite.vocab))
    tr.run(data, out / "train_log.csv", ckpt)
    res = evaluate(tr.model, suite.train, suite.domain, suite.vocab, loop=args.format)
    metrics = {"train": harness.summarize(res), "final_epoch": tr.log[-1]}
    harness.write_json(out / "metrics.json", metrics)
    print(json.dumps(metrics["train"]))
    if args.check and (metrics["train"]["csr"] < 95.0 or metrics["train"]["spl"] < 0.95):
        return EXIT_CHECK_FAILED
    return 0


def cmd_eval(args) -> int:
    conf = _config(args)
    suite = load_suite(args.data)
    model = load_model(args.ckpt)
    update, pos, neg = _bank_flags(args)
    banks = Banks.empty(model.cfg.d_model)
    res = evaluate(model, suite.split(args.split), suite.domain, suite.vocab, args.loop,
                   _decode_cfg(args, conf), banks, update=update, pos=pos, neg=neg, max_steps=args.max_steps)
    out = _out(args)
    harness.write_episodes(out / "episodes.jsonl", res)
    metrics = harness.summarize(res)
    harness.write_json(out / "metrics.json", metrics)
    print(json.dumps(metrics))
    if args.check and metrics["csr"] < args.min_csr:
        return EXIT_CHECK_FAILED
    return 0


def cmd_continual(args) -> int:
    conf = _config(args)
    suite = load_suite(args.data)
    model = load_model(args.ckpt)
    insts = suite.split(args.split)
    ids = [i.id for i in insts]
    bounds = [int(round(len(ids) * (k + 1) / args.phases)) for k in range(args.phases)]
    seq = harness.SequenceConfig(ids, bounds, "all", args.seed, args.loop, args.max_steps)
    update, pos, neg = _bank_flags(args)
    variant = harness.Variant(update, pos, neg, _decode_cfg(args, conf))
    rep = harness.continual_run(model, suite.by_id(), suite.domain, suite.vocab, seq, variant)
    out = _out(args)
    harness.write_phases(out / "phases.csv", rep.phases)
    harness.write_episodes(out / "episodes.jsonl", [e for _, _, e in rep.episodes])
    metrics = {"phases": [p.__dict__ for p in rep.phases],
               "mean_fr": float(np.mean(rep.series("fr"))), "mean_rr": float(np.mean(rep.series("rr")))}
    harness.write_json(out / "metrics.json", metrics)
    print(json.dumps({k: v for k, v in metrics.items() if k != "phases"}))
    if args.check and not (max(rep.series("rr")) > 0 and max(rep.series("fr")) == 0):
        return EXIT_CHECK_FAILED
    return 0


def cmd_bench_planner(args) -> int:
    suite = load_suite(args.data)
    insts = suite.split(args.split)
    out = _out(args)
    rows = harness.bench_planner(insts, suite.domain, args.timeout, suite.spec.max_depth,
                                 "bfs" if args.bfs else "astar")
    with open(out / "bench_planner.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["id", "solved", "length", "expanded", "elapsed_s", "timed_out"])
        w.writeheader()
        w.writerows(rows)
    if args.ckpt:
        model = load_model(args.ckpt)
        cmp_rows = harness.compare_planner(model, insts, suite.domain, suite.vocab, args.timeout,
                                           suite.spec.max_depth)
        budgets = [float(b) for b in args.budgets.split(",")]
        curve = harness.budget_curve(cmp_rows, budgets)
        harness.write_compare(out / "planner_compare.csv", cmp_rows, curve)
        print(json.dumps({"crossover_budgets": harness.crossover_budgets(curve)}))
    print(f"solved {sum(r['solved'] for r in rows)}/{len(rows)}")
    return 0


def cmd_inspect_codebook(args) -> int:
    if args.episodes:
        eps = harness.read_episodes(args.episodes)
    else:
        suite = load_suite(args.data)
        eps = evaluate(load_model(args.ckpt), suite.split(args.split), suite.domain, suite.vocab)
    types, mat = harness.codebook_usage_report(eps)
    out = _out(args)
    harness.write_usage(out / "codebook_usage.csv", types, mat)
    print(f"{len(types)} task types x {mat.shape[1]} units")
    return 0


ABLATIONS = ("full", "no-book", "no-ema", "lam0", "no-cp", "follow-pos", "follow-neg", "pos-only", "neg-only")


def cmd_ablate(args) -> int:
    """Train-time variants get their own model; decode-time variants reuse the full model."""
    suite = load_suite(args.data)
    out = _out(args)
    variants = args.variants.split(",")
    for v in variants:
        if v not in ABLATIONS:
            raise SystemExit(f"unknown variant {v!r}; choose from {', '.join(ABLATIONS)}")
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = []
    for seed in seeds:
        models = {}

        def model_for(kind):
            if kind not in models:
                mkw, tkw = {}, {}
                if kind == "no-book":
                    mkw["use_book"] = False
                elif kind == "lam0":
                    mkw["lam"] = 0.0
                elif kind == "no-ema":
                    tkw["ema"] = False
                if args.epochs is not None:
                    tkw["epochs"] = args.epochs
                tr = Trainer(ProcedureLM(toy_model_config(len(suite.vocab), seed, **mkw)),
                             toy_train_config(seed, **tkw), vocab_size=len(suite.vocab))
                tr.run(generate_dataset(suite.domain, suite.train, suite.vocab, suite.spec.max_depth),
                       out / f"train_log_{kind}_{seed}.csv")
                models[kind] = tr.model
            return models[kind]

        for v in variants:
            kind = v if v in ("no-book", "no-ema", "lam0") else "full"
            dc = DecodeConfig(use_cp=v != "no-cp", follow={"follow-pos": "pos", "follow-neg": "neg"}.get(v))
            model = model_for(kind)
            banks = Banks.empty(model.cfg.d_model)
            res = evaluate(model, suite.split(args.split), suite.domain, suite.vocab, args.loop, dc, banks,
                           update=v != "no-cp", pos=v != "neg-only", neg=v != "pos-only")
            m = harness.summarize(res)
            rows.append({"variant": v, "seed": seed, **m})
            print(json.dumps(rows[-1]))
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["variant", "seed", "n", "csr", "cgc", "exe", "spl"])
        w.writeheader()
        w.writerows(rows)
    return 0


# --------------------------------------------------------------------------- #

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="key = value file with [suite]/[model]/[train]/[decode] sections")
    common.add_argument("--out", default="out")
    common.add_argument("--check", action="store_true", help="exit 2 when the run misses its threshold")

    decode = argparse.ArgumentParser(add_help=False)
    decode.add_argument("--no-cp", action="store_true", help="plain greedy decoding")
    decode.add_argument("--follow", choices=("pos", "neg"))
    decode.add_argument("--bank", choices=("both", "pos-only", "neg-only", "none"), default="both")
    decode.add_argument("--no-bank", action="store_true", help="never update the banks")
    decode.add_argument("--final-layer-only", action="store_true")
    decode.add_argument("--loop", choices=("open", "closed"), default="open")
    decode.add_argument("--max-steps", type=int, default=20)

    p = argparse.ArgumentParser(prog="procplan")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common])
    g.add_argument("--grid-w", type=int)
    g.add_argument("--grid-h", type=int)
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--distractors", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common])
    t.add_argument("--data", required=True)
    t.add_argument("--no-book", action="store_true")
    t.add_argument("--no-ema", action="store_true")
    t.add_argument("--lam", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--format", choices=("open", "closed"), default="open")
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common, decode])
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--min-csr", type=float, default=0.0)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("continual", parents=[common, decode])
    c.add_argument("--data", required=True)
    c.add_argument("--ckpt", required=True)
    c.add_argument("--split", default="test")
    c.add_argument("--phases", type=int, default=5)
    c.set_defaults(func=cmd_continual)

    b = sub.add_parser("bench-planner", parents=[common])
    b.add_argument("--data", required=True)
    b.add_argument("--split", default="test")
    b.add_argument("--timeout", type=float, default=5.0)
    b.add_argument("--bfs", action="store_true")
    b.add_argument("--ckpt", help="also time the model and write planner_compare.csv")
    b.add_argument("--budgets", default="0.01,0.03,0.1,0.3,1,3,5")
    b.set_defaults(func=cmd_bench_planner)

    i = sub.add_parser("inspect-codebook", parents=[common])
    i.add_argument("--episodes", help="episodes.jsonl from eval/continual")
    i.add_argument("--data")
    i.add_argument("--ckpt")
    i.add_argument("--split", default="test")
    i.set_defaults(func=cmd_inspect_codebook)

    a = sub.add_parser("ablate", parents=[common, decode])
    a.add_argument("--data", required=True)
    a.add_argument("--split", default="test")
    a.add_argument("--variants", default="full,no-book")
    a.add_argument("--seeds", default="0")
    a.add_argument("--epochs", type=int)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "inspect-codebook" and not args.episodes and not (args.data and args.ckpt):
        raise SystemExit("inspect-codebook needs --episodes, or --data and --ckpt")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
