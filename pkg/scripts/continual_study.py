"""Continual sequence on the toy suite: full system against the stateless ablation."""
import argparse
from pathlib import Path

from procplan.experiments import SuiteSpec, build_suite, toy_model_config, toy_train_config, train_on_suite
from procplan.harness import SequenceConfig, Variant, continual_run, write_episodes, write_phases
from procplan.training import load_model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ckpt", help="trained toy checkpoint (trains seed 0 when omitted)")
    ap.add_argument("--out", default="results/continual")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    suite = build_suite(SuiteSpec())
    if args.ckpt:
        model = load_model(args.ckpt)
    else:
        model = train_on_suite(suite, toy_model_config(len(suite.vocab), 0), toy_train_config(0)).model
    # held-out tasks first, then training tasks that fill the positive bank, then more held-out tasks
    ids = [i.id for i in suite.test[:20]] + [i.id for i in suite.train] + [i.id for i in suite.test[20:40]]
    seq = SequenceConfig(ids, [20, 34, 49, 69])
    for name, variant in (("full", Variant()), ("stateless", Variant.stateless())):
        rep = continual_run(model, suite.by_id(), suite.domain, suite.vocab, seq, variant)
        write_phases(out / f"phases_{name}.csv", rep.phases)
        write_episodes(out / f"episodes_{name}.jsonl", [e for _, _, e in rep.episodes])
        for p in rep.phases:
            print(name, p)


if __name__ == "__main__":
    main()
