"""Train the toy preset on the 29-instance suite for several seeds and report train CSR/SPL."""
import argparse
import json
from pathlib import Path

from procplan.experiments import SuiteSpec, build_suite, evaluate, save_suite, toy_model_config, toy_train_config, \
    train_on_suite
from procplan.harness import summarize, write_json


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--out", default="results/train_toy")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    suite = build_suite(SuiteSpec())
    save_suite(suite, out / "suite")
    report = {}
    for seed in (int(s) for s in args.seeds.split(",")):
        tr = train_on_suite(suite, toy_model_config(len(suite.vocab), seed), toy_train_config(seed),
                            log_path=out / f"train_log_{seed}.csv", ckpt_path=out / f"model_{seed}.nspr")
        report[seed] = {"train": summarize(evaluate(tr.model, suite.train, suite.domain, suite.vocab)),
                        "test": summarize(evaluate(tr.model, suite.test, suite.domain, suite.vocab))}
        print(seed, json.dumps(report[seed]))
    write_json(out / "metrics.json", report)


if __name__ == "__main__":
    main()
