"""Held-out test CSR of the full model against the no-book ablation over several seeds."""
import argparse
import csv
from pathlib import Path

from procplan.experiments import SuiteSpec, build_suite, evaluate, toy_model_config, toy_train_config, train_on_suite
from procplan.harness import summarize


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--grid", type=int, default=2)
    ap.add_argument("--n-train", type=int, default=100)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--out", default="results/codebook_ablation")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    suite = build_suite(SuiteSpec(grid_w=args.grid, grid_h=args.grid, n_train=args.n_train, n_test=60))
    rows = []
    for seed in (int(s) for s in args.seeds.split(",")):
        for book in (True, False):
            tr = train_on_suite(suite, toy_model_config(len(suite.vocab), seed, use_book=book),
                                toy_train_config(seed, epochs=args.epochs, warmup_steps=200))
            for split in ("train", "test"):
                m = summarize(evaluate(tr.model, suite.split(split), suite.domain, suite.vocab))
                rows.append({"variant": "full" if book else "no-book", "seed": seed, "split": split, **m})
                print(rows[-1])
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


if __name__ == "__main__":
    main()
