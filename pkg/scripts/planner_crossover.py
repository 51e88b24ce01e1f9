"""Success-under-budget of the model and the A* planner on a distractor-padded suite."""
import argparse
from pathlib import Path

from procplan.experiments import SuiteSpec, build_suite, toy_model_config, toy_train_config, train_on_suite
from procplan.harness import budget_curve, compare_planner, crossover_budgets, write_compare

BUDGETS = (0.01, 0.03, 0.05, 0.1, 0.2, 0.3, 0.5, 1.0, 2.0, 5.0)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--grid", type=int, default=5)
    ap.add_argument("--distractors", type=int, default=8)
    ap.add_argument("--n-train", type=int, default=20)
    ap.add_argument("--out", default="results/planner_crossover")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    suite = build_suite(SuiteSpec(grid_w=args.grid, grid_h=args.grid, n_train=args.n_train, n_test=1, seed=10,
                                  distractors=args.distractors))
    tr = train_on_suite(suite, toy_model_config(len(suite.vocab), 0), toy_train_config(0),
                        log_path=out / "train_log.csv")
    rows = compare_planner(tr.model, suite.train, suite.domain, suite.vocab, planner_timeout=max(BUDGETS))
    curve = budget_curve(rows, BUDGETS)
    write_compare(out / "planner_compare.csv", rows, curve)
    for c in curve:
        print(c)
    print("crossover budgets:", crossover_budgets(curve))


if __name__ == "__main__":
    main()
