#!/usr/bin/env python3
"""Monte-Carlo scaling of coefficient error with sample count and noise level."""

import argparse
import json

from shredkit import evaluation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trials", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="optional JSON report path")
    args = ap.parse_args()

    report = evaluation.theory_scaling_experiment(trials=args.trials, seed=args.seed)
    print(f"log-log slope of coefficient error vs n: {report.slope_n:.4f} "
          f"(CI {report.slope_n_ci[0]:.4f} .. {report.slope_n_ci[1]:.4f}; -0.5 expected)")
    print(f"error ratio for doubled noise: {report.s_ratio:.3f} "
          f"(CI {report.s_ratio_ci[0]:.3f} .. {report.s_ratio_ci[1]:.3f}; 2 expected)")
    print(f"empirical lower bound on lambda_min(Theta'Theta)/n: {report.lambda_min_overall:.4f}")
    for cell in report.cells:
        print(f"  n={cell.n:>7}  s={cell.noise:<4}  coef err {cell.coef_err_mean:.5f} "
              f"+/- {cell.coef_err_std:.5f}  rollout err {cell.rollout_err_mean:.5f}")
    if args.out:
        with open(args.out, "w") as f:
            json.dump(report.to_dict(), f, indent=2)
        print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
