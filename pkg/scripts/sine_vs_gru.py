#!/usr/bin/env python3
"""Extrapolation shoot-out: library regression vs. a recurrent net on xdd = -sin(x)."""

import argparse

from shredkit import evaluation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--gru-epochs", type=int, default=150)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = evaluation.SineComparisonConfig(seed=args.seed, gru_epochs=args.gru_epochs)
    report = evaluation.sine_comparison(cfg)
    print(f"sin-term coefficient: {report.sin_coefficient:+.6f} (true -1)")
    print(f"library-regression extrapolation MSE: {report.sindy_mse:.3e}")
    print(f"recurrent-baseline extrapolation MSE: {report.gru_mse:.3e}")
    winner = "library regression" if report.sindy_mse < report.gru_mse else "recurrent net"
    print(f"2x-horizon winner: {winner}")


if __name__ == "__main__":
    main()
