"""Failure rate and collected samples versus sampling frequency, UCB against random exploration."""
import argparse
import os

from gpcbf.experiments import SWEEP_HEADER, default_config, load_config, run_failure_sweep, write_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", help="scenario YAML (defaults to the built-in cruise scenario)")
    ap.add_argument("--trials", type=int, help="trials per frequency (default from the config)")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="out/sweep")
    args = ap.parse_args()
    cfg = load_config(args.config) if args.config else default_config("cruise")
    table = run_failure_sweep(cfg, trials=args.trials, jobs=args.jobs)
    os.makedirs(args.out, exist_ok=True)
    write_csv(os.path.join(args.out, "failure_rates.csv"), SWEEP_HEADER, table)
    for row in table:
        print("f=%-10g %-6s failure_rate=%.3f mean_samples=%.2f" % tuple(row))


if __name__ == "__main__":
    main()
