"""Run the cruise-control scenario over several seeds and print the summaries."""
import argparse
import json
import os

from gpcbf.experiments import default_config, load_config, run_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", help="scenario YAML (defaults to the built-in cruise scenario)")
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--out", default="out/cruise")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    for seed in range(args.seeds):
        cfg = load_config(args.config) if args.config else default_config("cruise")
        cfg.sim.seed = seed
        tr = run_scenario(cfg, trace_path=os.path.join(args.out, f"trace_seed{seed}.csv"))
        print(json.dumps({"seed": seed, **tr.summary}, default=float))


if __name__ == "__main__":
    main()
