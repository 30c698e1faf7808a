"""Run the synthetic ablation (full vs no-contrastive) and print a summary.

    python scripts/ablation.py --seeds 10
"""
import argparse
import json
import logging

from ccfcrec.experiments import AblationConfig, run_ablation, summarize


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--first-seed", type=int, default=0)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    results = run_ablation(range(args.first_seed, args.first_seed + args.seeds), AblationConfig())
    for r in results:
        print(f"seed {r.seed}: full {r.ndcg('full'):.4f}  no-contrastive {r.ndcg('no-contrastive'):.4f}")
    print(json.dumps(summarize(results), indent=2))


if __name__ == "__main__":
    main()
