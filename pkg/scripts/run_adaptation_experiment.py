"""Pretrain the desk model on synthetic English, then LoRA-adapt it to a pseudo-language.

    python3 scripts/run_adaptation_experiment.py --out results/adaptation.json
"""

import argparse
from dataclasses import replace

from peftkit.experiment import ExperimentConfig, dump, run_adaptation_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="adaptation.json")
    ap.add_argument("--ranks", type=int, nargs="+", default=[1, 4, 16])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--adapt-steps", type=int, default=ExperimentConfig.adapt_steps)
    args = ap.parse_args()
    cfg = replace(ExperimentConfig(), ranks=tuple(args.ranks), seeds=tuple(args.seeds),
                  adapt_steps=args.adapt_steps)
    result = run_adaptation_experiment(cfg)
    for rank, ppl in result.mean_ppl_by_rank.items():
        print(f"rank {rank:>4}: mean held-out ppl {ppl:.3f} "
              f"({1 - ppl / result.base_ppl_heldout:.1%} below the unadapted model)")
    print(f"wall clock {result.wall_clock:.1f}s")
    dump(result, args.out)


if __name__ == "__main__":
    main()
