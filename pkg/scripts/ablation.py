"""Compare the full model with its timespan and entropy ablations on the two-session corpus.

Prints one row per seed and variant: held-out Hit@10, mean assignment
entropy, share of explained predictions and wall time.

    python3 scripts/ablation.py --seeds 0 1 2 3 4 --epochs 100
"""

import argparse
import time

from hgnnrec import experiments


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--users", type=int, default=400)
    ap.add_argument("--arms", nargs="+", default=list(experiments.ARMS), choices=list(experiments.ARMS))
    args = ap.parse_args()

    start = time.perf_counter()
    print("seed\tarm\thit10\tentropy\texplained\tseconds")
    wins = 0
    for seed in args.seeds:
        ds = experiments.recency_data(seed, n_users=args.users)
        rows = {arm: experiments.recency_run(seed, arm, args.epochs, dataset=ds) for arm in args.arms}
        for r in rows.values():
            print(f"{seed}\t{r.arm}\t{r.hit10:.3f}\t{r.entropy:.4f}\t{r.explained:.2f}\t{r.seconds:.1f}", flush=True)
        if "full" in rows:
            wins += all(rows["full"].hit10 >= r.hit10 for r in rows.values())
    if "full" in args.arms:
        print(f"full >= every ablation in {wins}/{len(args.seeds)} seeds")
    print(f"total {time.perf_counter() - start:.0f}s")


if __name__ == "__main__":
    main()
