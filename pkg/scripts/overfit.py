"""Train on the fixed-pattern corpus and print train Hit@1 per epoch.

    python3 scripts/overfit.py --epochs 100 --seed 0
"""

import argparse

from hgnnrec import experiments


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--batch-size", type=int, default=32)
    ap.add_argument("--stop-at", type=float, default=None, help="stop once train Hit@1 reaches this level")
    args = ap.parse_args()

    res = experiments.overfit_run(args.seed, args.epochs, args.batch_size, args.stop_at)
    print("epoch\ttrain_loss\ttrain_hit1")
    for epoch, (loss, hit) in enumerate(zip(res.losses, res.hit1), start=1):
        print(f"{epoch}\t{loss:.4f}\t{hit:.3f}")
    print(f"first epoch with Hit@1 >= 0.95: {res.epochs_to(0.95)}")
    print(f"Hit@10 model {res.model_hit10:.3f}, popularity {res.popularity_hit10:.3f}; {res.seconds:.1f}s")


if __name__ == "__main__":
    main()
