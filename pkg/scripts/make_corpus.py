"""Write a synthetic interaction log as CSV for the command-line tools.

    python3 scripts/make_corpus.py recency events.csv --users 400 --seed 0
"""

import argparse

from hgnnrec import data, synthetic


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("kind", choices=["pattern", "recency"])
    ap.add_argument("out")
    ap.add_argument("--users", type=int, default=None)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    make = synthetic.pattern_corpus if args.kind == "pattern" else synthetic.recency_corpus
    kwargs = {"seed": args.seed} if args.users is None else {"seed": args.seed, "n_users": args.users}
    print(f"{data.write_interactions(make(**kwargs), args.out)} interactions written to {args.out}")


if __name__ == "__main__":
    main()
