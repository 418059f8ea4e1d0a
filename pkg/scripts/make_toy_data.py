"""Write the synthetic trigger task (train/dev/corpus TSVs plus toy vectors)."""

import argparse

from tinydistill.corpora import write_toy_task


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out_dir")
    ap.add_argument("--n-train", type=int, default=500)
    ap.add_argument("--n-dev", type=int, default=400)
    ap.add_argument("--n-corpus", type=int, default=4000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    paths = write_toy_task(args.out_dir, args.n_train, args.n_dev, args.n_corpus, seed=args.seed)
    for name, path in paths.items():
        print(f"{name}\t{path}")


if __name__ == "__main__":
    main()
