"""Run a toy ablation grid and write the TSV report.

Recipes: procedures, objectives, mapping.  Worker processes follow
DISTILL_THREADS (default: one per core).
"""

import argparse
import logging
import sys
from pathlib import Path

from tinydistill.experiments import RECIPES, ToyBudget, prepare, run_ablation, thread_cap


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--recipe", nargs="+", default=sorted(RECIPES), choices=sorted(RECIPES))
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--tasks", default="trigger")
    ap.add_argument("--out", type=Path, default=Path("ablation"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    seeds = tuple(int(s) for s in args.seeds.split(","))
    tasks = tuple(args.tasks.split(","))
    setup = prepare(ToyBudget(), tasks)
    args.out.mkdir(parents=True, exist_ok=True)
    for recipe in args.recipe:
        rep = run_ablation(recipe, setup=setup, seeds=seeds, task_names=tasks, threads=thread_cap())
        (args.out / f"{recipe}.tsv").write_text(rep.to_tsv(), encoding="utf-8")
        print(rep.to_tsv())
    return 0


if __name__ == "__main__":
    sys.exit(main())
