"""Run every CLI stage on toy data: teacher, general distillation, augmentation,
both task-distillation phases and a final dev evaluation."""

import argparse
import shlex
import sys

from tinydistill.cli import main as cli_main
from tinydistill.experiments import write_pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("work_dir")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--dry-run", action="store_true", help="print the commands without running them")
    args = ap.parse_args()
    for argv in write_pipeline(args.work_dir, seed=args.seed):
        print("tinydistill " + shlex.join(argv), flush=True)
        if not args.dry_run and (code := cli_main(argv)):
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
