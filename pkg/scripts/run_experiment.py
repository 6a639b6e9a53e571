#!/usr/bin/env python3
"""Train and evaluate every system (concat, baseline, linking, sharerepr) on
one shared corpus split and print the comparison tables.

Without --corpus this generates the deterministic synthetic corpus (default
80 instances => 64 train / 16 test). Pass --out to also write the full JSON
report.
"""

import argparse
import sys

from pocfusion.config import load_config
from pocfusion.errors import DataError, InvariantError
from pocfusion.experiment import run_experiment
from pocfusion.synthetic import generate_synthetic_corpus


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", help="JSON run-config file")
    parser.add_argument("--corpus", help="corpus JSONL (default: synthetic)")
    parser.add_argument("--n", type=int, default=80, help="synthetic instance count")
    parser.add_argument("--vocab", type=int, default=50, help="synthetic word pool size")
    parser.add_argument("--seed", type=int, help="seed override")
    parser.add_argument("--beam", type=int, metavar="WIDTH", help="beam search width")
    parser.add_argument("--out", help="write the JSON report here")
    args = parser.parse_args(argv)

    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.beam is not None:
        overrides["decode_mode"] = "beam"
        overrides["beam_width"] = args.beam
    if args.corpus is not None:
        overrides["corpus_path"] = args.corpus
    if args.out is not None:
        overrides["report_path"] = args.out

    try:
        run = load_config(args.config, overrides)
        corpus = None
        if run.corpus_path is None:
            corpus = generate_synthetic_corpus(args.n, args.vocab, run.seed)
        payload = run_experiment(run, corpus=corpus)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except InvariantError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 3

    print(payload["table"])
    print()
    print(payload["extractiveness_table"])
    losses = payload["final_train_loss"]
    print()
    print(
        "final train loss: "
        + "  ".join(f"{name}={losses[name]:.4f}" for name in sorted(losses))
    )
    if args.out is not None:
        print(f"report written to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
