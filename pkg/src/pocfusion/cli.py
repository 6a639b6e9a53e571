"""Command-line interface.

Subcommands: train, fuse, evaluate, inspect-attention, make-synthetic,
sweep-poc-layer. Every command accepts --config/--seed/--variant/--beam/--out
and exits 0 on success, 1 on usage errors, 2 on bad data, and 3 if an
internal invariant trips.
"""

import argparse
import json
import sys
from pathlib import Path

from .config import RunConfig, load_config
from .corpus import VARIANTS, instance_to_record, parse_corpus, write_corpus
from .decode import beam_fuse, greedy_fuse
from .errors import DataError, InvariantError
from .experiment import inspect_attention, report_to_json, sweep_poc_layer
from .metrics import evaluate_corpus
from .model import load_checkpoint, save_checkpoint, train
from .synthetic import generate_synthetic_corpus


class UsageError(Exception):
    """Bad command line; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON run-config file")
    parser.add_argument("--seed", type=int, help="seed override")
    parser.add_argument(
        "--variant", choices=VARIANTS, help="model variant override"
    )
    parser.add_argument(
        "--beam", type=int, metavar="WIDTH", help="use beam search at this width"
    )
    parser.add_argument("--out", help="output path (default: stdout or config path)")


def build_parser() -> _Parser:
    parser = _Parser(prog="pocfusion", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p_train = sub.add_parser("train", help="train one model and save a checkpoint")
    p_train.add_argument("--corpus", help="training corpus JSONL")
    _add_common_flags(p_train)

    p_fuse = sub.add_parser(
        "fuse", help="fuse instances from a corpus file, one output line each"
    )
    p_fuse.add_argument("--checkpoint", help="trained model checkpoint")
    p_fuse.add_argument("--corpus", help="instances to fuse (JSONL)")
    _add_common_flags(p_fuse)

    p_eval = sub.add_parser(
        "evaluate", help="score generated fusions against corpus references"
    )
    p_eval.add_argument("--corpus", help="reference corpus JSONL")
    p_eval.add_argument(
        "--outputs", help="generated fusions, one whitespace-tokenized line each"
    )
    _add_common_flags(p_eval)

    p_inspect = sub.add_parser(
        "inspect-attention", help="dump one instance's masks and attention as JSON"
    )
    p_inspect.add_argument("--checkpoint", help="trained model checkpoint")
    p_inspect.add_argument("--corpus", help="corpus holding the instance (JSONL)")
    p_inspect.add_argument(
        "--instance", help="instance id to inspect (default: first in the corpus)"
    )
    _add_common_flags(p_inspect)

    p_make = sub.add_parser(
        "make-synthetic", help="emit a deterministic synthetic corpus as JSONL"
    )
    p_make.add_argument("--n", type=int, default=80, help="instance count")
    p_make.add_argument("--vocab", type=int, default=50, help="word pool size")
    _add_common_flags(p_make)

    p_sweep = sub.add_parser(
        "sweep-poc-layer",
        help="train a sharerepr model per layer and report per-layer metrics",
    )
    p_sweep.add_argument("--corpus", help="corpus JSONL (default: synthetic 80/50)")
    _add_common_flags(p_sweep)

    return parser


def _run_config(args) -> RunConfig:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.variant is not None:
        overrides["variant"] = args.variant
    if args.beam is not None:
        overrides["decode_mode"] = "beam"
        overrides["beam_width"] = args.beam
    if getattr(args, "corpus", None) is not None:
        overrides["corpus_path"] = args.corpus
    return load_config(args.config, overrides)


def _require(value, what: str):
    if value is None:
        raise DataError(f"no {what} given (flag or config file)")
    return value


def _load_corpus(run: RunConfig):
    return parse_corpus(_require(run.corpus_path, "corpus path"))


def _emit_text(out_path, text: str) -> None:
    if out_path is None:
        sys.stdout.write(text)
    else:
        path = Path(out_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)


def _fuse_one(inst, params, config, vocab, run: RunConfig) -> list[str]:
    if run.decode_mode == "beam":
        return beam_fuse(
            inst.sentence_a, inst.sentence_b, inst.pocs, params, config, vocab,
            beam_width=run.beam_width, max_out_len=run.max_out_len,
        )
    return greedy_fuse(
        inst.sentence_a, inst.sentence_b, inst.pocs, params, config, vocab,
        max_out_len=run.max_out_len,
    )


def _cmd_train(args) -> int:
    run = _run_config(args)
    corpus = _load_corpus(run)
    out_path = _require(args.out or run.checkpoint_path, "checkpoint output path")
    result = train(corpus, run.model)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_path, result.params, result.config, result.vocab)
    final = result.loss_history[-1] if result.loss_history else float("nan")
    print(
        f"trained {run.model.variant} on {len(corpus)} instances, "
        f"{len(result.loss_history)} steps, final loss {final:.6f}"
    )
    print(f"checkpoint written to {out_path}")
    return 0


def _cmd_fuse(args) -> int:
    run = _run_config(args)
    checkpoint_path = _require(args.checkpoint or run.checkpoint_path, "checkpoint")
    params, config, vocab = load_checkpoint(checkpoint_path)
    corpus = _load_corpus(run)
    lines = [
        " ".join(_fuse_one(inst, params, config, vocab, run)) for inst in corpus
    ]
    _emit_text(args.out, "".join(line + "\n" for line in lines))
    return 0


def _cmd_evaluate(args) -> int:
    run = _run_config(args)
    references = _load_corpus(run)
    outputs_path = Path(_require(args.outputs, "outputs file"))
    if not outputs_path.exists():
        raise DataError(f"outputs file not found: {outputs_path}")
    outputs = [line.split() for line in outputs_path.read_text().splitlines()]
    report = evaluate_corpus(references, outputs)
    _emit_text(args.out, report.to_json())
    return 0


def _cmd_inspect_attention(args) -> int:
    run = _run_config(args)
    checkpoint_path = _require(args.checkpoint or run.checkpoint_path, "checkpoint")
    params, config, vocab = load_checkpoint(checkpoint_path)
    corpus = _load_corpus(run)
    if args.instance is None:
        inst = corpus[0]
    else:
        by_id = {i.id: i for i in corpus}
        if args.instance not in by_id:
            raise DataError(f"instance id {args.instance!r} not in the corpus")
        inst = by_id[args.instance]
    view = inspect_attention(inst, params, config, vocab)
    _emit_text(args.out, json.dumps(view, sort_keys=True, indent=2) + "\n")
    return 0


def _cmd_make_synthetic(args) -> int:
    run = _run_config(args)
    corpus = generate_synthetic_corpus(args.n, args.vocab, run.seed)
    if args.out is None:
        for inst in corpus:
            sys.stdout.write(json.dumps(instance_to_record(inst)) + "\n")
    else:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_corpus(args.out, corpus)
    return 0


def _cmd_sweep_poc_layer(args) -> int:
    run = _run_config(args)
    payload = sweep_poc_layer(run)
    if args.out is not None:
        _emit_text(args.out, report_to_json(payload))
    print(payload["table"])
    return 0


_HANDLERS = {
    "train": _cmd_train,
    "fuse": _cmd_fuse,
    "evaluate": _cmd_evaluate,
    "inspect-attention": _cmd_inspect_attention,
    "make-synthetic": _cmd_make_synthetic,
    "sweep-poc-layer": _cmd_sweep_poc_layer,
}


def entrypoint(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return _HANDLERS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except InvariantError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(entrypoint())
