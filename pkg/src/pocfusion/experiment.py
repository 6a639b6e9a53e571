"""Experiment orchestration: hash split, multi-system runs, the per-layer
correspondence-head sweep, and attention inspection.

Systems run sequentially so a seeded run is bit-reproducible; the report is
serialized with sorted keys and a fixed float form so two identical runs
produce identical bytes.
"""

import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig, with_model
from .corpus import VARIANTS, FusionInstance, Vocabulary, encode_instance
from .decode import beam_fuse, concat_baseline, greedy_fuse
from .errors import DataError, InvariantError
from .metrics import (
    MetricsReport,
    evaluate_corpus,
    format_extractiveness_table,
    format_report_table,
)
from .model import ModelConfig, ModelParameters, TrainResult, build_masks, forward, train

SYSTEMS = ("concat",) + VARIANTS


def split_corpus(
    instances: Sequence[FusionInstance], train_fraction: float = 0.8
) -> tuple[list[FusionInstance], list[FusionInstance]]:
    """Deterministic train/test split keyed on each instance id's sha1.

    Instances are ordered by (sha1(id), id) and the first `train_fraction`
    become the training split, so the split never depends on corpus file
    order and needs no stored split file.
    """
    if not 0.0 < train_fraction < 1.0:
        raise DataError(f"train_fraction must be in (0, 1), got {train_fraction}")
    ids = [inst.id for inst in instances]
    if len(set(ids)) != len(ids):
        raise DataError("corpus has duplicate instance ids; split would be ambiguous")
    ranked = sorted(
        instances,
        key=lambda inst: (hashlib.sha1(inst.id.encode()).hexdigest(), inst.id),
    )
    n_train = int(len(ranked) * train_fraction)
    return ranked[:n_train], ranked[n_train:]


def decode_corpus(
    instances: Sequence[FusionInstance], result: TrainResult, run: RunConfig
) -> list[list[str]]:
    """Generate one fusion per instance with the run's decode settings."""
    outputs = []
    for inst in instances:
        if run.decode_mode == "beam":
            tokens = beam_fuse(
                inst.sentence_a,
                inst.sentence_b,
                inst.pocs,
                result.params,
                result.config,
                result.vocab,
                beam_width=run.beam_width,
                max_out_len=run.max_out_len,
            )
        else:
            tokens = greedy_fuse(
                inst.sentence_a,
                inst.sentence_b,
                inst.pocs,
                result.params,
                result.config,
                result.vocab,
                max_out_len=run.max_out_len,
            )
        outputs.append(tokens)
    return outputs


def _system_report(
    name: str,
    train_split: Sequence[FusionInstance],
    test_split: Sequence[FusionInstance],
    run: RunConfig,
) -> tuple[MetricsReport, list[list[str]], list[float]]:
    if name == "concat":
        outputs = [concat_baseline(i.sentence_a, i.sentence_b) for i in test_split]
        return evaluate_corpus(test_split, outputs), outputs, []
    result = train(train_split, dataclasses.replace(run.model, variant=name))
    outputs = decode_corpus(test_split, result, run)
    return evaluate_corpus(test_split, outputs), outputs, result.loss_history


def default_corpus(run: RunConfig, n_instances: int = 80, vocab_size: int = 50):
    from .synthetic import generate_synthetic_corpus

    return generate_synthetic_corpus(n_instances, vocab_size, run.seed)


def _load_or_generate(run: RunConfig, corpus):
    if corpus is not None:
        return list(corpus)
    if run.corpus_path is not None:
        from .corpus import parse_corpus

        return parse_corpus(run.corpus_path)
    return default_corpus(run)


def run_experiment(run: RunConfig, corpus=None) -> dict:
    """Train and evaluate all systems on a shared hash split.

    Returns a JSON-ready dict: per-system metric reports, per-system outputs,
    the two comparison tables, and the split sizes. Writes it to
    run.report_path when that is set. Same seed, same corpus => identical
    report bytes.
    """
    instances = _load_or_generate(run, corpus)
    train_split, test_split = split_corpus(instances)
    if not train_split or not test_split:
        raise DataError(
            f"corpus of {len(instances)} instances leaves an empty split"
        )

    reports: dict[str, MetricsReport] = {}
    outputs: dict[str, list[list[str]]] = {}
    final_losses: dict[str, float] = {}
    for name in SYSTEMS:
        report, system_outputs, losses = _system_report(
            name, train_split, test_split, run
        )
        reports[name] = report
        outputs[name] = system_outputs
        if losses:
            final_losses[name] = losses[-1]

    payload = {
        "seed": run.seed,
        "n_train": len(train_split),
        "n_test": len(test_split),
        "decode": {
            "mode": run.decode_mode,
            "beam_width": run.beam_width,
            "max_out_len": run.max_out_len,
        },
        "systems": {name: reports[name].to_dict() for name in SYSTEMS},
        "final_train_loss": final_losses,
        "outputs": {
            name: [" ".join(tokens) for tokens in outputs[name]] for name in SYSTEMS
        },
        "table": format_report_table(reports),
        "extractiveness_table": format_extractiveness_table(reports),
    }
    if run.report_path is not None:
        path = Path(run.report_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(report_to_json(payload))
    return payload


def report_to_json(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def sweep_poc_layer(run: RunConfig, corpus=None) -> dict:
    """Train one shared-representation model per layer, pinning the
    correspondence head to head 0 of that layer, and evaluate each."""
    instances = _load_or_generate(run, corpus)
    train_split, test_split = split_corpus(instances)
    if not train_split or not test_split:
        raise DataError(
            f"corpus of {len(instances)} instances leaves an empty split"
        )

    reports: dict[str, MetricsReport] = {}
    for layer in range(run.model.layers):
        layer_run = with_model(run, variant="sharerepr", poc_head=(layer, 0))
        result = train(train_split, layer_run.model)
        outputs = decode_corpus(test_split, result, layer_run)
        reports[f"layer{layer}"] = evaluate_corpus(test_split, outputs)

    payload = {
        "seed": run.seed,
        "n_train": len(train_split),
        "n_test": len(test_split),
        "layers": {name: reports[name].to_dict() for name in reports},
        "table": format_report_table(reports),
    }
    if run.report_path is not None:
        path = Path(run.report_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(report_to_json(payload))
    return payload


def _mask_grid(mask) -> list[list[int]]:
    return [[int(v) for v in row] for row in mask.allowed()]


def inspect_attention(
    inst: FusionInstance,
    params: ModelParameters,
    config: ModelConfig,
    vocab: Vocabulary,
) -> dict:
    """JSON-ready view of one encoded instance's masks and attention maps.

    Masks are 0/1 "may attend" grids; attention maps are full float rows.
    For a sharerepr model this also re-checks the correspondence-head
    invariant: rows inside a group put zero mass outside it.
    """
    encoded = encode_instance(inst, vocab, config.variant, config.max_len)
    base, poc = build_masks(config, encoded)
    _, attention = forward(encoded, params, config, collect_attention=True)

    maps = [
        [head.tolist() for head in layer_heads] for layer_heads in attention
    ]
    if config.variant == "sharerepr":
        layer, head = config.poc_head
        grid = np.asarray(attention[layer][head])
        for i in range(encoded.source_len):
            group = encoded.z[i]
            if group == 0:
                continue
            off_group = grid[i][: len(encoded)].copy()
            off_group[(encoded.z == group).nonzero()[0]] = 0.0
            if off_group.max() > 0.0:
                raise InvariantError(
                    f"correspondence head leaks attention mass from row {i}"
                )

    return {
        "instance_id": inst.id,
        "variant": config.variant,
        "tokens": vocab.decode_ids(encoded.ids.tolist()),
        "source_len": encoded.source_len,
        "z": encoded.z.tolist(),
        "poc_head": list(config.poc_head),
        "masks": {
            "base": _mask_grid(base),
            "poc_head": _mask_grid(poc) if poc is not None else None,
        },
        "attention": maps,
    }
