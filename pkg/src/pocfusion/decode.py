"""Generation: greedy and beam decoding over a trained model, plus the
concatenation baseline.

Generation proceeds UniLM-style: append a [MASK] slot after the current
prefix, run the full forward pass, read the output distribution at that slot,
commit a token, repeat. The candidate set excludes every reserved id except
[EOS] (padding, control tokens, the mask itself, and all correspondence
markers are never emitted). Decoding stops when [EOS] wins the slot or after
max_out_len tokens; the returned sequence never includes [EOS].

Scores: beams are pruned by summed log-probability during search and finished
hypotheses are ranked by length-normalized score (sum divided by step count,
where the terminating [EOS] counts as a step; a forced stop at max_out_len
contributes no [EOS] step). Ties anywhere break toward the lexicographically
smallest id sequence, which makes beam_width=1 coincide with greedy decoding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .corpus import EOS_ID, MASK_ID, EncodedInstance, Poc, Vocabulary, encode_source_for_generation
from .errors import DataError
from .model import ModelConfig, ModelParameters, forward, output_distribution

StepFn = Callable[[tuple[int, ...]], np.ndarray]

DEFAULT_MAX_OUT_LEN = 32


def make_model_step(
    source: EncodedInstance,
    params: ModelParameters,
    config: ModelConfig,
) -> StepFn:
    """Step function: generated prefix -> log-probabilities for the next slot."""

    def step(generated: tuple[int, ...]) -> np.ndarray:
        n_new = len(generated) + 1
        ids = np.concatenate([source.ids, np.array(generated + (MASK_ID,), dtype=np.int64)])
        segments = np.concatenate([source.segments, np.ones(n_new, dtype=np.int64)])
        enc = EncodedInstance(
            ids=ids,
            segments=segments,
            source_len=source.source_len,
            z=source.z,
            summary_start=source.source_len,
            summary_end=len(ids) - 1,
            instance_id=source.instance_id,
        )
        hidden, _ = forward(enc, params, config)
        probs = output_distribution(hidden.data[-1], params)
        with np.errstate(divide="ignore"):
            return np.log(probs)

    return step


def greedy_decode(
    step_fn: StepFn,
    eos_id: int,
    banned_ids: Sequence[int],
    max_out_len: int = DEFAULT_MAX_OUT_LEN,
) -> list[int]:
    """Argmax decoding; ties break toward the lowest id (np.argmax order)."""
    if max_out_len < 0:
        raise DataError(f"max_out_len must be >= 0, got {max_out_len}")
    banned = np.array(sorted(set(banned_ids) - {eos_id}), dtype=np.int64)
    out: list[int] = []
    while len(out) < max_out_len:
        logp = np.array(step_fn(tuple(out)), dtype=np.float64, copy=True)
        if banned.size:
            logp[banned] = -np.inf
        next_id = int(np.argmax(logp))
        if next_id == eos_id:
            break
        out.append(next_id)
    return out


@dataclass(frozen=True)
class _Hypothesis:
    ids: tuple[int, ...]
    score: float  # summed log-probability
    steps: int  # committed slots, including a terminating EOS

    @property
    def normalized(self) -> float:
        return self.score / self.steps if self.steps else float("-inf")


def beam_decode(
    step_fn: StepFn,
    eos_id: int,
    banned_ids: Sequence[int],
    max_out_len: int = DEFAULT_MAX_OUT_LEN,
    beam_width: int = 4,
) -> list[int]:
    """Beam search over the same step function as greedy_decode."""
    if beam_width < 1:
        raise DataError(f"beam_width must be >= 1, got {beam_width}")
    if max_out_len < 0:
        raise DataError(f"max_out_len must be >= 0, got {max_out_len}")
    if max_out_len == 0:
        return []
    banned = set(banned_ids) - {eos_id}

    live = [_Hypothesis(ids=(), score=0.0, steps=0)]
    finished: list[_Hypothesis] = []
    while live:
        candidates: list[_Hypothesis] = []
        for hyp in live:
            logp = np.asarray(step_fn(hyp.ids), dtype=np.float64)
            for token_id in range(logp.shape[0]):
                if token_id in banned:
                    continue
                candidates.append(
                    _Hypothesis(
                        ids=hyp.ids + (token_id,),
                        score=hyp.score + float(logp[token_id]),
                        steps=hyp.steps + 1,
                    )
                )
        candidates.sort(key=lambda h: (-h.score, h.ids))
        kept = candidates[:beam_width]
        live = []
        for hyp in kept:
            if hyp.ids[-1] == eos_id:
                finished.append(_Hypothesis(ids=hyp.ids[:-1], score=hyp.score, steps=hyp.steps))
            elif len(hyp.ids) >= max_out_len:
                finished.append(hyp)
            else:
                live.append(hyp)
    if not finished:  # only possible when max_out_len == 0
        return []
    finished.sort(key=lambda h: (-h.normalized, h.ids))
    return list(finished[0].ids)


def _prepare(sentence_a, sentence_b, pocs, params, config, vocab, max_out_len):
    source = encode_source_for_generation(
        list(sentence_a), list(sentence_b), list(pocs), vocab,
        config.variant, config.max_len, max_out_len,
    )
    step_fn = make_model_step(source, params, config)
    return step_fn, EOS_ID, vocab.generation_banned_ids()


def greedy_fuse(
    sentence_a: Sequence[str],
    sentence_b: Sequence[str],
    pocs: Sequence[Poc],
    params: ModelParameters,
    config: ModelConfig,
    vocab: Vocabulary,
    max_out_len: int = DEFAULT_MAX_OUT_LEN,
) -> list[str]:
    """Fuse two tokenized sentences with greedy decoding; returns tokens."""
    step_fn, eos_id, banned = _prepare(sentence_a, sentence_b, pocs, params, config, vocab, max_out_len)
    ids = greedy_decode(step_fn, eos_id, banned, max_out_len)
    return vocab.decode_ids(ids)


def beam_fuse(
    sentence_a: Sequence[str],
    sentence_b: Sequence[str],
    pocs: Sequence[Poc],
    params: ModelParameters,
    config: ModelConfig,
    vocab: Vocabulary,
    beam_width: int = 4,
    max_out_len: int = DEFAULT_MAX_OUT_LEN,
) -> list[str]:
    """Fuse two tokenized sentences with beam search; returns tokens."""
    step_fn, eos_id, banned = _prepare(sentence_a, sentence_b, pocs, params, config, vocab, max_out_len)
    ids = beam_decode(step_fn, eos_id, banned, max_out_len, beam_width)
    return vocab.decode_ids(ids)


def concat_baseline(sentence_a: Sequence[str], sentence_b: Sequence[str]) -> list[str]:
    """The trivial fusion: sentence A followed by sentence B, verbatim."""
    return list(sentence_a) + list(sentence_b)
