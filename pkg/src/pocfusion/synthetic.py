"""Deterministic synthetic fusion corpus.

Each generated instance has two short sentences that share 1-3 correspondence
groups (either the same token chunk repeated in both sentences, or a chunk
paired with a fixed "paraphrase" partner word), plus content exclusive to each
sentence. The reference fusion stitches exclusive content from both sides
around one correspondence mention, so by construction every target draws at
least two content types from each source.
"""

from dataclasses import dataclass

import numpy as np

from .corpus import SENT_A, SENT_B, FusionInstance, Mention, Poc
from .errors import DataError

_SYLLABLES = (
    "ba", "du", "fe", "gi", "ko",
    "lu", "mi", "na", "po", "ri",
    "su", "ta", "vo", "wi", "za",
)


def word_pool(vocab_size: int) -> list[str]:
    """First `vocab_size` words of the fixed syllable-product sequence."""
    words: list[str] = []
    for first in _SYLLABLES:
        for second in _SYLLABLES:
            words.append(first + second)
            if len(words) == vocab_size:
                return words
    for first in _SYLLABLES:
        for second in _SYLLABLES:
            for third in _SYLLABLES:
                words.append(first + second + third)
                if len(words) == vocab_size:
                    return words
    raise DataError(f"vocab_size {vocab_size} exceeds the syllable pool")


@dataclass(frozen=True)
class _Chunk:
    tokens: tuple[str, ...]
    poc_index: int  # -1 for exclusive filler


def _layout(chunks: list[_Chunk], rng: np.random.Generator):
    """Arrange chunks in a random order; return (tokens, spans-by-poc-index)."""
    order = rng.permutation(len(chunks))
    tokens: list[str] = []
    spans: dict[int, tuple[int, int]] = {}
    for idx in order:
        chunk = chunks[int(idx)]
        start = len(tokens)
        tokens.extend(chunk.tokens)
        if chunk.poc_index >= 0:
            spans[chunk.poc_index] = (start, len(tokens))
    return tokens, spans


def _subset(words: list[str], size: int, rng: np.random.Generator) -> list[str]:
    """Pick `size` of `words` uniformly, preserving their original order."""
    picks = sorted(rng.choice(len(words), size=size, replace=False).tolist())
    return [words[i] for i in picks]


def generate_synthetic_corpus(
    n_instances: int, vocab_size: int, seed: int
) -> list[FusionInstance]:
    if n_instances < 1:
        raise DataError(f"n_instances must be >= 1, got {n_instances}")
    if vocab_size < 20:
        raise DataError(f"vocab_size must be >= 20, got {vocab_size}")

    pool = word_pool(vocab_size)
    # Words are consumed as (primary, paraphrase-partner) pairs so that no
    # token leaks between roles within an instance.
    n_pairs = vocab_size // 2
    rng = np.random.default_rng(seed)

    instances: list[FusionInstance] = []
    for index in range(n_instances):
        pair_order = rng.permutation(n_pairs)
        cursor = 0

        def take_pair():
            nonlocal cursor
            pair = int(pair_order[cursor])
            cursor += 1
            return pool[2 * pair], pool[2 * pair + 1]

        size_a = int(rng.integers(2, 5))
        size_b = int(rng.integers(2, 5))
        mention_budget = n_pairs - size_a - size_b
        n_pocs = min(int(rng.integers(1, 4)), mention_budget)

        poc_records = []
        budget_left = mention_budget
        for _ in range(n_pocs):
            max_len = min(2, budget_left - (n_pocs - len(poc_records) - 1))
            length = int(rng.integers(1, max_len + 1))
            budget_left -= length
            paraphrased = bool(rng.integers(0, 2))
            tokens_a = []
            tokens_b = []
            for _ in range(length):
                primary, partner = take_pair()
                tokens_a.append(primary)
                tokens_b.append(partner if paraphrased else primary)
            poc_records.append((tuple(tokens_a), tuple(tokens_b)))

        exclusive_a = [take_pair()[0] for _ in range(size_a)]
        exclusive_b = [take_pair()[0] for _ in range(size_b)]

        chunks_a = [_Chunk(rec[0], i) for i, rec in enumerate(poc_records)]
        chunks_a += [_Chunk((w,), -1) for w in exclusive_a]
        chunks_b = [_Chunk(rec[1], i) for i, rec in enumerate(poc_records)]
        chunks_b += [_Chunk((w,), -1) for w in exclusive_b]

        sentence_a, spans_a = _layout(chunks_a, rng)
        sentence_b, spans_b = _layout(chunks_b, rng)

        pocs = tuple(
            Poc(
                poc_id=i + 1,
                mentions=(
                    Mention(SENT_A, *spans_a[i]),
                    Mention(SENT_B, *spans_b[i]),
                ),
            )
            for i in range(n_pocs)
        )

        picked_a = _subset(exclusive_a, int(rng.integers(2, size_a + 1)), rng)
        picked_b = _subset(exclusive_b, int(rng.integers(2, size_b + 1)), rng)
        join_poc = int(rng.integers(0, n_pocs))
        summary = picked_a + list(poc_records[join_poc][0]) + picked_b

        instances.append(
            FusionInstance(
                id=f"syn{index:04d}",
                sentence_a=tuple(sentence_a),
                sentence_b=tuple(sentence_b),
                summary=tuple(summary),
                pocs=pocs,
            )
        )
    return instances
