"""Marker insertion and stripping for correspondence-linked token sequences.

A correspondence group k is surfaced in the token stream by wrapping every
one of its mentions in the same start/end marker pair [S_k] ... [E_k].
Markers are inserted into the raw token sequences before vocabulary encoding;
the index sequence used by the shared-representation head is built over the
*unmarked* layout instead, so the two variants never mix.
"""

from __future__ import annotations

from typing import Iterable, Sequence

from .errors import DataError

# Number of marker pairs the vocabulary reserves. Instances declaring more
# correspondence groups than this keep the K_MAX groups with the most
# mentions at encode time.
K_MAX = 10

Span = tuple[int, int]
IndexedSpan = tuple[int, Span]  # (group index, [start, end) token span)


def start_marker(k: int) -> str:
    return f"[S_{k}]"


def end_marker(k: int) -> str:
    return f"[E_{k}]"


_START = {start_marker(k): k for k in range(1, K_MAX + 1)}
_END = {end_marker(k): k for k in range(1, K_MAX + 1)}


def is_marker(token: str) -> bool:
    return token in _START or token in _END


def _validate_mentions(tokens: Sequence[str], mentions: Iterable[IndexedSpan]) -> list[IndexedSpan]:
    ordered = sorted(mentions, key=lambda m: m[1])
    prev_end = 0
    for k, (start, end) in ordered:
        if not 1 <= k <= K_MAX:
            raise DataError(f"group index {k} outside 1..{K_MAX}")
        if not 0 <= start < end <= len(tokens):
            raise DataError(f"mention span [{start}, {end}) out of bounds for {len(tokens)} tokens")
        if start < prev_end:
            raise DataError(f"overlapping mention spans at token {start}")
        prev_end = end
    return ordered


def insert_poc_markers(tokens: Sequence[str], mentions: Iterable[IndexedSpan]) -> list[str]:
    """Wrap every mention span in its group's marker pair.

    Mentions are (k, [start, end)) with spans indexing `tokens`; all mentions
    of group k get the same [S_k]/[E_k] pair. Output length is
    len(tokens) + 2 * len(mentions).
    """
    ordered = _validate_mentions(tokens, mentions)
    out: list[str] = []
    cursor = 0
    for k, (start, end) in ordered:
        out.extend(tokens[cursor:start])
        out.append(start_marker(k))
        out.extend(tokens[start:end])
        out.append(end_marker(k))
        cursor = end
    out.extend(tokens[cursor:])
    return out


def strip_poc_markers(tokens: Sequence[str]) -> tuple[list[str], list[IndexedSpan]]:
    """Exact inverse of insert_poc_markers.

    Returns the unmarked tokens and the recovered (k, span) mentions with
    spans in unmarked coordinates. Unbalanced or nested markers raise
    DataError.
    """
    out: list[str] = []
    mentions: list[IndexedSpan] = []
    open_group: int | None = None
    open_start = -1
    for tok in tokens:
        if tok in _START:
            if open_group is not None:
                raise DataError(f"nested marker {tok} inside open group {open_group}")
            open_group = _START[tok]
            open_start = len(out)
        elif tok in _END:
            k = _END[tok]
            if open_group is None:
                raise DataError(f"end marker {tok} without a matching start")
            if k != open_group:
                raise DataError(f"end marker {tok} closes group {open_group}")
            if len(out) == open_start:
                raise DataError(f"empty marker pair for group {k}")
            mentions.append((k, (open_start, len(out))))
            open_group = None
        else:
            out.append(tok)
    if open_group is not None:
        raise DataError(f"unbalanced marker: group {open_group} never closed")
    return out, mentions


def build_poc_index_sequence(
    source_len: int,
    mentions: Iterable[IndexedSpan],
    reserved_positions: Iterable[int] = (),
) -> list[int]:
    """z over the source region: z_i = k inside a mention of group k, else 0.

    Spans are position ranges within [0, source_len). Reserved positions
    (sequence-control tokens) must stay 0; a mention claiming one, or two
    groups claiming the same position, is a caller bug.
    """
    z = [0] * source_len
    reserved = set(reserved_positions)
    for k, (start, end) in mentions:
        if not 1 <= k <= K_MAX:
            raise DataError(f"group index {k} outside 1..{K_MAX}")
        if not 0 <= start < end <= source_len:
            raise DataError(f"span [{start}, {end}) out of bounds for source length {source_len}")
        for i in range(start, end):
            if i in reserved:
                raise DataError(f"position {i} is reserved and cannot join group {k}")
            if z[i] not in (0, k):
                raise DataError(f"position {i} claimed by groups {z[i]} and {k}")
            z[i] = k
    return z
