"""Corpus model: tokenizer, fusion instances, vocabulary, and sequence encoding.

The on-disk corpus is JSONL, one instance per line:

    {"id": "...", "sent_a": "...", "sent_b": "...", "summary": "...",
     "pocs": [{"poc_id": 1,
               "mentions": [{"sent": "a", "start": 0, "end": 2}, ...]}, ...]}

Mention spans index the token sequence produced by tokenize() on the named
sentence. Correspondence groups must tie the two source sentences: each
declares at least one mention in sentence A and one in sentence B. Summary
mentions are accepted and stored but play no role in encoding.

Encoding lays an instance out as a single shared sequence

    [BOS] A' [SEP] B' [SEP] summary [EOS]

where A'/B' carry linking markers when variant="linking". The source region
ends at the second [SEP] inclusive. When the total exceeds max_len, tokens
are dropped from the end of each region proportionally; mentions that no
longer fit entirely inside the kept prefix are dropped whole, so markers can
never end up unbalanced.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import markup
from .errors import DataError, ParseError

# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase word-level tokens with punctuation split off separately."""
    return _TOKEN_RE.findall(text.lower())


# ---------------------------------------------------------------------------
# instance types
# ---------------------------------------------------------------------------

SENT_A = "a"
SENT_B = "b"
SENT_SUMMARY = "summary"
_SENT_VALUES = (SENT_A, SENT_B, SENT_SUMMARY)


@dataclass(frozen=True)
class Mention:
    """One surface occurrence of a correspondence group: sentence + token span."""

    sent: str
    start: int
    end: int

    @property
    def span(self) -> tuple[int, int]:
        return (self.start, self.end)


@dataclass(frozen=True)
class Poc:
    """A correspondence group tying content across the two source sentences."""

    poc_id: int
    mentions: tuple[Mention, ...]

    def mentions_in(self, sent: str) -> list[Mention]:
        return [m for m in self.mentions if m.sent == sent]


@dataclass(frozen=True)
class FusionInstance:
    id: str
    sentence_a: tuple[str, ...]
    sentence_b: tuple[str, ...]
    summary: tuple[str, ...]
    pocs: tuple[Poc, ...] = ()

    def sentence(self, which: str) -> tuple[str, ...]:
        if which == SENT_A:
            return self.sentence_a
        if which == SENT_B:
            return self.sentence_b
        return self.summary


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def _require(record: dict, key: str, kind, line_no: int):
    if key not in record:
        raise ParseError(line_no, f"missing field {key!r}")
    value = record[key]
    if not isinstance(value, kind):
        raise ParseError(line_no, f"field {key!r} has wrong type {type(value).__name__}")
    return value


def _validate_instance(record: dict, line_no: int) -> FusionInstance:
    inst_id = _require(record, "id", str, line_no)
    sent_a = tuple(tokenize(_require(record, "sent_a", str, line_no)))
    sent_b = tuple(tokenize(_require(record, "sent_b", str, line_no)))
    summary = tuple(tokenize(_require(record, "summary", str, line_no)))
    lengths = {SENT_A: len(sent_a), SENT_B: len(sent_b), SENT_SUMMARY: len(summary)}

    raw_pocs = record.get("pocs", [])
    if not isinstance(raw_pocs, list):
        raise ParseError(line_no, "field 'pocs' has wrong type")
    pocs: list[Poc] = []
    seen_ids: set[int] = set()
    for raw in raw_pocs:
        if not isinstance(raw, dict):
            raise ParseError(line_no, "poc entry must be an object")
        pid = _require(raw, "poc_id", int, line_no)
        if isinstance(pid, bool) or pid < 1:
            raise ParseError(line_no, f"poc_id must be a positive integer, got {pid!r}")
        if pid in seen_ids:
            raise ParseError(line_no, f"duplicate poc_id {pid}")
        seen_ids.add(pid)
        raw_mentions = _require(raw, "mentions", list, line_no)
        mentions: list[Mention] = []
        for raw_m in raw_mentions:
            if not isinstance(raw_m, dict):
                raise ParseError(line_no, "mention must be an object")
            sent = _require(raw_m, "sent", str, line_no)
            if sent not in _SENT_VALUES:
                raise ParseError(line_no, f"mention sent must be one of {_SENT_VALUES}, got {sent!r}")
            start = _require(raw_m, "start", int, line_no)
            end = _require(raw_m, "end", int, line_no)
            if not 0 <= start < end <= lengths[sent]:
                raise ParseError(
                    line_no,
                    f"span [{start}, {end}) out of bounds for sentence {sent!r} "
                    f"of length {lengths[sent]}",
                )
            mentions.append(Mention(sent=sent, start=start, end=end))
        if not any(m.sent == SENT_A for m in mentions) or not any(m.sent == SENT_B for m in mentions):
            raise ParseError(
                line_no,
                f"poc {pid} must tie sentence A and sentence B "
                "(needs at least one mention in each)",
            )
        pocs.append(Poc(poc_id=pid, mentions=tuple(mentions)))

    # mention spans within one sentence must not overlap, across all groups
    for sent in _SENT_VALUES:
        spans = sorted(
            (m.start, m.end, p.poc_id) for p in pocs for m in p.mentions if m.sent == sent
        )
        for (s1, e1, _), (s2, _e2, _) in zip(spans, spans[1:]):
            if s2 < e1:
                raise ParseError(
                    line_no, f"overlapping mentions in sentence {sent!r} at token {s2}"
                )

    return FusionInstance(
        id=inst_id, sentence_a=sent_a, sentence_b=sent_b, summary=summary, pocs=tuple(pocs)
    )


def parse_corpus_lines(lines: Iterable[str]) -> list[FusionInstance]:
    instances: list[FusionInstance] = []
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(line_no, f"malformed record: {exc.msg}") from exc
        if not isinstance(record, dict):
            raise ParseError(line_no, "malformed record: not an object")
        instances.append(_validate_instance(record, line_no))
    return instances


def parse_corpus(path) -> list[FusionInstance]:
    """Read a JSONL corpus file; errors carry the offending line number."""
    with open(path, "r", encoding="utf-8") as fh:
        return parse_corpus_lines(fh)


def instance_to_record(inst: FusionInstance) -> dict:
    """Inverse of parsing for corpora whose tokens survive tokenize() verbatim."""
    return {
        "id": inst.id,
        "sent_a": " ".join(inst.sentence_a),
        "sent_b": " ".join(inst.sentence_b),
        "summary": " ".join(inst.summary),
        "pocs": [
            {
                "poc_id": p.poc_id,
                "mentions": [{"sent": m.sent, "start": m.start, "end": m.end} for m in p.mentions],
            }
            for p in inst.pocs
        ],
    }


def write_corpus(path, instances: Iterable[FusionInstance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(instance_to_record(inst), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

PAD, UNK, BOS, SEP, EOS, MASK = "[PAD]", "[UNK]", "[BOS]", "[SEP]", "[EOS]", "[MASK]"
_SPECIALS = (PAD, UNK, BOS, SEP, EOS, MASK)


def _reserved_tokens() -> list[str]:
    toks = list(_SPECIALS)
    for k in range(1, markup.K_MAX + 1):
        toks.append(markup.start_marker(k))
        toks.append(markup.end_marker(k))
    return toks


RESERVED_TOKENS = tuple(_reserved_tokens())

PAD_ID = RESERVED_TOKENS.index(PAD)
UNK_ID = RESERVED_TOKENS.index(UNK)
BOS_ID = RESERVED_TOKENS.index(BOS)
SEP_ID = RESERVED_TOKENS.index(SEP)
EOS_ID = RESERVED_TOKENS.index(EOS)
MASK_ID = RESERVED_TOKENS.index(MASK)


class Vocabulary:
    """Bijection between token strings and dense ids, reserved block first."""

    def __init__(self, content_tokens: Sequence[str]):
        self._id_to_token: list[str] = list(RESERVED_TOKENS)
        seen = set(self._id_to_token)
        for tok in content_tokens:
            if tok in seen:
                raise DataError(f"duplicate or reserved token in vocabulary: {tok!r}")
            seen.add(tok)
            self._id_to_token.append(tok)
        self._token_to_id = {tok: i for i, tok in enumerate(self._id_to_token)}

    @classmethod
    def build(cls, instances: Sequence[FusionInstance], min_count: int = 1) -> "Vocabulary":
        """Frequency-filtered vocabulary over all sentence and summary tokens."""
        if not instances:
            raise DataError("cannot build a vocabulary from an empty corpus")
        counts: dict[str, int] = {}
        for inst in instances:
            for tok in (*inst.sentence_a, *inst.sentence_b, *inst.summary):
                counts[tok] = counts.get(tok, 0) + 1
        content = sorted(t for t, c in counts.items() if c >= min_count)
        return cls(content)

    @classmethod
    def from_id_order(cls, tokens: Sequence[str]) -> "Vocabulary":
        """Rebuild from a full id-ordered token list (checkpoint loading)."""
        if tuple(tokens[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise DataError("vocabulary is missing the reserved token block")
        return cls(list(tokens[len(RESERVED_TOKENS) :]))

    def __len__(self) -> int:
        return len(self._id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def token_to_id(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def id_to_token(self, idx: int) -> str:
        return self._id_to_token[idx]

    def encode_tokens(self, tokens: Iterable[str]) -> list[int]:
        return [self.token_to_id(t) for t in tokens]

    def decode_ids(self, ids: Iterable[int]) -> list[str]:
        return [self._id_to_token[int(i)] for i in ids]

    def id_order(self) -> list[str]:
        return list(self._id_to_token)

    def marker_ids(self) -> tuple[int, int]:
        """Half-open id range covering every marker token."""
        return (len(_SPECIALS), len(RESERVED_TOKENS))

    def reserved_ids(self) -> range:
        return range(len(RESERVED_TOKENS))

    def generation_banned_ids(self) -> list[int]:
        """Ids a decoder must never emit: every reserved id except [EOS]."""
        return [i for i in self.reserved_ids() if i != EOS_ID]


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------

VARIANTS = ("baseline", "linking", "sharerepr")


@dataclass
class EncodedInstance:
    """A fusion instance laid out as one model-ready id sequence."""

    ids: np.ndarray  # int64, length n <= max_len
    segments: np.ndarray  # int64 in {0, 1}; 0 = source region, 1 = summary region
    source_len: int  # source region ends at the second [SEP], inclusive
    z: np.ndarray  # int64, length source_len; 0 = no correspondence group
    summary_start: int  # first summary token position (== source_len)
    summary_end: int  # one past the last summary token; [EOS] sits here
    instance_id: str = ""

    @property
    def eos_position(self) -> int:
        return self.summary_end

    @property
    def summary_positions(self) -> range:
        return range(self.summary_start, self.summary_end)

    def __len__(self) -> int:
        return len(self.ids)


def _select_pocs(pocs: Sequence[Poc]) -> list[tuple[int, Poc]]:
    """Pick at most K_MAX groups and give each a marker index.

    Groups keep their declared poc_id as marker index whenever it is within
    1..K_MAX; when an instance declares more groups than marker pairs, the
    K_MAX with the most mentions survive (ties broken toward lower poc_id)
    and any survivor with an out-of-range id gets the smallest free index.
    """
    ranked = sorted(pocs, key=lambda p: (-len(p.mentions), p.poc_id))
    kept = sorted(ranked[: markup.K_MAX], key=lambda p: p.poc_id)
    used = {p.poc_id for p in kept if p.poc_id <= markup.K_MAX}
    free = iter(i for i in range(1, markup.K_MAX + 1) if i not in used)
    out: list[tuple[int, Poc]] = []
    for p in kept:
        idx = p.poc_id if p.poc_id <= markup.K_MAX else next(free)
        out.append((idx, p))
    return out


def _fit_regions(lengths: Sequence[int], budget: int, overhead_fn) -> list[int]:
    """Proportionally shrink region lengths until body + overhead <= budget.

    Non-empty regions never shrink below one token. overhead_fn maps kept
    lengths to extra token count (marker pairs that still fit).
    """
    kept = list(lengths)
    if budget < sum(1 for L in kept if L > 0):
        raise DataError("max_len too small to hold the instance layout")
    while True:
        body = sum(kept)
        total = body + overhead_fn(kept)
        if total <= budget:
            return kept
        target = max(budget - overhead_fn(kept), 0)
        new = []
        for L in kept:
            nl = int(L * target / body) if body else 0
            if L > 0:
                nl = max(nl, 1)
            new.append(min(nl, L))
        if new == kept:
            # overhead still pushes us over; force progress on the longest region
            i = max(range(len(kept)), key=lambda j: kept[j])
            if kept[i] <= 1:
                raise DataError("max_len too small to hold the instance layout")
            new[i] = kept[i] - 1
        kept = new


def _mentions_within(pocs: list[tuple[int, Poc]], sent: str, kept_len: int) -> list[markup.IndexedSpan]:
    """(index, span) mentions of `sent` that fit entirely in the kept prefix."""
    out: list[markup.IndexedSpan] = []
    for idx, poc in pocs:
        for m in poc.mentions_in(sent):
            if m.end <= kept_len:
                out.append((idx, m.span))
    return out


def _marker_overhead(pocs: list[tuple[int, Poc]], variant: str):
    if variant != "linking":
        return lambda kept: 0

    def overhead(kept: Sequence[int]) -> int:
        n = len(_mentions_within(pocs, SENT_A, kept[0]))
        n += len(_mentions_within(pocs, SENT_B, kept[1]))
        return 2 * n

    return overhead


def _check_vocab_reserved(vocab: Vocabulary) -> None:
    for tok in RESERVED_TOKENS:
        if tok not in vocab:
            raise DataError(f"vocabulary missing reserved token {tok!r}")


def _build_source(
    sent_a: Sequence[str],
    sent_b: Sequence[str],
    pocs: Sequence[Poc],
    vocab: Vocabulary,
    variant: str,
    kept_a: int,
    kept_b: int,
) -> tuple[list[int], list[int], str]:
    """Source-region ids and z for the kept sentence prefixes."""
    selected = _select_pocs(pocs)
    a_tokens = list(sent_a[:kept_a])
    b_tokens = list(sent_b[:kept_b])
    mentions_a = _mentions_within(selected, SENT_A, kept_a)
    mentions_b = _mentions_within(selected, SENT_B, kept_b)

    if variant == "linking":
        a_tokens = markup.insert_poc_markers(a_tokens, mentions_a)
        b_tokens = markup.insert_poc_markers(b_tokens, mentions_b)

    source_tokens = [BOS, *a_tokens, SEP, *b_tokens, SEP]
    source_len = len(source_tokens)

    if variant == "sharerepr":
        a_off = 1
        b_off = 1 + len(a_tokens) + 1
        mapped = [(k, (a_off + s, a_off + e)) for k, (s, e) in mentions_a]
        mapped += [(k, (b_off + s, b_off + e)) for k, (s, e) in mentions_b]
        reserved = (0, 1 + len(a_tokens), source_len - 1)
        z = markup.build_poc_index_sequence(source_len, mapped, reserved)
    else:
        z = [0] * source_len

    return vocab.encode_tokens(source_tokens), z, source_tokens


def encode_instance(
    inst: FusionInstance,
    vocab: Vocabulary,
    variant: str = "baseline",
    max_len: int = 128,
) -> EncodedInstance:
    """Lay an instance out as [BOS] A' [SEP] B' [SEP] summary [EOS]."""
    if variant not in VARIANTS:
        raise DataError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if not inst.summary:
        raise DataError(f"instance {inst.id!r} has an empty summary")
    _check_vocab_reserved(vocab)

    selected = _select_pocs(inst.pocs)
    budget = max_len - 4  # [BOS], two [SEP], [EOS]
    kept_a, kept_b, kept_s = _fit_regions(
        [len(inst.sentence_a), len(inst.sentence_b), len(inst.summary)],
        budget,
        _marker_overhead(selected, variant),
    )

    source_ids, z, _ = _build_source(
        inst.sentence_a, inst.sentence_b, inst.pocs, vocab, variant, kept_a, kept_b
    )
    source_len = len(source_ids)
    summary_ids = vocab.encode_tokens(inst.summary[:kept_s])

    ids = np.array([*source_ids, *summary_ids, vocab.token_to_id(EOS)], dtype=np.int64)
    segments = np.zeros(len(ids), dtype=np.int64)
    segments[source_len:] = 1
    return EncodedInstance(
        ids=ids,
        segments=segments,
        source_len=source_len,
        z=np.array(z, dtype=np.int64),
        summary_start=source_len,
        summary_end=source_len + len(summary_ids),
        instance_id=inst.id,
    )


def encode_source_for_generation(
    sent_a: Sequence[str],
    sent_b: Sequence[str],
    pocs: Sequence[Poc],
    vocab: Vocabulary,
    variant: str,
    max_len: int = 128,
    max_out_len: int = 32,
) -> EncodedInstance:
    """Encode only the source region, leaving room to grow a summary."""
    if variant not in VARIANTS:
        raise DataError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    _check_vocab_reserved(vocab)
    selected = _select_pocs(pocs)
    budget = max_len - 3 - (max_out_len + 1)  # control tokens + generation room
    kept_a, kept_b = _fit_regions(
        [len(sent_a), len(sent_b)], budget, _marker_overhead(selected, variant)
    )
    source_ids, z, _ = _build_source(sent_a, sent_b, pocs, vocab, variant, kept_a, kept_b)
    source_len = len(source_ids)
    return EncodedInstance(
        ids=np.array(source_ids, dtype=np.int64),
        segments=np.zeros(source_len, dtype=np.int64),
        source_len=source_len,
        z=np.array(z, dtype=np.int64),
        summary_start=source_len,
        summary_end=source_len,
    )
