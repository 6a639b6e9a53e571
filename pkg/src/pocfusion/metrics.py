"""Automatic fusion metrics: ROUGE-1/2/L, sentence BLEU, the two-sided
fusion heuristic, and source extractiveness.

All metrics run on the package's lowercase word tokenization with no
stemming. BLEU is sentence-level with add-one smoothing on zero counts and
is averaged per instance across a corpus. Corpus means use math.fsum so the
report is exactly permutation-invariant.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import DataError
from .stopwords import STOPWORDS


def _ngrams(tokens: Sequence[str], n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def rouge_n(hypothesis: Sequence[str], reference: Sequence[str], n: int) -> float:
    """Clipped n-gram overlap F1; 0 when either side has no n-grams."""
    if n < 1:
        raise DataError(f"n must be >= 1, got {n}")
    hyp_counts = Counter(_ngrams(hypothesis, n))
    ref_counts = Counter(_ngrams(reference, n))
    total_hyp = sum(hyp_counts.values())
    total_ref = sum(ref_counts.values())
    if total_hyp == 0 or total_ref == 0:
        return 0.0
    overlap = sum(min(count, ref_counts[gram]) for gram, count in hyp_counts.items())
    if overlap == 0:
        return 0.0
    precision = overlap / total_hyp
    recall = overlap / total_ref
    return 2 * precision * recall / (precision + recall)


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for token in a:
        current = [0]
        for j, other in enumerate(b, start=1):
            if token == other:
                current.append(prev[j - 1] + 1)
            else:
                current.append(max(prev[j], current[j - 1]))
        prev = current
    return prev[-1]


def rouge_l(hypothesis: Sequence[str], reference: Sequence[str]) -> float:
    """Longest-common-subsequence F1; 0 for empty inputs."""
    if not hypothesis or not reference:
        return 0.0
    lcs = _lcs_length(hypothesis, reference)
    if lcs == 0:
        return 0.0
    precision = lcs / len(hypothesis)
    recall = lcs / len(reference)
    return 2 * precision * recall / (precision + recall)


def bleu(hypothesis: Sequence[str], reference: Sequence[str]) -> float:
    """Sentence BLEU, n=1..4, add-one smoothed, brevity-penalized, in [0, 100].

    Modified precision p_n = clipped matches / hypothesis n-gram count; a zero
    match count is smoothed to (m+1)/(t+1), and an order with no hypothesis
    n-grams at all contributes 1 (vacuous). Brevity penalty
    exp(1 - |ref|/|hyp|) applies when the hypothesis is shorter.
    """
    if not hypothesis:
        return 0.0
    log_precision_sum = 0.0
    for n in range(1, 5):
        hyp_counts = Counter(_ngrams(hypothesis, n))
        total = sum(hyp_counts.values())
        if total == 0:
            continue  # log(1): no n-grams of this order to score
        ref_counts = Counter(_ngrams(reference, n))
        matched = sum(min(count, ref_counts[gram]) for gram, count in hyp_counts.items())
        if matched == 0:
            p = 1.0 / (total + 1)
        else:
            p = matched / total
        log_precision_sum += math.log(p)
    geometric_mean = math.exp(log_precision_sum / 4.0)
    if len(hypothesis) < len(reference):
        brevity = math.exp(1.0 - len(reference) / len(hypothesis))
    else:
        brevity = 1.0
    return 100.0 * brevity * geometric_mean


def content_tokens(tokens: Iterable[str], stopwords: frozenset[str] = STOPWORDS) -> set[str]:
    """Distinct non-stopword token types."""
    return {t for t in tokens if t not in stopwords}


def is_fusion(
    output: Sequence[str],
    sentence_a: Sequence[str],
    sentence_b: Sequence[str],
    stopwords: frozenset[str] = STOPWORDS,
) -> bool:
    """True iff the output draws at least two exclusive content types from each side.

    Exclusive means the token type occurs in one source sentence and not the
    other; types are counted, not occurrences.
    """
    out_types = content_tokens(output, stopwords)
    a_types = content_tokens(sentence_a, stopwords)
    b_types = content_tokens(sentence_b, stopwords)
    from_a_only = out_types & (a_types - b_types)
    from_b_only = out_types & (b_types - a_types)
    return len(from_a_only) >= 2 and len(from_b_only) >= 2


def extractiveness(
    output: Sequence[str],
    sentence_a: Sequence[str],
    sentence_b: Sequence[str],
    n: int,
) -> float:
    """Fraction of output n-grams that appear in either source sentence.

    The source collection is the union of each sentence's own n-grams;
    nothing spans the sentence boundary. 0 when the output has no n-grams.
    """
    if n not in (1, 2, 3):
        raise DataError(f"n must be 1, 2, or 3, got {n}")
    out_grams = _ngrams(output, n)
    if not out_grams:
        return 0.0
    source = set(_ngrams(sentence_a, n)) | set(_ngrams(sentence_b, n))
    hits = sum(1 for gram in out_grams if gram in source)
    return hits / len(out_grams)


@dataclass(frozen=True)
class MetricsReport:
    """Corpus-level metric means (per-instance values averaged)."""

    r1: float
    r2: float
    rl: float
    bleu: float
    avg_tokens: float
    fuse_rate: float
    extractiveness: tuple[float, float, float]

    def to_dict(self) -> dict:
        return {
            "r1": self.r1,
            "r2": self.r2,
            "rl": self.rl,
            "bleu": self.bleu,
            "avg_tokens": self.avg_tokens,
            "fuse_rate": self.fuse_rate,
            "extractiveness": list(self.extractiveness),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def _mean(values: list[float]) -> float:
    return math.fsum(values) / len(values)


def evaluate_corpus(
    instances,
    outputs: Sequence[Sequence[str]],
    stopwords: frozenset[str] = STOPWORDS,
) -> MetricsReport:
    """Score one output per instance against its reference fusion.

    References are each instance's summary; sources are its two sentences.
    Means use exact summation, so instance order never changes the report.
    """
    if len(instances) != len(outputs):
        raise DataError(f"{len(instances)} instances but {len(outputs)} outputs")
    if not instances:
        raise DataError("nothing to evaluate")
    r1s, r2s, rls, bleus, lengths, fused = [], [], [], [], [], []
    extract = {1: [], 2: [], 3: []}
    for inst, output in zip(instances, outputs):
        output = list(output)
        reference = list(inst.summary)
        r1s.append(rouge_n(output, reference, 1))
        r2s.append(rouge_n(output, reference, 2))
        rls.append(rouge_l(output, reference))
        bleus.append(bleu(output, reference))
        lengths.append(float(len(output)))
        fused.append(1.0 if is_fusion(output, inst.sentence_a, inst.sentence_b, stopwords) else 0.0)
        for n in (1, 2, 3):
            extract[n].append(extractiveness(output, inst.sentence_a, inst.sentence_b, n))
    return MetricsReport(
        r1=_mean(r1s),
        r2=_mean(r2s),
        rl=_mean(rls),
        bleu=_mean(bleus),
        avg_tokens=_mean(lengths),
        fuse_rate=_mean(fused),
        extractiveness=(_mean(extract[1]), _mean(extract[2]), _mean(extract[3])),
    )


TABLE_COLUMNS = ("R-1", "R-2", "R-L", "BLEU", "#Tkns", "%Fuse")


def _table_row(report: MetricsReport) -> tuple[str, ...]:
    return (
        f"{report.r1 * 100:.2f}",
        f"{report.r2 * 100:.2f}",
        f"{report.rl * 100:.2f}",
        f"{report.bleu:.2f}",
        f"{report.avg_tokens:.2f}",
        f"{report.fuse_rate * 100:.2f}",
    )


def format_report_table(reports: dict[str, MetricsReport]) -> str:
    """Aligned text table, one row per system, fixed column order."""
    name_width = max([len("system")] + [len(name) for name in reports])
    rows = [(name, _table_row(report)) for name, report in reports.items()]
    widths = [
        max([len(TABLE_COLUMNS[i])] + [len(row[1][i]) for row in rows])
        for i in range(len(TABLE_COLUMNS))
    ]
    lines = [
        "system".ljust(name_width)
        + "  "
        + "  ".join(TABLE_COLUMNS[i].rjust(widths[i]) for i in range(len(TABLE_COLUMNS)))
    ]
    for name, cells in rows:
        lines.append(
            name.ljust(name_width)
            + "  "
            + "  ".join(cells[i].rjust(widths[i]) for i in range(len(TABLE_COLUMNS)))
        )
    return "\n".join(lines) + "\n"


def format_extractiveness_table(reports: dict[str, MetricsReport]) -> str:
    """Aligned text table of 1/2/3-gram extractiveness percentages."""
    name_width = max([len("system")] + [len(name) for name in reports])
    header = ("1-gram", "2-gram", "3-gram")
    lines = ["system".ljust(name_width) + "  " + "  ".join(h.rjust(7) for h in header)]
    for name, report in reports.items():
        cells = [f"{value * 100:.2f}" for value in report.extractiveness]
        lines.append(name.ljust(name_width) + "  " + "  ".join(c.rjust(7) for c in cells))
    return "\n".join(lines) + "\n"
