"""Attention masks and multi-head masked attention over a shared sequence.

Two mask families drive the whole model:

* the seq2seq mask lets every position see the full source region, while
  summary positions additionally see only their own prefix: position i may
  attend to j iff j <= max(i, source_len - 1) (0-based). Source tokens are
  bidirectional among themselves; the summary side is causal.
* the correspondence-head mask rewrites the rows of source tokens that carry
  a nonzero group index: such a token attends only to source tokens of the
  same group. Every other row (unaffiliated source tokens and all summary
  tokens) falls back to the seq2seq row, so no row ever loses support. A
  strict mode instead lets unaffiliated source tokens attend to each other,
  for experiments; summary rows always fall back.

Masks are additive {0, -inf} matrices, and every row is guaranteed at least
one unmasked entry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics
from .errors import InvariantError
from .numerics import Tensor

NEG_INF = float("-inf")

ZERO_ROW_MODES = ("seq2seq", "mutual")


@dataclass
class AttentionMask:
    """Additive n-by-n mask over {0, -inf}; every row has at least one 0."""

    n: int
    entries: np.ndarray

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if self.entries.shape != (self.n, self.n):
            raise ValueError(f"mask must be {self.n}x{self.n}, got {self.entries.shape}")
        finite = ~np.isneginf(self.entries)
        if not np.all(self.entries[finite] == 0.0):
            raise ValueError("mask entries must be 0 or -inf")
        if not finite.any(axis=1).all():
            raise InvariantError("empty attention support")

    def allowed(self) -> np.ndarray:
        """Boolean view: True where attention is permitted."""
        return self.entries == 0.0


def build_seq2seq_mask(source_len: int, total_len: int) -> AttentionMask:
    """Shared-sequence mask: j visible from i iff j <= max(i, source_len - 1).

    Source positions (i < source_len) see the whole source bidirectionally;
    summary positions see the source plus themselves and earlier summary
    tokens.
    """
    if not 1 <= source_len <= total_len:
        raise ValueError(f"need 1 <= source_len <= total_len, got {source_len}, {total_len}")
    i = np.arange(total_len)[:, None]
    j = np.arange(total_len)[None, :]
    allowed = j <= np.maximum(i, source_len - 1)
    return AttentionMask(total_len, np.where(allowed, 0.0, NEG_INF))


def build_poc_head_mask(
    base: AttentionMask,
    z,
    source_len: int,
    zero_rows: str = "seq2seq",
) -> AttentionMask:
    """Correspondence-head mask: same-group source tokens attend only to each other.

    Rows of source positions with z[i] != 0 allow exactly the source positions
    j with z[j] == z[i]. All other rows copy the base mask (zero_rows=
    "seq2seq", the default) or, for z[i] == 0 source rows under zero_rows=
    "mutual", allow exactly the unaffiliated source positions.
    """
    if zero_rows not in ZERO_ROW_MODES:
        raise ValueError(f"zero_rows must be one of {ZERO_ROW_MODES}, got {zero_rows!r}")
    z = np.asarray(z, dtype=np.int64)
    n = base.n
    if not 1 <= source_len <= n:
        raise ValueError(f"need 1 <= source_len <= {n}, got {source_len}")
    if z.shape != (source_len,):
        raise ValueError(f"z must have length {source_len}, got shape {z.shape}")
    if (z < 0).any():
        raise ValueError("z values must be non-negative")

    entries = base.entries.copy()
    for i in range(source_len):
        if z[i] == 0 and zero_rows == "seq2seq":
            continue
        row = np.full(n, NEG_INF)
        row[:source_len][z == z[i]] = 0.0
        entries[i] = row
    return AttentionMask(n, entries)


def attention_weights(queries, keys, mask: AttentionMask) -> np.ndarray:
    """Row-stochastic scaled dot-product attention under an additive mask."""
    q = np.asarray(queries, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or q.shape != k.shape:
        raise ValueError(f"queries/keys must share a 2-D shape, got {q.shape} and {k.shape}")
    if q.shape[0] != mask.n:
        raise ValueError(f"mask is {mask.n}x{mask.n} but sequences have {q.shape[0]} rows")
    d_k = q.shape[1]
    logits = (q @ k.T) / np.sqrt(d_k)
    return numerics.softmax_masked(logits, mask.entries)


def multi_head_attention(
    x: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    masks: list[AttentionMask],
) -> tuple[Tensor, list[np.ndarray]]:
    """Multi-head masked attention with one (possibly shared) mask per head.

    x is (n, d_model); each projection is (d_model, d_model). Returns the
    attended output (n, d_model) and the per-head attention matrices.
    """
    n, d_model = x.shape
    n_heads = len(masks)
    if n_heads < 1:
        raise ValueError("need at least one head")
    if d_model % n_heads != 0:
        raise ValueError(f"d_model {d_model} not divisible by {n_heads} heads")
    for mask in masks:
        if mask.n != n:
            raise ValueError(f"mask is {mask.n}x{mask.n} but the sequence has {n} rows")
    d_k = d_model // n_heads

    q = numerics.matmul(x, wq)
    k = numerics.matmul(x, wk)
    v = numerics.matmul(x, wv)
    head_outputs = []
    head_alphas: list[np.ndarray] = []
    inv_sqrt_dk = 1.0 / np.sqrt(d_k)
    for h, mask in enumerate(masks):
        lo, hi = h * d_k, (h + 1) * d_k
        qh = numerics.slice_cols(q, lo, hi)
        kh = numerics.slice_cols(k, lo, hi)
        vh = numerics.slice_cols(v, lo, hi)
        logits = numerics.scale(numerics.matmul_nt(qh, kh), inv_sqrt_dk)
        alpha = numerics.masked_softmax(logits, mask.entries)
        head_alphas.append(alpha.data)
        head_outputs.append(numerics.matmul(alpha, vh))
    merged = numerics.concat_cols(head_outputs)
    return numerics.matmul(merged, wo), head_alphas
