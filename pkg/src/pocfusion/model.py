"""Decoder-only transformer over the shared source+summary sequence.

One id sequence carries both sentences and the summary; attention masks — not
an encoder/decoder split — separate reading from writing. Each block is
post-norm: masked multi-head attention, residual + layer norm, a GeLU
feed-forward, residual + layer norm. The output head re-uses the token
embedding table as its projection (tied storage, one Tensor object).

Training is denoising: a sampled 70% of each instance's summary tokens are
replaced by [MASK] and predicted from their final hidden states. The [EOS]
slot is masked and predicted unconditionally on top of that — generation can
only terminate if the model has been taught to emit [EOS] from a masked final
slot, and the sampled rate applies to true summary tokens only.

Everything is deterministic given the config seed: parameter init, batch
shuffling, and mask sampling draw from three independent child streams of one
seed sequence.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import numerics
from .attention import ZERO_ROW_MODES, AttentionMask, build_poc_head_mask, build_seq2seq_mask, multi_head_attention
from .corpus import (
    MASK_ID,
    VARIANTS,
    EncodedInstance,
    FusionInstance,
    Vocabulary,
    encode_instance,
)
from .errors import DataError
from .numerics import GradientTape, OptimizerState, Tensor, adam_step

INIT_STD = 0.02

LAYER_FIELDS = (
    "attn_query",
    "attn_key",
    "attn_value",
    "attn_output",
    "ff_in_weight",
    "ff_in_bias",
    "ff_out_weight",
    "ff_out_bias",
    "ln_attn_scale",
    "ln_attn_offset",
    "ln_ff_scale",
    "ln_ff_offset",
)


@dataclass
class ModelConfig:
    """Architecture and training hyperparameters.

    poc_head is a (layer, head) pair, 0-based; it defaults to head 0 of the
    middle layer (rounding up), and only matters for variant="sharerepr".
    poc_zero_rows picks what the correspondence head does with unaffiliated
    source tokens: "seq2seq" (default) falls back to the base mask, "mutual"
    restricts them to each other.
    """

    layers: int = 4
    heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    vocab_size: int = 0  # filled in from the vocabulary when training starts
    max_len: int = 128
    variant: str = "baseline"
    poc_head: tuple[int, int] | None = None
    poc_zero_rows: str = "seq2seq"
    mask_rate: float = 0.7
    seed: int = 0
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    batch_size: int = 8
    epochs: int = 30

    def __post_init__(self):
        if self.poc_head is None:
            self.poc_head = (math.ceil(self.layers / 2) - 1, 0)
        else:
            self.poc_head = (int(self.poc_head[0]), int(self.poc_head[1]))
        self.validate()

    def validate(self) -> None:
        if self.layers < 1:
            raise DataError(f"layers must be >= 1, got {self.layers}")
        if self.heads < 1:
            raise DataError(f"heads must be >= 1, got {self.heads}")
        if self.d_model % self.heads != 0:
            raise DataError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.d_ff < 1:
            raise DataError(f"d_ff must be >= 1, got {self.d_ff}")
        if self.vocab_size < 0:
            raise DataError(f"vocab_size must be >= 0, got {self.vocab_size}")
        if self.max_len < 8:
            raise DataError(f"max_len must be >= 8, got {self.max_len}")
        if self.variant not in VARIANTS:
            raise DataError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        layer, head = self.poc_head
        if not (0 <= layer < self.layers and 0 <= head < self.heads):
            raise DataError(f"poc_head {self.poc_head} out of range for {self.layers}x{self.heads}")
        if self.poc_zero_rows not in ZERO_ROW_MODES:
            raise DataError(f"poc_zero_rows must be one of {ZERO_ROW_MODES}")
        if not 0.0 < self.mask_rate <= 1.0:
            raise DataError(f"mask_rate must be in (0, 1], got {self.mask_rate}")
        if self.peak_lr <= 0:
            raise DataError(f"peak_lr must be positive, got {self.peak_lr}")
        if self.warmup_steps < 0:
            raise DataError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        if self.batch_size < 1:
            raise DataError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise DataError(f"epochs must be >= 0, got {self.epochs}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["poc_head"] = list(self.poc_head)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if kwargs.get("poc_head") is not None:
            kwargs["poc_head"] = tuple(kwargs["poc_head"])
        return cls(**kwargs)


@dataclass
class LayerParameters:
    attn_query: Tensor
    attn_key: Tensor
    attn_value: Tensor
    attn_output: Tensor
    ff_in_weight: Tensor
    ff_in_bias: Tensor
    ff_out_weight: Tensor
    ff_out_bias: Tensor
    ln_attn_scale: Tensor
    ln_attn_offset: Tensor
    ln_ff_scale: Tensor
    ln_ff_offset: Tensor


@dataclass
class ModelParameters:
    """All trainable tensors.

    token_embedding doubles as the output projection: output_projection is
    the very same Tensor object, so a gradient step through either view
    moves both.
    """

    token_embedding: Tensor  # (vocab_size, d_model)
    position_embedding: Tensor  # (max_len, d_model)
    segment_embedding: Tensor  # (2, d_model)
    output_transform: Tensor  # (d_model, d_model), applied before the tied projection
    layers: list[LayerParameters]

    @property
    def output_projection(self) -> Tensor:
        return self.token_embedding

    def named(self) -> dict[str, Tensor]:
        """Stable name -> Tensor map; the tied projection appears once."""
        out = {
            "token_embedding": self.token_embedding,
            "position_embedding": self.position_embedding,
            "segment_embedding": self.segment_embedding,
            "output_transform": self.output_transform,
        }
        for i, layer in enumerate(self.layers):
            for field_name in LAYER_FIELDS:
                out[f"layer{i}.{field_name}"] = getattr(layer, field_name)
        return out


def _seed_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Three independent child streams: parameter init, shuffling, masking."""
    init_ss, shuffle_ss, mask_ss = np.random.SeedSequence(seed).spawn(3)
    return (
        np.random.default_rng(init_ss),
        np.random.default_rng(shuffle_ss),
        np.random.default_rng(mask_ss),
    )


def init_parameters(config: ModelConfig, rng: np.random.Generator | None = None) -> ModelParameters:
    """Seeded init: N(0, 0.02^2) weights, unit layer-norm scales, zero offsets/biases."""
    if config.vocab_size < 1:
        raise DataError("config.vocab_size must be set before initializing parameters")
    if rng is None:
        rng = _seed_streams(config.seed)[0]
    d, f = config.d_model, config.d_ff

    def normal(*shape):
        return Tensor(rng.normal(0.0, INIT_STD, size=shape))

    token_embedding = normal(config.vocab_size, d)
    position_embedding = normal(config.max_len, d)
    segment_embedding = normal(2, d)
    output_transform = normal(d, d)
    layers = []
    for _ in range(config.layers):
        layers.append(
            LayerParameters(
                attn_query=normal(d, d),
                attn_key=normal(d, d),
                attn_value=normal(d, d),
                attn_output=normal(d, d),
                ff_in_weight=normal(d, f),
                ff_in_bias=Tensor(np.zeros(f)),
                ff_out_weight=normal(f, d),
                ff_out_bias=Tensor(np.zeros(d)),
                ln_attn_scale=Tensor(np.ones(d)),
                ln_attn_offset=Tensor(np.zeros(d)),
                ln_ff_scale=Tensor(np.ones(d)),
                ln_ff_offset=Tensor(np.zeros(d)),
            )
        )
    return ModelParameters(token_embedding, position_embedding, segment_embedding, output_transform, layers)


def build_masks(config: ModelConfig, encoded: EncodedInstance) -> tuple[AttentionMask, AttentionMask | None]:
    """The base shared-sequence mask and, for sharerepr, the correspondence mask."""
    base = build_seq2seq_mask(encoded.source_len, len(encoded))
    poc = None
    if config.variant == "sharerepr":
        poc = build_poc_head_mask(base, encoded.z, encoded.source_len, config.poc_zero_rows)
    return base, poc


def forward(
    encoded: EncodedInstance,
    params: ModelParameters,
    config: ModelConfig,
    collect_attention: bool = False,
) -> tuple[Tensor, list[list[np.ndarray]] | None]:
    """Final hidden states (n, d_model), optionally with per-layer/head attention.

    Every head uses the shared-sequence mask; under variant="sharerepr" the
    one configured (layer, head) uses the correspondence mask instead.
    """
    n = len(encoded)
    if n > config.max_len:
        raise DataError(f"input length {n} exceeds max_len {config.max_len}")
    if encoded.ids.max(initial=0) >= params.token_embedding.shape[0]:
        raise DataError("token id out of vocabulary range")
    base, poc = build_masks(config, encoded)

    x = numerics.add(
        numerics.add(
            numerics.gather_rows(params.token_embedding, encoded.ids),
            numerics.gather_rows(params.position_embedding, np.arange(n)),
        ),
        numerics.gather_rows(params.segment_embedding, encoded.segments),
    )
    collected: list[list[np.ndarray]] | None = [] if collect_attention else None
    for layer_index, layer in enumerate(params.layers):
        masks = [
            poc if (poc is not None and (layer_index, h) == config.poc_head) else base
            for h in range(config.heads)
        ]
        attn_out, alphas = multi_head_attention(
            x, layer.attn_query, layer.attn_key, layer.attn_value, layer.attn_output, masks
        )
        if collected is not None:
            collected.append(alphas)
        x = numerics.layer_norm(numerics.add(x, attn_out), layer.ln_attn_scale, layer.ln_attn_offset)
        inner = numerics.gelu(numerics.add_bias(numerics.matmul(x, layer.ff_in_weight), layer.ff_in_bias))
        ff_out = numerics.add_bias(numerics.matmul(inner, layer.ff_out_weight), layer.ff_out_bias)
        x = numerics.layer_norm(numerics.add(x, ff_out), layer.ln_ff_scale, layer.ln_ff_offset)
    return x, collected


def output_logits(hidden: Tensor, params: ModelParameters) -> Tensor:
    """Tape-traced vocabulary logits for a block of hidden rows (m, d_model)."""
    transformed = numerics.gelu(numerics.matmul(hidden, params.output_transform))
    return numerics.matmul_nt(transformed, params.output_projection)


def output_distribution(hidden_state, params: ModelParameters) -> np.ndarray:
    """Probability vector over the vocabulary for one hidden state (pure numpy)."""
    h = np.asarray(hidden_state, dtype=np.float64)
    if h.ndim != 1 or h.shape[0] != params.output_transform.shape[0]:
        raise DataError(f"hidden state must be a d_model vector, got shape {h.shape}")
    logits = params.token_embedding.data @ numerics.gelu(h @ params.output_transform.data)
    logits = logits - logits.max()
    exp = np.exp(logits)
    return exp / exp.sum()


@dataclass
class MaskedInstance:
    """One instance with its denoising corruption fixed."""

    noised: EncodedInstance  # ids with [MASK] written at the prediction positions
    positions: np.ndarray  # prediction positions (sampled summary slots + the [EOS] slot)
    targets: np.ndarray  # original ids at those positions


def sample_mask_positions(encoded: EncodedInstance, mask_rate: float, rng: np.random.Generator) -> np.ndarray:
    """Pick round(mask_rate * summary_len) summary positions, at least one.

    The [EOS] slot is appended unconditionally: termination has to be
    supervised at every step or decoding never learns to stop. The sampled
    rate applies to true summary tokens only.
    """
    summary = np.fromiter(encoded.summary_positions, dtype=np.int64)
    if summary.size == 0:
        raise DataError(f"instance {encoded.instance_id!r} has no summary tokens")
    count = max(1, round(mask_rate * summary.size))
    count = min(count, summary.size)
    chosen = np.sort(rng.choice(summary, size=count, replace=False))
    return np.append(chosen, encoded.eos_position)


def apply_denoise_masking(encoded: EncodedInstance, mask_rate: float, rng: np.random.Generator) -> MaskedInstance:
    """Corrupt one instance: write [MASK] over the sampled prediction slots."""
    positions = sample_mask_positions(encoded, mask_rate, rng)
    targets = encoded.ids[positions].copy()
    noised_ids = encoded.ids.copy()
    noised_ids[positions] = MASK_ID
    return MaskedInstance(replace(encoded, ids=noised_ids), positions, targets)


def denoise_loss(masked: Sequence[MaskedInstance], params: ModelParameters, config: ModelConfig) -> Tensor:
    """Mean cross-entropy over every prediction slot in the batch (tape-traced)."""
    if not masked:
        raise DataError("empty batch")
    total = None
    n_predictions = 0
    for item in masked:
        hidden, _ = forward(item.noised, params, config)
        rows = numerics.gather_rows(hidden, item.positions)
        logits = output_logits(rows, params)
        ce = numerics.cross_entropy_sum(logits, item.targets)
        total = ce if total is None else numerics.add(total, ce)
        n_predictions += len(item.positions)
    return numerics.scale(total, 1.0 / n_predictions)


def denoise_batch(
    batch: Sequence[EncodedInstance],
    params: ModelParameters,
    config: ModelConfig,
    rng: np.random.Generator,
) -> tuple[float, dict[str, np.ndarray]]:
    """Sample fresh masks for a batch, return (mean loss, gradients by name)."""
    masked = [apply_denoise_masking(enc, config.mask_rate, rng) for enc in batch]
    named = params.named()
    with GradientTape() as tape:
        loss = denoise_loss(masked, params, config)
        grads = tape.gradients(loss, named)
    return float(loss.data), grads


@dataclass
class TrainResult:
    params: ModelParameters
    config: ModelConfig
    vocab: Vocabulary
    loss_history: list[float]


def train(
    corpus: Sequence[FusionInstance],
    config: ModelConfig,
    vocab: Vocabulary | None = None,
    max_steps: int | None = None,
    target_loss: float | None = None,
) -> TrainResult:
    """Denoising training: epochs x shuffled batches of denoise_batch + adam_step.

    Deterministic given config.seed (separate init/shuffle/mask streams).
    Stops early once max_steps batches have run or a batch loss falls below
    target_loss, when either is given.
    """
    if not corpus:
        raise DataError("empty corpus")
    if vocab is None:
        vocab = Vocabulary.build(corpus)
    config = dataclasses.replace(config, vocab_size=len(vocab))
    encoded = [encode_instance(inst, vocab, config.variant, config.max_len) for inst in corpus]
    init_rng, shuffle_rng, mask_rng = _seed_streams(config.seed)
    params = init_parameters(config, init_rng)
    optimizer = OptimizerState(peak_lr=config.peak_lr, warmup_steps=config.warmup_steps)
    named = params.named()
    history: list[float] = []
    stop = False
    for _ in range(config.epochs):
        order = shuffle_rng.permutation(len(encoded))
        for start in range(0, len(encoded), config.batch_size):
            batch = [encoded[i] for i in order[start : start + config.batch_size]]
            loss, grads = denoise_batch(batch, params, config, mask_rng)
            adam_step(named, grads, optimizer)
            history.append(loss)
            if max_steps is not None and len(history) >= max_steps:
                stop = True
            if target_loss is not None and loss < target_loss:
                stop = True
            if stop:
                break
        if stop:
            break
    return TrainResult(params, config, vocab, history)


# ---------------------------------------------------------------------------
# Checkpoint format: magic, u32 version, u32-length JSON header (config plus
# vocabulary id order), u32 tensor count, then per tensor a u32-length UTF-8
# name, u32 rank, u32 dims, and raw little-endian float64 data. The tied
# output projection is not stored twice; loading re-ties it by construction.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"POCFUSE\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: ModelParameters, config: ModelConfig, vocab: Vocabulary) -> None:
    header = json.dumps(
        {"config": config.to_dict(), "vocab": vocab.id_order()},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    named = params.named()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(named)))
        for name, tensor in named.items():
            encoded_name = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded_name)))
            fh.write(encoded_name)
            fh.write(struct.pack("<I", tensor.data.ndim))
            fh.write(struct.pack(f"<{tensor.data.ndim}I", *tensor.data.shape))
            fh.write(tensor.data.astype("<f8").tobytes(order="C"))


def _read_exact(fh, size: int) -> bytes:
    blob = fh.read(size)
    if len(blob) != size:
        raise DataError("checkpoint file truncated")
    return blob


def load_checkpoint(path) -> tuple[ModelParameters, ModelConfig, Vocabulary]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DataError("not a pocfusion checkpoint (bad magic bytes)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"checkpoint version mismatch: got {version}, support {CHECKPOINT_VERSION}")
        (header_len,) = struct.unpack("<I", _read_exact(fh, 4))
        header = json.loads(_read_exact(fh, header_len).decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        vocab = Vocabulary.from_id_order(header["vocab"])
        params = init_parameters(config)
        named = params.named()
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        if count != len(named):
            raise DataError(f"checkpoint stores {count} tensors, model needs {len(named)}")
        seen = set()
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode("utf-8")
            if name not in named:
                raise DataError(f"checkpoint tensor {name!r} not part of this model")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            expected = named[name].data.shape
            if tuple(shape) != expected:
                raise DataError(f"tensor {name!r} has shape {shape}, expected {expected}")
            size = int(np.prod(shape, dtype=np.int64)) * 8
            data = np.frombuffer(_read_exact(fh, size), dtype="<f8").reshape(shape)
            named[name].data[...] = data
            seen.add(name)
        if seen != set(named):
            raise DataError("checkpoint is missing tensors")
    return params, config, vocab
