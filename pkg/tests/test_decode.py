"""Greedy and beam decoding, the concatenation baseline, and their oracles.

The beam-vs-enumeration case scores every possible output sequence by hand
with the same length-normalized rule the decoder declares (summed log-prob
over step count, a terminating end-of-sequence choice counting as a step)
and demands beam search find the global argmax.
"""

import itertools

import numpy as np
import pytest

from pocfusion.corpus import (
    EOS_ID,
    SENT_A,
    SENT_B,
    FusionInstance,
    Mention,
    Poc,
    Vocabulary,
    tokenize,
)
from pocfusion.decode import (
    beam_decode,
    beam_fuse,
    concat_baseline,
    greedy_decode,
    greedy_fuse,
)
from pocfusion.errors import DataError
from pocfusion.model import ModelConfig, init_parameters, train


def fixed_step(logp_row):
    row = np.asarray(logp_row, dtype=np.float64)

    def step(_prefix):
        return row

    return step


def seeded_random_step(seed, vocab_size):
    """Deterministic prefix-keyed random log-probabilities."""

    def step(prefix):
        rng = np.random.default_rng(np.random.SeedSequence([seed, len(prefix), *prefix]))
        logits = rng.normal(size=vocab_size)
        logits -= np.log(np.exp(logits).sum())
        return logits

    return step


# A toy id space: 0..3 banned, 4 is EOS, 5 banned, 6/7/8 are content.
TOY_BANNED = [0, 1, 2, 3, 5]
TOY_VOCAB = 9


class TestGreedyDecode:
    def test_certain_eos_gives_empty_output(self):
        row = np.full(TOY_VOCAB, -50.0)
        row[EOS_ID] = 0.0
        assert greedy_decode(fixed_step(row), EOS_ID, TOY_BANNED) == []

    def test_uniform_distribution_stops_immediately(self):
        # All ids tie; the lowest allowed id is the end marker.
        row = np.zeros(TOY_VOCAB)
        assert greedy_decode(fixed_step(row), EOS_ID, TOY_BANNED) == []

    def test_tie_between_content_ids_picks_lower(self):
        row = np.full(TOY_VOCAB, -50.0)
        row[7] = row[8] = -1.0

        seen = []

        def step(prefix):
            seen.append(prefix)
            if len(prefix) >= 2:
                out = np.full(TOY_VOCAB, -50.0)
                out[EOS_ID] = 0.0
                return out
            return row

        assert greedy_decode(step, EOS_ID, TOY_BANNED) == [7, 7]
        assert seen == [(), (7,), (7, 7)]

    def test_banned_ids_never_win(self):
        row = np.zeros(TOY_VOCAB)
        row[0] = 10.0  # padding would win without the ban
        row[6] = 5.0

        def step(prefix):
            if len(prefix) >= 3:
                out = np.full(TOY_VOCAB, -50.0)
                out[EOS_ID] = 0.0
                return out
            return row

        assert greedy_decode(step, EOS_ID, TOY_BANNED) == [6, 6, 6]

    def test_length_cap(self):
        row = np.full(TOY_VOCAB, -50.0)
        row[6] = 0.0  # never proposes EOS
        out = greedy_decode(fixed_step(row), EOS_ID, TOY_BANNED, max_out_len=5)
        assert out == [6] * 5

    def test_never_emits_banned_ids_random_models(self):
        for seed in range(30):
            step = seeded_random_step(seed, TOY_VOCAB)
            out = greedy_decode(step, EOS_ID, TOY_BANNED, max_out_len=8)
            assert not set(out) & set(TOY_BANNED)
            assert EOS_ID not in out
            assert len(out) <= 8


def normalized_score(step_fn, content_ids, ended_with_eos, max_out_len):
    """Score a full output sequence exactly as the decoder declares."""
    total = 0.0
    for i, token_id in enumerate(content_ids):
        total += float(step_fn(tuple(content_ids[:i]))[token_id])
    steps = len(content_ids)
    if ended_with_eos:
        total += float(step_fn(tuple(content_ids))[EOS_ID])
        steps += 1
    assert steps > 0
    return total / steps


class TestBeamDecode:
    def test_width_one_equals_greedy_on_random_models(self):
        for seed in range(50):
            step = seeded_random_step(seed, TOY_VOCAB)
            greedy = greedy_decode(step, EOS_ID, TOY_BANNED, max_out_len=6)
            beamed = beam_decode(step, EOS_ID, TOY_BANNED, max_out_len=6, beam_width=1)
            assert beamed == greedy, seed

    def test_wide_beam_matches_exhaustive_enumeration(self):
        # Three content tokens, outputs of length <= 3: enumerate every
        # possible sequence, score it by the declared rule, compare.
        content = [6, 7, 8]
        for seed in range(20):
            step = seeded_random_step(seed, TOY_VOCAB)
            best_key = None
            best_ids = None
            for length in range(0, 4):
                for ids in itertools.product(content, repeat=length):
                    if length < 3:
                        score = normalized_score(step, list(ids), True, 3)
                    else:
                        score = normalized_score(step, list(ids), False, 3)
                    key = (-score, ids)
                    if best_key is None or key < best_key:
                        best_key = key
                        best_ids = list(ids)
            beamed = beam_decode(step, EOS_ID, TOY_BANNED, max_out_len=3, beam_width=27)
            assert beamed == best_ids, seed

    def test_beam_score_at_least_greedy_score(self):
        for seed in range(50):
            step = seeded_random_step(seed, TOY_VOCAB)
            greedy = greedy_decode(step, EOS_ID, TOY_BANNED, max_out_len=5)
            beamed = beam_decode(step, EOS_ID, TOY_BANNED, max_out_len=5, beam_width=4)
            g_score = normalized_score(step, greedy, len(greedy) < 5, 5)
            b_score = normalized_score(step, beamed, len(beamed) < 5, 5)
            assert b_score >= g_score - 1e-12, seed

    def test_rejects_bad_width(self):
        with pytest.raises(DataError, match="beam_width"):
            beam_decode(fixed_step(np.zeros(TOY_VOCAB)), EOS_ID, TOY_BANNED, beam_width=0)

    def test_zero_length_budget_returns_empty(self):
        row = np.zeros(TOY_VOCAB)
        assert beam_decode(fixed_step(row), EOS_ID, TOY_BANNED, max_out_len=0) == []
        assert greedy_decode(fixed_step(row), EOS_ID, TOY_BANNED, max_out_len=0) == []


class TestConcatBaseline:
    def test_basic_concatenation(self):
        assert concat_baseline(["a", "b"], ["c"]) == ["a", "b", "c"]

    def test_empty_first_sentence(self):
        assert concat_baseline([], ["c"]) == ["c"]

    def test_length_is_sum(self):
        a = tokenize("the visiting bowlers kept the hosts in check")
        b = tokenize("the pitch offered little turn")
        assert len(concat_baseline(a, b)) == len(a) + len(b)


def fuse_fixture():
    a = ("maru", "chased", "the", "heron")
    b = ("maru", "naps", "indoors")
    pocs = (Poc(1, (Mention(SENT_A, 0, 1), Mention(SENT_B, 0, 1))),)
    summary = ("maru", "chased", "the", "heron", "then", "naps")
    inst = FusionInstance("f0", a, b, summary, pocs)
    vocab = Vocabulary.build([inst])
    return inst, vocab


class TestModelFusing:
    def test_untrained_uniform_model_fuses_to_empty(self):
        inst, vocab = fuse_fixture()
        config = ModelConfig(
            layers=1, heads=1, d_model=8, d_ff=16, vocab_size=len(vocab), max_len=64, seed=0
        )
        params = init_parameters(config)
        for tensor in params.named().values():
            tensor.data[...] = 0.0
        out = greedy_fuse(inst.sentence_a, inst.sentence_b, inst.pocs, params, config, vocab)
        assert out == []

    def test_random_models_emit_only_content_tokens(self):
        inst, vocab = fuse_fixture()
        reserved = set(vocab.decode_ids(vocab.generation_banned_ids()))
        for seed in range(5):
            config = ModelConfig(
                layers=1, heads=1, d_model=8, d_ff=16, vocab_size=len(vocab),
                max_len=64, seed=seed, variant="sharerepr",
            )
            params = init_parameters(config)
            out = greedy_fuse(
                inst.sentence_a, inst.sentence_b, inst.pocs, params, config, vocab, max_out_len=6
            )
            assert len(out) <= 6
            assert not set(out) & reserved

    def test_beam_width_one_equals_greedy_through_the_model(self):
        inst, vocab = fuse_fixture()
        for seed in range(5):
            config = ModelConfig(
                layers=1, heads=2, d_model=8, d_ff=16, vocab_size=len(vocab),
                max_len=64, seed=seed,
            )
            params = init_parameters(config)
            args = (inst.sentence_a, inst.sentence_b, inst.pocs, params, config, vocab)
            assert beam_fuse(*args, beam_width=1, max_out_len=5) == greedy_fuse(*args, max_out_len=5)

    def test_overfit_model_reproduces_its_training_summary(self):
        inst, vocab = fuse_fixture()
        config = ModelConfig(
            layers=2, heads=2, d_model=32, d_ff=64, max_len=64,
            epochs=400, batch_size=1, seed=1, peak_lr=3e-3, warmup_steps=20,
        )
        result = train([inst], config, target_loss=0.005)
        assert result.loss_history[-1] < 0.005
        out = greedy_fuse(
            inst.sentence_a, inst.sentence_b, inst.pocs,
            result.params, result.config, result.vocab,
        )
        assert out == list(inst.summary)
