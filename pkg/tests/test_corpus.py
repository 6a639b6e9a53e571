import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pocfusion import corpus
from pocfusion.corpus import (
    BOS_ID,
    EOS_ID,
    RESERVED_TOKENS,
    SEP_ID,
    UNK_ID,
    FusionInstance,
    Mention,
    Poc,
    Vocabulary,
    encode_instance,
    encode_source_for_generation,
    parse_corpus_lines,
    tokenize,
)
from pocfusion.errors import DataError, ParseError
from pocfusion.markup import is_marker


class TestTokenize:
    def test_empty(self):
        assert tokenize("") == []

    def test_lowercase_and_punctuation_split(self):
        assert tokenize("Bowling coach.") == ["bowling", "coach", "."]

    def test_each_punctuation_mark_is_its_own_token(self):
        assert tokenize("well, really?!") == ["well", ",", "really", "?", "!"]

    def test_apostrophes_split(self):
        assert tokenize("Don't") == ["don", "'", "t"]

    def test_whitespace_runs_collapse(self):
        assert tokenize("a   b\t c\nd") == ["a", "b", "c", "d"]


def make_record(**overrides):
    record = {
        "id": "ex-1",
        "sent_a": "allan donald will coach",
        "sent_b": "donald was a bowler",
        "summary": "allan donald will coach bowlers",
        "pocs": [
            {
                "poc_id": 1,
                "mentions": [
                    {"sent": "a", "start": 0, "end": 2},
                    {"sent": "b", "start": 0, "end": 1},
                ],
            }
        ],
    }
    record.update(overrides)
    return record


def parse_single(record) -> FusionInstance:
    return parse_corpus_lines([json.dumps(record)])[0]


class TestParse:
    def test_well_formed(self):
        inst = parse_single(make_record())
        assert inst.id == "ex-1"
        assert inst.sentence_a == ("allan", "donald", "will", "coach")
        assert len(inst.pocs) == 1
        assert inst.pocs[0].poc_id == 1
        assert inst.pocs[0].mentions[0] == Mention(sent="a", start=0, end=2)

    def test_blank_lines_are_skipped(self):
        lines = [json.dumps(make_record()), "", "   "]
        assert len(parse_corpus_lines(lines)) == 1

    def test_line_numbers_in_errors(self):
        lines = [json.dumps(make_record()), "{not json"]
        with pytest.raises(ParseError, match="line 2.*malformed"):
            parse_corpus_lines(lines)

    def test_missing_field(self):
        record = make_record()
        del record["summary"]
        with pytest.raises(ParseError, match="missing field 'summary'"):
            parse_single(record)

    def test_wrong_field_type(self):
        with pytest.raises(ParseError, match="wrong type"):
            parse_single(make_record(sent_a=42))

    def test_span_out_of_bounds(self):
        record = make_record()
        record["pocs"][0]["mentions"][0]["end"] = 99
        with pytest.raises(ParseError, match="out of bounds"):
            parse_single(record)

    def test_empty_span_rejected(self):
        record = make_record()
        record["pocs"][0]["mentions"][0]["end"] = 0
        with pytest.raises(ParseError, match="out of bounds"):
            parse_single(record)

    def test_overlapping_mentions_rejected(self):
        record = make_record()
        record["pocs"].append(
            {
                "poc_id": 2,
                "mentions": [
                    {"sent": "a", "start": 1, "end": 3},
                    {"sent": "b", "start": 2, "end": 3},
                ],
            }
        )
        with pytest.raises(ParseError, match="overlapping mentions"):
            parse_single(record)

    def test_duplicate_poc_id_rejected(self):
        record = make_record()
        record["pocs"].append(record["pocs"][0].copy())
        with pytest.raises(ParseError, match="duplicate poc_id"):
            parse_single(record)

    def test_poc_must_tie_both_sentences(self):
        record = make_record()
        record["pocs"][0]["mentions"] = [{"sent": "a", "start": 0, "end": 2}]
        with pytest.raises(ParseError, match="must tie"):
            parse_single(record)

    def test_summary_mentions_are_stored(self):
        record = make_record()
        record["pocs"][0]["mentions"].append({"sent": "summary", "start": 0, "end": 2})
        inst = parse_single(record)
        assert any(m.sent == "summary" for m in inst.pocs[0].mentions)

    def test_bad_sent_value(self):
        record = make_record()
        record["pocs"][0]["mentions"][0]["sent"] = "c"
        with pytest.raises(ParseError, match="sent must be one of"):
            parse_single(record)

    def test_instances_without_pocs_are_allowed(self):
        record = make_record(pocs=[])
        inst = parse_single(record)
        assert inst.pocs == ()

    def test_round_trip_through_record(self):
        inst = parse_single(make_record())
        again = parse_single(corpus.instance_to_record(inst))
        assert again == inst


def tiny_instance() -> FusionInstance:
    return FusionInstance(
        id="t",
        sentence_a=("a",),
        sentence_b=("b",),
        summary=("c",),
        pocs=(
            Poc(
                poc_id=1,
                mentions=(Mention("a", 0, 1), Mention("b", 0, 1)),
            ),
        ),
    )


class TestVocabulary:
    def test_reserved_block_comes_first(self):
        vocab = Vocabulary([])
        assert vocab.id_to_token(0) == "[PAD]"
        assert vocab.id_to_token(UNK_ID) == "[UNK]"
        assert vocab.id_to_token(5) == "[MASK]"
        assert vocab.id_to_token(6) == "[S_1]"
        assert vocab.id_to_token(25) == "[E_10]"
        assert len(vocab) == len(RESERVED_TOKENS)

    def test_bijection(self):
        vocab = Vocabulary.build([tiny_instance()])
        for i in range(len(vocab)):
            assert vocab.token_to_id(vocab.id_to_token(i)) == i

    def test_min_count_filters(self):
        insts = [
            FusionInstance("1", ("rare", "common"), ("common",), ("common",)),
            FusionInstance("2", ("common",), ("common",), ("common",)),
        ]
        vocab = Vocabulary.build(insts, min_count=2)
        assert "common" in vocab
        assert "rare" not in vocab
        assert vocab.token_to_id("rare") == UNK_ID

    def test_empty_corpus_rejected(self):
        with pytest.raises(DataError, match="empty corpus"):
            Vocabulary.build([])

    def test_duplicate_content_rejected(self):
        with pytest.raises(DataError, match="duplicate or reserved"):
            Vocabulary(["tok", "tok"])

    def test_from_id_order_round_trip(self):
        vocab = Vocabulary.build([tiny_instance()])
        again = Vocabulary.from_id_order(vocab.id_order())
        assert again.id_order() == vocab.id_order()

    def test_from_id_order_requires_reserved_block(self):
        with pytest.raises(DataError, match="reserved token block"):
            Vocabulary.from_id_order(["[PAD]", "nope"])

    def test_generation_ban_covers_reserved_except_eos(self):
        vocab = Vocabulary.build([tiny_instance()])
        banned = set(vocab.generation_banned_ids())
        assert EOS_ID not in banned
        assert banned == set(range(len(RESERVED_TOKENS))) - {EOS_ID}


class TestEncode:
    def test_baseline_layout(self):
        inst = tiny_instance()
        vocab = Vocabulary.build([inst])
        enc = encode_instance(inst, vocab, variant="baseline")
        assert vocab.decode_ids(enc.ids) == ["[BOS]", "a", "[SEP]", "b", "[SEP]", "c", "[EOS]"]
        assert list(enc.segments) == [0, 0, 0, 0, 0, 1, 1]
        assert enc.source_len == 5
        assert list(enc.summary_positions) == [5]
        assert enc.eos_position == 6

    def test_linking_inserts_marker_pairs(self):
        inst = tiny_instance()
        vocab = Vocabulary.build([inst])
        enc = encode_instance(inst, vocab, variant="linking")
        assert vocab.decode_ids(enc.ids) == [
            "[BOS]", "[S_1]", "a", "[E_1]", "[SEP]", "[S_1]", "b", "[E_1]", "[SEP]", "c", "[EOS]",
        ]
        assert list(enc.z) == [0] * enc.source_len

    def test_sharerepr_populates_z(self):
        inst = tiny_instance()
        vocab = Vocabulary.build([inst])
        enc = encode_instance(inst, vocab, variant="sharerepr")
        assert list(enc.z) == [0, 1, 0, 1, 0]
        assert vocab.decode_ids(enc.ids) == ["[BOS]", "a", "[SEP]", "b", "[SEP]", "c", "[EOS]"]

    def test_z_is_all_zero_for_baseline(self):
        inst = tiny_instance()
        vocab = Vocabulary.build([inst])
        enc = encode_instance(inst, vocab, variant="baseline")
        assert list(enc.z) == [0] * enc.source_len
        assert len(enc.z) == enc.source_len

    def test_unknown_tokens_map_to_unk(self):
        inst = tiny_instance()
        vocab = Vocabulary.build([inst])
        other = FusionInstance("o", ("zzz",), ("b",), ("c",))
        enc = encode_instance(other, vocab)
        assert enc.ids[1] == UNK_ID

    def test_empty_summary_rejected(self):
        inst = FusionInstance("e", ("a",), ("b",), ())
        vocab = Vocabulary.build([tiny_instance()])
        with pytest.raises(DataError, match="empty summary"):
            encode_instance(inst, vocab)

    def test_unknown_variant_rejected(self):
        vocab = Vocabulary.build([tiny_instance()])
        with pytest.raises(DataError, match="unknown variant"):
            encode_instance(tiny_instance(), vocab, variant="fancy")

    def test_vocab_missing_reserved_rejected(self):
        class Hollow:
            def __contains__(self, token):
                return False

        with pytest.raises(DataError, match="missing reserved token"):
            encode_instance(tiny_instance(), Hollow())

    def test_segments_monotone_and_binary(self):
        inst = parse_single(make_record())
        vocab = Vocabulary.build([inst])
        for variant in ("baseline", "linking", "sharerepr"):
            enc = encode_instance(inst, vocab, variant=variant)
            seg = list(enc.segments)
            assert set(seg) == {0, 1}
            assert seg == sorted(seg)

    def test_round_trip_without_truncation_or_unk(self):
        inst = parse_single(make_record())
        vocab = Vocabulary.build([inst])
        enc = encode_instance(inst, vocab, variant="baseline")
        expect = (
            ["[BOS]", *inst.sentence_a, "[SEP]", *inst.sentence_b, "[SEP]", *inst.summary, "[EOS]"]
        )
        assert vocab.decode_ids(enc.ids) == expect

    def test_truncation_respects_max_len(self):
        inst = FusionInstance(
            id="long",
            sentence_a=tuple(f"a{i}" for i in range(40)),
            sentence_b=tuple(f"b{i}" for i in range(40)),
            summary=tuple(f"s{i}" for i in range(40)),
            pocs=(
                Poc(1, (Mention("a", 0, 2), Mention("b", 0, 2))),
                Poc(2, (Mention("a", 30, 34), Mention("b", 30, 34))),
            ),
        )
        vocab = Vocabulary.build([inst])
        for variant in ("baseline", "linking", "sharerepr"):
            enc = encode_instance(inst, vocab, variant=variant, max_len=32)
            assert len(enc.ids) <= 32
            assert enc.ids[0] == BOS_ID
            assert enc.ids[-1] == EOS_ID
            assert list(enc.ids).count(SEP_ID) == 2
            assert enc.summary_start == enc.source_len
            assert len(enc.z) == enc.source_len

    def test_truncation_drops_marker_groups_atomically(self):
        inst = FusionInstance(
            id="long",
            sentence_a=tuple(f"a{i}" for i in range(40)),
            sentence_b=tuple(f"b{i}" for i in range(40)),
            summary=tuple(f"s{i}" for i in range(10)),
            pocs=(
                Poc(1, (Mention("a", 0, 2), Mention("b", 0, 2))),
                # straddles any plausible cut point, so it must vanish whole
                Poc(2, (Mention("a", 10, 38), Mention("b", 10, 38))),
            ),
        )
        vocab = Vocabulary.build([inst])
        enc = encode_instance(inst, vocab, variant="linking", max_len=48)
        tokens = vocab.decode_ids(enc.ids)
        starts = sum(1 for t in tokens if t.startswith("[S_"))
        ends = sum(1 for t in tokens if t.startswith("[E_"))
        assert starts == ends
        assert "[S_2]" not in tokens
        assert len(enc.ids) <= 48

    def test_proportional_truncation_touches_every_long_region(self):
        inst = FusionInstance(
            id="long",
            sentence_a=tuple(f"a{i}" for i in range(30)),
            sentence_b=tuple(f"b{i}" for i in range(30)),
            summary=tuple(f"s{i}" for i in range(30)),
        )
        vocab = Vocabulary.build([inst])
        enc = encode_instance(inst, vocab, max_len=34)
        tokens = vocab.decode_ids(enc.ids)
        first_sep = tokens.index("[SEP]")
        second_sep = tokens.index("[SEP]", first_sep + 1)
        len_a = first_sep - 1
        len_b = second_sep - first_sep - 1
        len_s = len(tokens) - second_sep - 2
        # 30/30/30 into a budget of 30 body tokens: every region shrinks alike
        assert len_a == len_b == len_s == 10

    def test_poc_overflow_keeps_most_mentioned_groups(self):
        n = 30
        pocs = []
        for pid in range(1, 13):
            mentions = [Mention("a", pid - 1, pid), Mention("b", pid - 1, pid)]
            if pid == 11:
                mentions += [Mention("a", 20, 21), Mention("a", 22, 23)]
            pocs.append(Poc(pid, tuple(mentions)))
        inst = FusionInstance(
            id="many",
            sentence_a=tuple(f"a{i}" for i in range(n)),
            sentence_b=tuple(f"b{i}" for i in range(n)),
            summary=("s0", "s1"),
            pocs=tuple(pocs),
        )
        vocab = Vocabulary.build([inst])
        enc = encode_instance(inst, vocab, variant="sharerepr")
        z = list(enc.z)
        # group 11 has the most mentions; it survives under the free index 10
        assert z[1 + 20] == 10 and z[1 + 22] == 10
        # groups 10 and 12 lose the tie-break and are dropped
        assert 12 not in z
        assert z[1 + 9] == 0  # poc 10's mention position
        # groups 1..9 keep their declared indices
        for pid in range(1, 10):
            assert z[1 + pid - 1] == pid

    def test_generation_encoding_has_no_summary(self):
        inst = tiny_instance()
        vocab = Vocabulary.build([inst])
        enc = encode_source_for_generation(
            inst.sentence_a, inst.sentence_b, inst.pocs, vocab, "sharerepr"
        )
        assert len(enc.ids) == enc.source_len
        assert list(enc.z) == [0, 1, 0, 1, 0]
        assert len(enc.summary_positions) == 0

    def test_generation_encoding_leaves_room(self):
        inst = FusionInstance(
            id="long",
            sentence_a=tuple(f"a{i}" for i in range(100)),
            sentence_b=tuple(f"b{i}" for i in range(100)),
            summary=("s",),
        )
        vocab = Vocabulary.build([inst])
        enc = encode_source_for_generation(
            inst.sentence_a, inst.sentence_b, inst.pocs, vocab, "baseline",
            max_len=128, max_out_len=32,
        )
        assert enc.source_len <= 128 - 33


WORD = st.text(alphabet="abcdefghij", min_size=1, max_size=6)


@st.composite
def random_instance(draw):
    sent_a = draw(st.lists(WORD, min_size=1, max_size=12))
    sent_b = draw(st.lists(WORD, min_size=1, max_size=12))
    summary = draw(st.lists(WORD, min_size=1, max_size=10))
    end_a = draw(st.integers(1, len(sent_a)))
    start_a = draw(st.integers(0, end_a - 1))
    end_b = draw(st.integers(1, len(sent_b)))
    start_b = draw(st.integers(0, end_b - 1))
    pocs = (Poc(1, (Mention("a", start_a, end_a), Mention("b", start_b, end_b))),)
    return FusionInstance("h", tuple(sent_a), tuple(sent_b), tuple(summary), pocs)


@given(random_instance(), st.sampled_from(["baseline", "linking", "sharerepr"]))
@settings(max_examples=60, deadline=None)
def test_encode_contract_properties(inst, variant):
    vocab = Vocabulary.build([inst])
    enc = encode_instance(inst, vocab, variant=variant)
    seg = list(enc.segments)
    assert seg == sorted(seg) and set(seg) <= {0, 1}
    assert len(enc.z) == enc.source_len
    assert len(enc.ids) <= 128
    declared = {p.poc_id for p in inst.pocs}
    assert {int(v) for v in enc.z if v != 0} <= declared
    # control positions never join a correspondence group
    tokens = vocab.decode_ids(enc.ids)
    for i, tok in enumerate(tokens[: enc.source_len]):
        if tok in ("[BOS]", "[SEP]") or is_marker(tok):
            assert enc.z[i] == 0
