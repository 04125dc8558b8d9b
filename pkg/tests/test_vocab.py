"""Tests for token canonicalization, vocabularies, and anchor selection."""

from __future__ import annotations

import random

import pytest

from relfuse.errors import (
    ArgumentError,
    ConfigError,
    EnsembleError,
    TokenizationError,
)
from relfuse.vocab import (
    AnchorSet,
    GreedyTokenizer,
    Token,
    Vocabulary,
    canonicalize,
    common_tokens,
    load_vocabulary,
    parse_anchor_strategy,
    save_vocabulary,
    select_anchors,
)

# Hand-derived canonicalization table.  Each row: (surface, convention,
# expected bytes).  The byte-level BPE rows were worked out against the
# standard printable-byte alphabet (0x20 -> "Ġ", 0x0A -> "Ċ", and bytes
# 0x80/0x99 land at "Ģ"/"Ļ").
CANON_TABLE = [
    # plain: identity on UTF-8 encoding
    ("the", "plain", b"the"),
    (" the", "plain", b" the"),
    ("▁the", "plain", "▁the".encode("utf-8")),
    ("", "plain", b""),
    ("héllo", "plain", b"h\xc3\xa9llo"),
    # sentencepiece: "▁" denotes a space, <0xHH> a raw byte
    ("▁the", "sentencepiece", b" the"),
    ("▁▁", "sentencepiece", b"  "),
    ("a▁b", "sentencepiece", b"a b"),
    ("the", "sentencepiece", b"the"),
    ("<0x0A>", "sentencepiece", b"\n"),
    ("<0x0a>", "sentencepiece", b"\n"),
    ("<0x41>", "sentencepiece", b"A"),
    ("<0xFF>", "sentencepiece", b"\xff"),
    ("▁héllo", "sentencepiece", b" h\xc3\xa9llo"),
    ("<0x41", "sentencepiece", b"<0x41"),  # not a complete escape
    # byte-bpe: printable alphabet back to raw bytes
    ("Ġthe", "byte-bpe", b" the"),
    ("Ċ", "byte-bpe", b"\n"),
    ("ĠĠ", "byte-bpe", b"  "),
    ("the", "byte-bpe", b"the"),
    ("Ã©", "byte-bpe", b"\xc3\xa9"),
    ("âĢĻ", "byte-bpe", b"\xe2\x80\x99"),  # curly apostrophe
    ("ĉ", "byte-bpe", b"\t"),
]


@pytest.mark.parametrize("surface,convention,expected", CANON_TABLE)
def test_canonicalize_table(surface, convention, expected):
    assert canonicalize(surface, convention) == expected


def test_canonicalize_same_word_matches_across_conventions():
    assert (
        canonicalize("▁the", "sentencepiece")
        == canonicalize("Ġthe", "byte-bpe")
        == canonicalize(" the", "plain")
    )


def test_canonicalize_rejects_unknown_convention():
    with pytest.raises(ConfigError):
        canonicalize("x", "wordpiece")


def test_canonicalize_accepts_bytes_input():
    assert canonicalize(b" the", "plain") == b" the"
    assert canonicalize("▁the".encode("utf-8"), "sentencepiece") == b" the"


def test_byte_bpe_unknown_char_passes_through():
    # Characters outside the byte alphabet (e.g. CJK in a special token)
    # keep their own UTF-8 bytes.
    assert canonicalize("世", "byte-bpe") == "世".encode("utf-8")


def test_vocabulary_requires_contiguous_ids():
    with pytest.raises(ArgumentError):
        Vocabulary([Token(0, b"a", "a"), Token(2, b"b", "b")])


def test_vocabulary_collision_keeps_lowest_id(caplog):
    import logging

    with caplog.at_level(logging.WARNING, logger="relfuse.vocab"):
        vocab = Vocabulary(
            [
                Token(0, b" the", "▁the"),
                Token(1, b"cat", "cat"),
                Token(2, b" the", "<dup>"),
            ],
            name="v",
        )
    assert vocab.id_for(b" the") == 0
    assert vocab.dropped_ids == {2}
    assert any("collide" in rec.message for rec in caplog.records)
    assert vocab.surfaces() == {b" the", b"cat"}


def test_vocabulary_jsonl_round_trip(tmp_path):
    vocab = Vocabulary.from_raw(
        ["▁the", "▁cat", "s", "<0x0A>"], "sentencepiece", name="m"
    )
    path = tmp_path / "vocab.jsonl"
    save_vocabulary(vocab, path)
    loaded = load_vocabulary(path, name="m")
    assert loaded.size == vocab.size
    for a, b in zip(vocab.tokens, loaded.tokens):
        assert (a.id, a.surface, a.display) == (b.id, b.surface, b.display)
    # binary surfaces survive the base64 round trip
    assert loaded.surface_of(3) == b"\n"


def test_load_vocabulary_rejects_garbage(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": 0, "bytes": "?not-base64", "display": "x"}\n')
    with pytest.raises(ConfigError):
        load_vocabulary(path)
    path.write_text("")
    with pytest.raises(ConfigError):
        load_vocabulary(path)


def test_greedy_tokenizer_longest_match():
    vocab = Vocabulary.from_raw(
        [" the", " theatre", " t", "h", "e", "a", "t", "r", " "], "plain", name="v"
    )
    tok = GreedyTokenizer(vocab)
    ids = tok.encode(" theatre")
    assert ids == [vocab.id_for(b" theatre")]
    ids = tok.encode(" thea")
    assert [vocab.surface_of(i) for i in ids] == [b" the", b"a"]
    assert tok.decode(ids) == b" thea"


def test_greedy_tokenizer_raises_on_uncovered_byte():
    vocab = Vocabulary.from_raw(["a", "b"], "plain", name="v")
    with pytest.raises(TokenizationError):
        GreedyTokenizer(vocab).encode("abc")


def test_greedy_tokenizer_round_trip_random_text():
    rng = random.Random(7)
    words = ["cat", "dog", "the", "sat", "mat"]
    chars = sorted({c for w in words for c in w} | {" ", "."})
    vocab = Vocabulary.from_raw(
        [" " + w for w in words] + chars + [" "], "plain", name="v"
    )
    tok = GreedyTokenizer(vocab)
    for _ in range(50):
        text = "".join(
            " " + rng.choice(words + ["."]) for _ in range(rng.randint(1, 12))
        )
        assert tok.decode(tok.encode(text)) == text.encode("utf-8")


def _three_vocabs():
    a = Vocabulary.from_raw(
        ["▁the", "▁cat", "▁dog", "▁axolotl", "x"],
        "sentencepiece",
        name="a",
    )
    b = Vocabulary.from_raw(
        ["Ġthe", "Ġcat", "Ġdog", "Ġzebra", "y"],
        "byte-bpe",
        name="b",
    )
    c = Vocabulary.from_raw(
        [" the", " cat", " dog", " quokka", "z"], "plain", name="c"
    )
    return a, b, c


def test_common_tokens_against_nested_loop_oracle():
    vocabs = _three_vocabs()
    got = common_tokens(vocabs)
    # oracle: brute triple loop over all surface combinations
    expected = set()
    for ta in vocabs[0].tokens:
        for tb in vocabs[1].tokens:
            for tc in vocabs[2].tokens:
                if ta.surface == tb.surface == tc.surface:
                    expected.add(ta.surface)
    assert got == expected == {b" the", b" cat", b" dog"}


def test_common_tokens_order_independent():
    a, b, c = _three_vocabs()
    assert common_tokens([a, b, c]) == common_tokens([c, a, b])
    assert common_tokens([a, b, c]) == common_tokens([b, c, a])


def test_common_tokens_pairwise_matches_incremental():
    a, b, c = _three_vocabs()
    assert common_tokens([a, b]) & c.surfaces() == common_tokens([a, b, c])


def test_common_tokens_requires_two_vocabs():
    a, _, _ = _three_vocabs()
    with pytest.raises(ArgumentError):
        common_tokens([a])


def test_common_tokens_empty_intersection_is_fatal():
    a = Vocabulary.from_raw(["p", "q"], "plain", name="a")
    b = Vocabulary.from_raw(["r", "s"], "plain", name="b")
    with pytest.raises(EnsembleError):
        common_tokens([a, b])


def test_select_anchors_full_sorted_and_resolved():
    vocabs = _three_vocabs()
    common = common_tokens(vocabs)
    anchors = select_anchors(common, vocabs, strategy="full")
    assert anchors.anchors == tuple(sorted(common))
    assert anchors.size == 3
    for m, vocab in enumerate(vocabs):
        for k, surface in enumerate(anchors.anchors):
            assert vocab.surface_of(anchors.per_model_ids[m][k]) == surface


def test_select_anchors_full_ignores_seed():
    vocabs = _three_vocabs()
    common = common_tokens(vocabs)
    a1 = select_anchors(common, vocabs, strategy="full", seed=1)
    a2 = select_anchors(common, vocabs, strategy="full", seed=99)
    assert a1 == a2


def test_select_anchors_sample_reproducible_and_subset():
    vocabs = _three_vocabs()
    common = common_tokens(vocabs)
    s1 = select_anchors(common, vocabs, strategy="sample", k=2, seed=5)
    s2 = select_anchors(common, vocabs, strategy="sample", k=2, seed=5)
    s3 = select_anchors(common, vocabs, strategy="sample", k=2, seed=6)
    assert s1 == s2
    assert s1.size == 2
    assert set(s1.anchors) <= common
    assert list(s1.anchors) == sorted(s1.anchors)
    # a different seed is allowed to pick a different subset, but stays valid
    assert set(s3.anchors) <= common


def test_select_anchors_sample_validates_k():
    vocabs = _three_vocabs()
    common = common_tokens(vocabs)
    with pytest.raises(ArgumentError):
        select_anchors(common, vocabs, strategy="sample", k=0, seed=1)
    with pytest.raises(ArgumentError):
        select_anchors(common, vocabs, strategy="sample", k=99, seed=1)
    with pytest.raises(ArgumentError):
        select_anchors(common, vocabs, strategy="sample")


def test_select_anchors_unknown_strategy():
    vocabs = _three_vocabs()
    with pytest.raises(ArgumentError):
        select_anchors(common_tokens(vocabs), vocabs, strategy="best")


def test_parse_anchor_strategy():
    assert parse_anchor_strategy("full") == ("full", None)
    assert parse_anchor_strategy("sample:32") == ("sample", 32)
    with pytest.raises(ConfigError):
        parse_anchor_strategy("sample:lots")
    with pytest.raises(ConfigError):
        parse_anchor_strategy("top")


def test_anchor_set_is_hashable_value_object():
    a = AnchorSet(anchors=(b"x",), per_model_ids=((0,), (1,)))
    b = AnchorSet(anchors=(b"x",), per_model_ids=((0,), (1,)))
    assert a == b and hash(a) == hash(b)
