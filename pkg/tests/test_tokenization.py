import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ragprobe.tokenization import (
    BOS_ID,
    FIRST_STRING_ID,
    SpanAmbiguityError,
    SpanNotFoundError,
    TokenSpan,
    Vocabulary,
    decode,
    encode,
    escape_token,
    find_span,
    unescape_token,
    words_to_vocabulary,
)

VOCAB = Vocabulary(["ab", "a", " ", "cd", " cd", "Eavan", " Boland", " was", " born", " in", "Dub", "lin"])


def _partitions(enc):
    pos = 0
    for s, e in enc.offsets:
        if s == e:  # continuation byte
            assert s == pos
            continue
        assert s == pos
        pos = e
    return pos == len(enc.text)


def test_empty_text():
    assert encode(VOCAB, "").ids == ()
    assert encode(VOCAB, "", add_bos=True).ids == (BOS_ID,)


def test_round_trip_sample():
    text = "Eavan Boland was born in"
    assert decode(VOCAB, encode(VOCAB, text).ids) == text
    assert decode(VOCAB, encode(VOCAB, text, add_bos=True).ids) == text


def test_offsets_partition_ab_cd():
    enc = encode(VOCAB, "ab cd")
    assert enc.ids == (VOCAB.token_to_id("ab"), VOCAB.token_to_id(" cd"))
    assert enc.offsets == ((0, 2), (2, 5))


def test_byte_fallback_offsets():
    enc = encode(VOCAB, "aé")
    # "é" is two UTF-8 bytes: first gets the character, second is zero-width
    assert enc.ids == (VOCAB.token_to_id("a"), 1 + 0xC3, 1 + 0xA9)
    assert enc.offsets == ((0, 1), (1, 2), (2, 2))
    assert decode(VOCAB, enc.ids) == "aé"


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=40))
def test_round_trip_and_partition_property(text):
    enc = encode(VOCAB, text)
    assert decode(VOCAB, enc.ids) == text
    assert _partitions(enc)
    assert all(0 <= i < VOCAB.size for i in enc.ids)


@settings(max_examples=100, deadline=None)
@given(st.text(alphabet="abcd ", min_size=1, max_size=20), st.text(alphabet="abcd ", min_size=1, max_size=3))
def test_find_span_slice_is_the_needle(text, needle):
    enc = encode(VOCAB, text)
    try:
        span = find_span(enc, needle)
    except SpanNotFoundError:
        assert needle not in text
        return
    assert text[span.char_start:span.char_end] == needle
    covered = enc.offsets[span.start][0], enc.offsets[span.end - 1][1]
    assert covered[0] <= span.char_start and covered[1] >= span.char_end


def test_prefix_stability_on_corpus(copy_vocab):
    from ragprobe.copy_task import toy_contexts

    for ctx in toy_contexts():
        a, b = ctx.segments[0], "\n" + ctx.segments[1]
        assert encode(copy_vocab, a + b).ids == encode(copy_vocab, a).ids + encode(copy_vocab, b).ids


def test_find_span_subject():
    text = "Eavan Boland was born in"
    s = find_span(encode(VOCAB, text), "Eavan Boland")
    assert (s.start, s.end) == (0, 2)
    s = find_span(encode(VOCAB, text, add_bos=True), "Eavan Boland", label="subject")
    assert (s.start, s.end, s.char_start, s.char_end, s.label) == (1, 3, 0, 12, "subject")


def test_find_span_partial_token_is_covered():
    enc = encode(VOCAB, "Eavan Boland")
    s = find_span(enc, "Bol")
    assert (s.start, s.end) == (1, 2)


def test_find_span_errors():
    enc = encode(VOCAB, "Dublin and Dublin")
    with pytest.raises(SpanNotFoundError):
        find_span(enc, "Paris")
    with pytest.raises(SpanAmbiguityError) as ei:
        find_span(enc, "Dublin", "require_unique")
    assert ei.value.offsets == [0, 11]
    assert find_span(enc, "Dublin", "last").char_start == 11
    assert find_span(enc, "Dublin", "first").char_start == 0
    assert find_span(enc, "Dublin", "require_unique", char_range=(5, 17)).char_start == 11
    with pytest.raises(ValueError):
        find_span(enc, "")
    with pytest.raises(ValueError):
        find_span(enc, "Dublin", "middle")


def test_token_span_validation():
    with pytest.raises(ValueError):
        TokenSpan(3, 3, 0, 0)
    with pytest.raises(ValueError):
        TokenSpan(0, 1, 0, 1, label="object")
    assert list(TokenSpan(2, 5, 0, 0).positions) == [2, 3, 4]


def test_vocabulary_layout_and_file_round_trip(tmp_path):
    v = Vocabulary(["x y", "line\nbreak", "back\\slash", "\t", " "])
    assert v.id_to_token(0) == "<s>"
    assert v.id_to_token(1) == "<0x00>" and v.id_to_token(256) == "<0xFF>"
    assert v.token_to_id("x y") == FIRST_STRING_ID
    v.save(tmp_path / "vocab.txt")
    lines = (tmp_path / "vocab.txt").read_text().split("\n")
    assert lines[FIRST_STRING_ID] == "x\\sy"
    w = Vocabulary.load(tmp_path / "vocab.txt")
    assert w.strings == v.strings and w.size == v.size


def test_vocabulary_rejects_bad_input(tmp_path):
    with pytest.raises(ValueError):
        Vocabulary(["a", "a"])
    with pytest.raises(ValueError):
        Vocabulary([""])
    (tmp_path / "v.txt").write_text("<s>\nfoo\n")
    with pytest.raises(ValueError, match="reserved"):
        Vocabulary.load(tmp_path / "v.txt")
    with pytest.raises(ValueError):
        unescape_token("bad\\q")


@given(st.text(max_size=20))
def test_escape_round_trip(s):
    assert unescape_token(escape_token(s)) == s
    assert "\n" not in escape_token(s)


def test_words_to_vocabulary():
    v = words_to_vocabulary(["Rome is old.", "in Rome"])
    for tok in ("Rome", " Rome", "is", " is", ".", " "):
        assert tok in v
    assert list(v.strings) == sorted(v.strings)
