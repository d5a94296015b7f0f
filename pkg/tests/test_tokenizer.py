"""Caption normalisation, WordPiece encoding and vocabulary handling."""
import pytest

from capforge.tokenizer import (EOC, SOC, MAX_WORD_CHARS, Vocabulary, VocabularyError, decode, encode, normalize,
                                wordpiece)


@pytest.fixture
def wp_vocab():
    return Vocabulary.from_tokens(["[PAD]", "[UNK]", "a", "man", "play", "##ing", "##s", "dog", "bark"])


@pytest.mark.parametrize("raw, expected", [
    ("A man Speaks!", "a man speaks"),
    ("  Dogs,  barking.  ", "dogs barking"),
    ("rock-'n'-roll", "rocknroll"),
    ("«Quoted» text…", "quoted text"),
    ("", ""),
])
def test_normalize(raw, expected):
    assert normalize(raw) == expected


def test_normalize_is_idempotent():
    s = normalize("Birds CHIRP; a car, honks!")
    assert normalize(s) == s


def test_boundaries_are_last_ids(wp_vocab):
    assert wp_vocab.soc_id == len(wp_vocab) - 2
    assert wp_vocab.eoc_id == len(wp_vocab) - 1
    assert wp_vocab.tokens[-2:] == (SOC, EOC)


def test_existing_boundaries_not_duplicated():
    v = Vocabulary.from_tokens(["[PAD]", "[UNK]", SOC, EOC, "x"])
    assert len(v) == 5 and v.soc_id == 2


def test_duplicate_tokens_rejected():
    with pytest.raises(VocabularyError, match="duplicate"):
        Vocabulary.from_tokens(["[PAD]", "[UNK]", "a", "a"])


def test_missing_special_rejected():
    with pytest.raises(VocabularyError, match="UNK"):
        Vocabulary.from_tokens(["[PAD]", "a"])


def test_wordpiece_longest_match(wp_vocab):
    ids = wordpiece("playing", wp_vocab)
    assert [wp_vocab.tokens[i] for i in ids] == ["play", "##ing"]
    assert [wp_vocab.tokens[i] for i in wordpiece("plays", wp_vocab)] == ["play", "##s"]


def test_wordpiece_unknown_word(wp_vocab):
    assert wordpiece("zebra", wp_vocab) == [wp_vocab.unk_id]
    # a partial match with an unmatched remainder is still one UNK
    assert wordpiece("playx", wp_vocab) == [wp_vocab.unk_id]


def test_wordpiece_overlong_word(wp_vocab):
    word = "play" + "s" * (MAX_WORD_CHARS - 3)
    assert len(word) == MAX_WORD_CHARS + 1
    assert wordpiece(word, wp_vocab) == [wp_vocab.unk_id]


def test_encode_wraps_with_boundaries(wp_vocab):
    ids = encode("a man playing", wp_vocab)
    assert ids[0] == wp_vocab.soc_id and ids[-1] == wp_vocab.eoc_id
    assert len(ids) == 2 + 4


def test_decode_inverts_encode(wp_vocab):
    assert decode(encode("a dog barks", wp_vocab), wp_vocab) == "a dog barks"
    assert decode([wp_vocab.pad_id, wp_vocab.index["man"]], wp_vocab) == "man"


def test_decode_out_of_range(wp_vocab):
    with pytest.raises(VocabularyError, match="out of range"):
        decode([len(wp_vocab)], wp_vocab)
    with pytest.raises(VocabularyError):
        decode([-1], wp_vocab)


def test_save_load_roundtrip(tmp_path, wp_vocab):
    path = tmp_path / "vocab.txt"
    wp_vocab.save(path)
    assert Vocabulary.load(path) == wp_vocab
