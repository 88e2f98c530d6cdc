import pytest

from unimse.errors import LabelError, VocabularyError
from unimse.models import EMOTIONS, Polarity, Provenance, Task, UniversalLabel
from unimse.textcodec import (
    BOS,
    EOS,
    INTENSITY_GRID,
    RESERVED,
    SEP,
    Vocabulary,
    build_vocab,
    decode_prediction,
    detokenize,
    emotion_token,
    encode_target,
    encode_text,
    intensity_token,
    normalize,
    serialize_ul,
    tokenize,
)


def test_tokenize_lowercases_and_splits_punctuation():
    assert tokenize("Great movie, REALLY!") == ["great", "movie", ",", "really", "!"]
    assert tokenize("   ") == []


def test_vocabulary_orders_reserved_block_then_frequency_then_token():
    vocab = build_vocab(["b a a", "c b a", "d"])
    words = vocab.tokens[len(RESERVED):]
    assert vocab.tokens[:len(RESERVED)] == list(RESERVED)
    assert words == ["a", "b", "c", "d"]
    assert vocab.pad_id == 0
    assert vocab.id_of("never-seen") == vocab.unk_id


def test_encode_text_then_detokenize_restores_normalized_text():
    vocab = build_vocab(["The movie was great!", "what a day , really"])
    for text in ("The movie was great!", "what a day, REALLY", "great great movie"):
        assert detokenize(encode_text(text, vocab), vocab) == normalize(text)
    assert encode_text("", vocab) == []
    assert detokenize([], vocab) == ""


def test_encode_text_maps_unknown_words_to_unk():
    vocab = build_vocab(["the movie was great"])
    ids = encode_text("the film was great", vocab)
    assert ids[1] == vocab.unk_id
    assert [i for k, i in enumerate(ids) if k != 1] == [vocab.id_of(w) for w in ("the", "was", "great")]


def test_uppercase_word_does_not_collide_with_label_tokens():
    vocab = build_vocab(["joy to the world"])
    (joy,) = encode_text("JOY", vocab)
    assert joy == vocab.id_of("joy")
    assert joy != vocab.id_of(emotion_token("joy"))
    assert joy >= len(RESERVED)


def test_special_tokens_survive_tokenization():
    vocab = build_vocab(["a b"])
    assert tokenize("a <sep> b") == ["a", SEP, "b"]
    assert encode_text("a <sep> b", vocab) == [vocab.id_of("a"), vocab.sep_id, vocab.id_of("b")]


def test_vocabulary_save_and_load(tmp_path):
    vocab = build_vocab(["the movie was great", "what a day"])
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    assert Vocabulary.load(path) == vocab
    assert path.read_text().splitlines()[len(RESERVED)] == "a"


def test_vocabulary_errors(tmp_path):
    with pytest.raises(VocabularyError):
        build_vocab([])
    with pytest.raises(VocabularyError):
        Vocabulary.load(tmp_path / "missing.txt")
    with pytest.raises(VocabularyError):
        Vocabulary(["word"] + list(RESERVED))
    vocab = build_vocab(["x"])
    with pytest.raises(VocabularyError):
        vocab.token_of(len(vocab))


def test_every_label_serializes_to_four_tokens_and_decodes_back():
    vocab = build_vocab(["filler"])
    for polarity in Polarity:
        for value in INTENSITY_GRID:
            for emotion in EMOTIONS:
                label = UniversalLabel(polarity=polarity, intensity=value, emotion=emotion,
                                       intensity_source=Provenance.GENERATED)
                tokens = serialize_ul(label)
                assert len(tokens) == 4 and tokens[-1] == EOS
                assert vocab.decode_ids(encode_target(label, vocab)) == tokens
                assert decode_prediction(tokens, Task.MSA).value == value
                assert decode_prediction(tokens, Task.ERC).value == emotion


def test_intensity_token_format():
    assert intensity_token(1.6) == "<int:+1.6>"
    assert intensity_token(-0.04) == "<int:+0.0>"
    assert intensity_token(-3.0) == "<int:-3.0>"


def test_serialize_incomplete_label_raises():
    with pytest.raises(LabelError, match="emotion"):
        serialize_ul(UniversalLabel(polarity=Polarity.POSITIVE, intensity=1.6))


def test_decode_strips_bos_and_stops_at_first_eos():
    tokens = [BOS, "<pol:positive>", "<int:+1.6>", "<emo:joy>", EOS, "<emo:anger>"]
    decoded = decode_prediction(tokens, Task.ERC)
    assert decoded.value == "joy"
    assert decoded.well_formed


def test_malformed_sequence_falls_back_or_raises():
    truncated = ["<pol:positive>", EOS, "<int:+1.6>", "<emo:joy>"]
    msa = decode_prediction(truncated, Task.MSA)
    erc = decode_prediction(["<pol:positive>", "<int:+1.6>", "<int:+1.0>"], Task.ERC)
    assert (msa.value, msa.well_formed) == (0.0, False)
    assert (erc.value, erc.well_formed) == ("neutral", False)
    with pytest.raises(LabelError):
        decode_prediction(truncated, Task.MSA, fallback=False)
