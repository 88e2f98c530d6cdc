import json

import numpy as np
import pytest

from unimse.datapipe import (
    CUE_WORDS,
    FeatureSequence,
    Manifest,
    batch_iter,
    collate,
    cue_prototypes,
    formalize_context,
    load_manifest,
    planted_emotion,
    planted_intensity,
    read_features,
    synthesize_dataset,
    write_features,
    write_manifest,
)
from unimse.errors import ConfigError, ManifestError
from unimse.models import EMOTION_POLARITY, ManifestRecord, Polarity, Split, SynthConfig, Task, polarity_of_intensity
from unimse.textcodec import SEP, UNK


def _small_synth(**overrides):
    base = dict(n_msa={Split.TRAIN: 5}, n_erc={Split.TRAIN: 5}, d_acoustic=3, d_visual=2,
                min_frames=2, max_frames=4, dialogue_length=3)
    base.update(overrides)
    return SynthConfig(**base)


# ============= FEATURE FILES =============

def test_feature_file_preserves_float32_values_and_header(tmp_path, rng):
    values = rng.normal(size=(5, 3)).astype(np.float32)
    path = tmp_path / "x.umse"
    write_features(path, values)

    raw = path.read_bytes()
    assert raw[:4] == b"UMSE" and raw[4] == 1
    assert len(raw) == 4 + 1 + 8 + 5 * 3 * 4
    seq = read_features(path)
    assert (seq.length, seq.dim) == (5, 3)
    assert np.array_equal(seq.values, values.astype(np.float64))


def test_wide_feature_file_is_exact_for_float64(tmp_path, rng):
    values = rng.normal(size=(4, 7))
    write_features(tmp_path / "wide.umse", values, wide=True)
    assert np.array_equal(read_features(tmp_path / "wide.umse").values, values)


def test_malformed_feature_files_are_rejected(tmp_path):
    (tmp_path / "magic.umse").write_bytes(b"NOPE" + bytes(9))
    with pytest.raises(ValueError, match="header"):
        read_features(tmp_path / "magic.umse")

    write_features(tmp_path / "short.umse", np.ones((3, 2)))
    (tmp_path / "short.umse").write_bytes((tmp_path / "short.umse").read_bytes()[:-4])
    with pytest.raises(ValueError, match="bytes"):
        read_features(tmp_path / "short.umse")

    (tmp_path / "version.umse").write_bytes(b"UMSE" + bytes([7]) + bytes(8))
    with pytest.raises(ValueError, match="version"):
        read_features(tmp_path / "version.umse")

    with pytest.raises(ValueError):
        FeatureSequence(np.zeros((0, 3)))


# ============= MANIFESTS =============

def test_manifest_write_and_load_is_idempotent(tmp_path):
    manifest = synthesize_dataset(_small_synth(), seed=3)
    first = load_manifest(write_manifest(manifest, tmp_path / "a" / "manifest.jsonl"))
    assert first == manifest
    second = load_manifest(write_manifest(first, tmp_path / "b" / "manifest.jsonl"), n_jobs=2)
    assert second == first
    assert (tmp_path / "a" / "manifest.jsonl").read_bytes() == (tmp_path / "b" / "manifest.jsonl").read_bytes()


def test_manifest_errors_are_aggregated(tmp_path):
    manifest = synthesize_dataset(_small_synth(), seed=3)
    path = write_manifest(manifest, tmp_path / "manifest.jsonl")
    lines = path.read_text().splitlines()

    broken = json.loads(lines[0])
    broken["mood"] = "sunny"
    missing = json.loads(lines[1])
    missing["acoustic_path"] = "features/nowhere.umse"
    lines[0], lines[1] = json.dumps(broken), json.dumps(missing)
    lines.append(lines[2])
    path.write_text("\n".join(lines) + "\n")

    with pytest.raises(ManifestError) as excinfo:
        load_manifest(path)
    errors = excinfo.value.errors
    assert set(errors) == {"line 1", missing["id"], json.loads(lines[2])["id"]}
    assert "duplicate" in errors[json.loads(lines[2])["id"]]
    assert "not found" in errors[missing["id"]]


def test_manifest_rejects_inconsistent_dimensions(tmp_path):
    manifest = synthesize_dataset(_small_synth(), seed=3)
    path = write_manifest(manifest, tmp_path / "manifest.jsonl")
    second = manifest.records[1]
    write_features(tmp_path / second.visual_path, np.ones((2, 5)))
    with pytest.raises(ManifestError) as excinfo:
        load_manifest(path)
    assert list(excinfo.value.errors) == [second.id]


# ============= FORMALIZATION =============

def test_erc_context_window_and_segments():
    dialogue = ["hi there", "how are you", "fine", "great news", "bye", "see you"]
    first = formalize_context(dialogue, 0, Task.ERC)
    assert first.tokens == ["hi", "there", SEP, "how", "are", "you", SEP, "fine"]
    assert first.segment_ids == [1, 1, 0, 0, 0, 0, 0, 0]

    middle = formalize_context(dialogue, 3, Task.ERC)
    assert middle.text == f"how are you {SEP} fine {SEP} great news {SEP} bye {SEP} see you"
    assert [t for t, s in zip(middle.tokens, middle.segment_ids) if s == 1] == ["great", "news"]


def test_msa_takes_only_the_current_utterance():
    out = formalize_context(["before", "The movie was GREAT", "after"], 1, Task.MSA)
    assert out.tokens == ["the", "movie", "was", "great"]
    assert out.segment_ids == [1, 1, 1, 1]


def test_empty_utterance_becomes_unknown_token():
    out = formalize_context(["hello", ""], 1, Task.ERC)
    assert out.tokens == ["hello", SEP, UNK]
    assert out.segment_ids == [0, 0, 1]
    with pytest.raises(IndexError):
        formalize_context(["x"], 1, Task.MSA)


def test_formalized_inputs_carry_targets(inputs, vocab):
    for x in inputs:
        assert len(x.token_ids) == len(x.segment_ids)
        assert 1 in x.segment_ids
        assert x.target_ids is not None and len(x.target_ids) == 4
        assert x.target_ids[-1] == vocab.eos_id


# ============= BATCHING =============

def test_batch_sizes_and_deterministic_order(inputs, vocab):
    ten = inputs[:10]
    sizes = [b.size for b in batch_iter(ten, 4, vocab, seed=5)]
    assert sizes == [4, 4, 2]
    first = [b.ids for b in batch_iter(ten, 4, vocab, seed=5)]
    second = [b.ids for b in batch_iter(ten, 4, vocab, seed=5)]
    assert first == second
    assert sorted(i for ids in first for i in ids) == sorted(x.id for x in ten)


def test_contrastive_batching_needs_two_samples(inputs, vocab):
    with pytest.raises(ConfigError):
        list(batch_iter(inputs, 1, vocab, cl_enabled=True))
    sizes = [b.size for b in batch_iter(inputs[:9], 4, vocab, seed=0, cl_enabled=True)]
    assert sizes == [4, 5]


def test_single_sample_split_is_rejected_under_contrastive_learning(inputs, vocab):
    with pytest.raises(ConfigError, match="at least 2 samples"):
        list(batch_iter(inputs[:1], 8, vocab, cl_enabled=True))
    assert [b.size for b in batch_iter(inputs[:1], 8, vocab)] == [1]
    assert [b.size for b in batch_iter(inputs[:2], 8, vocab, cl_enabled=True)] == [2]


def test_collate_pads_text_and_features(inputs, vocab):
    batch = collate(inputs[:3], vocab)
    for k, x in enumerate(inputs[:3]):
        n = len(x.token_ids)
        assert batch.source_mask[k].sum() == n
        assert np.all(batch.source_ids[k, n:] == vocab.pad_id)
        assert np.all(batch.segment_ids[k, n:] == 0)
        assert batch.acoustic_lengths[k] == x.acoustic.length
        assert np.all(batch.acoustic[k, x.acoustic.length:] == 0.0)
        assert batch.target_in[k, 0] == vocab.bos_id
        assert list(batch.target_in[k, 1:4]) == list(x.target_ids[:3])

    dropped = batch.drop_modality("av")
    assert not dropped.acoustic.any() and not dropped.visual.any()
    assert np.array_equal(batch.drop_modality("a").visual, batch.visual)


# ============= SYNTHETIC CORPUS =============

def test_synthesis_is_deterministic_per_seed():
    config = _small_synth()
    assert synthesize_dataset(config, seed=11) == synthesize_dataset(config, seed=11)
    assert synthesize_dataset(config, seed=11) != synthesize_dataset(config, seed=12)


def test_polarity_frequencies_follow_weights():
    config = _small_synth(n_msa={Split.TRAIN: 10_000}, n_erc={}, polarity_weights=[2.0, 1.0, 1.0],
                          min_frames=1, max_frames=1)
    manifest = synthesize_dataset(config, seed=0)
    polarities = [polarity_of_intensity(r.intensity) for r in manifest.records]
    n = len(polarities)
    assert n == 10_000
    for polarity, p in ((Polarity.NEGATIVE, 0.5), (Polarity.POSITIVE, 0.25)):
        assert abs(polarities.count(polarity) / n - p) < 3 * np.sqrt(p * (1 - p) / n)


def test_erc_records_get_dialogue_context():
    manifest = synthesize_dataset(_small_synth(n_msa={}, n_erc={Split.TRAIN: 6}), seed=0)
    texts = [r.text for r in manifest.records]
    third = manifest.records[2]
    assert third.context_before == texts[:2]
    assert third.context_after == []
    assert manifest.records[3].context_before == []
    assert manifest.records[3].context_after == texts[4:6]
    assert all(EMOTION_POLARITY[r.emotion] for r in manifest.records)


def _decode_cues(manifest, protos):
    """Cue-reading oracle: polarity from the cue word, digits from the nearest prototype"""
    words = {w: p for p, w in CUE_WORDS.items()}
    decoded = []
    for record in manifest.records:
        cue = next(words[w] for w in record.text.split() if w in words)
        acoustic, visual = manifest.features[record.id]
        a = int(np.argmax(protos["acoustic"] @ acoustic.values.mean(axis=0)))
        v = int(np.argmax(protos["visual"] @ visual.values.mean(axis=0)))
        decoded.append((record, cue, a, v))
    return decoded


def test_planted_cues_are_recoverable_and_modalities_add_information():
    config = _small_synth(n_msa={Split.TRAIN: 400}, n_erc={Split.TRAIN: 400}, d_acoustic=8, d_visual=8,
                          min_frames=8, max_frames=12, signal_strength=3.0)
    manifest = synthesize_dataset(config, seed=4)
    decoded = _decode_cues(manifest, cue_prototypes(config, seed=4))

    def accuracy(use_a, use_v):
        hits = 0
        for record, cue, a, v in decoded:
            a, v = (a if use_a else 0), (v if use_v else 0)
            if record.task == Task.MSA:
                hits += planted_intensity(cue, a, v) == record.intensity
            else:
                hits += planted_emotion(cue, a, v) == record.emotion
        return hits / len(decoded)

    text_only, with_acoustic, full = accuracy(False, False), accuracy(True, False), accuracy(True, True)
    assert full > 0.95
    assert full > with_acoustic > text_only


def test_zero_signal_text_cue_is_uninformative():
    config = _small_synth(n_msa={Split.TRAIN: 1500}, n_erc={}, signal_strength=0.0)
    manifest = synthesize_dataset(config, seed=2)
    words = {w: p for p, w in CUE_WORDS.items()}
    agree = sum(
        next(words[w] for w in r.text.split() if w in words) == polarity_of_intensity(r.intensity)
        for r in manifest.records
    ) / len(manifest.records)
    assert abs(agree - 1 / 3) < 0.06


def test_select_keeps_features_for_kept_records():
    manifest = synthesize_dataset(_small_synth(), seed=1)
    msa = manifest.select(lambda r: r.task == Task.MSA)
    assert isinstance(msa, Manifest)
    assert all(isinstance(r, ManifestRecord) and r.task == Task.MSA for r in msa.records)
    assert set(msa.features) == {r.id for r in msa.records}
