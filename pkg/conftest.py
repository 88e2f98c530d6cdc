import numpy as np
import pytest
import yaml

from unimse.datapipe import collate, complete_manifest, corpus_texts, formalize_manifest, synthesize_dataset
from unimse.models import ModelConfig, Split, SynthConfig, Task
from unimse.textcodec import build_vocab
from unimse.transformer import UniMSE
from unimse.unilabel import get_oracle

TINY_MODEL = dict(
    d_model=8, n_heads=2, n_encoder_layers=2, n_decoder_layers=2, d_ff=16,
    d_acoustic_in=3, d_acoustic=4, d_visual_in=3, d_visual=4,
    n_fusion=2, n_cl=1, d_common=4, common_length=3, max_target_length=6,
)

TINY_RUN = {
    "model": TINY_MODEL,
    "synth": {
        "n_msa": {"train": 8, "valid": 4, "test": 4},
        "n_erc": {"train": 8, "valid": 4, "test": 4},
        "d_acoustic": 3, "d_visual": 3, "filler_vocab": 10,
        "text_min_words": 1, "text_max_words": 3, "min_frames": 2, "max_frames": 4, "dialogue_length": 3,
    },
    "batch_size": 4,
    "epochs": 2,
    "eval_every": 1,
    "neutral_pool_fallback": True,
}


@pytest.fixture
def run_config_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY_RUN))
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def synth_config():
    return SynthConfig(
        n_msa={Split.TRAIN: 6, Split.VALID: 2, Split.TEST: 2},
        n_erc={Split.TRAIN: 6, Split.VALID: 2, Split.TEST: 2},
        filler_vocab=10, text_min_words=2, text_max_words=3,
        d_acoustic=3, d_visual=3, min_frames=2, max_frames=4, dialogue_length=3,
    )


@pytest.fixture
def unified(synth_config):
    raw = synthesize_dataset(synth_config, seed=7)
    manifest, _, _ = complete_manifest(
        raw.select(lambda r: r.task == Task.MSA),
        raw.select(lambda r: r.task == Task.ERC),
        get_oracle("bow-cosine"),
        widen=True,
    )
    return manifest


@pytest.fixture
def vocab(unified):
    return build_vocab(corpus_texts(unified))


@pytest.fixture
def inputs(unified, vocab):
    return formalize_manifest(unified, vocab)


@pytest.fixture
def batch(inputs, vocab):
    # two MSA and two ERC samples
    msa = [x for x in inputs if x.task == Task.MSA][:2]
    erc = [x for x in inputs if x.task == Task.ERC][:2]
    return collate(msa + erc, vocab)


@pytest.fixture
def model_config():
    return ModelConfig(**TINY_MODEL)


@pytest.fixture
def model(model_config, vocab):
    return UniMSE(model_config, vocab_size=len(vocab), seed=3)
