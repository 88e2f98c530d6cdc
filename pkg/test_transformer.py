from dataclasses import replace

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.special import expit

from unimse import numcore as nc
from unimse.datapipe import collate
from unimse.errors import CheckpointError, ConfigError, ShapeError
from unimse.models import ModelConfig
from unimse.numcore import Graph, Tensor, grad_check, parameter
from unimse.transformer import GROUPS, PMFParams, UniMSE, conv_project, modality_encode, pmf_fuse

from conftest import TINY_MODEL


# ============= MODALITY ENCODER =============

def test_single_step_lstm_last_state_is_the_only_state(rng):
    weight, bias = Tensor(rng.normal(size=(3 + 4, 16))), Tensor(rng.normal(size=16))
    states, last = modality_encode(rng.normal(size=(2, 1, 3)), np.array([1, 1]), weight, bias)
    assert states.shape == (2, 1, 4)
    np.testing.assert_array_equal(states.data[:, 0], last.data)


def test_lstm_matches_reference_gates(rng):
    x = rng.normal(size=(1, 3, 2))
    w, b = rng.normal(size=(2 + 3, 12)), rng.normal(size=12)
    h, c = np.zeros(3), np.zeros(3)
    for t in range(3):
        z = np.concatenate([x[0, t], h]) @ w + b
        i, f, g, o = expit(z[:3]), expit(z[3:6]), np.tanh(z[6:9]), expit(z[9:])
        c = f * c + i * g
        h = o * np.tanh(c)
    _, last = modality_encode(x, np.array([3]), Tensor(w), Tensor(b))
    np.testing.assert_allclose(last.data[0], h, atol=1e-12)


def test_zero_input_with_zero_weights_gives_zero_state():
    states, last = modality_encode(np.zeros((1, 4, 2)), np.array([4]), Tensor(np.zeros((5, 12))), Tensor(np.zeros(12)))
    assert not states.data.any() and not last.data.any()


def test_padded_rows_keep_the_state_at_their_true_length(rng):
    w, b = Tensor(rng.normal(size=(2 + 3, 12))), Tensor(rng.normal(size=12))
    short = rng.normal(size=(1, 2, 2))
    padded = np.concatenate([np.concatenate([short, np.zeros((1, 3, 2))], axis=1), rng.normal(size=(1, 5, 2))])
    _, alone = modality_encode(short, np.array([2]), w, b)
    _, together = modality_encode(padded, np.array([2, 5]), w, b)
    np.testing.assert_allclose(together.data[0], alone.data[0], atol=1e-12)


# ============= PMF ADAPTER =============

def _pmf(wd, bd, wu, bu, w):
    return PMFParams(*(Tensor(np.asarray(v, dtype=float)) for v in (wd, bd, wu, bu, w)))


def test_pmf_with_zero_projections_and_identity_output_is_identity(rng):
    fused = Tensor(rng.normal(size=(2, 3, 4)))
    params = _pmf(np.zeros((4 + 2 + 2, 3)), np.zeros(3), np.zeros((3, 4)), np.zeros(4), np.eye(4))
    out = pmf_fuse(fused, Tensor(rng.normal(size=(2, 2))), Tensor(rng.normal(size=(2, 2))), params)
    np.testing.assert_allclose(out.data, fused.data, atol=1e-15)


def test_pmf_scalar_case():
    params = _pmf(np.ones((3, 1)), [1.0], [[1.0]], [1.0], [[1.0]])
    out = pmf_fuse(Tensor([[1.0]]), Tensor([[1.0]]), Tensor([[1.0]]), params)
    assert out.data[0, 0] == pytest.approx(2.982014, abs=1e-6)
    assert out.data[0, 0] == pytest.approx(expit(4.0) + 2.0, abs=1e-15)


def test_pmf_rejects_wrong_down_projection_width(rng):
    params = _pmf(np.zeros((6, 2)), np.zeros(2), np.zeros((2, 3)), np.zeros(3), np.eye(3))
    with pytest.raises(ShapeError) as excinfo:
        pmf_fuse(Tensor(np.zeros((2, 3))), Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2))), params)
    assert excinfo.value.op == "pmf_fuse.W_d"


def test_pmf_gradients(rng):
    names = ("wd", "bd", "wu", "bu", "w")
    shapes = ((3 + 2 + 2, 2), (2,), (2, 3), (3,), (3, 3))
    params = {n: parameter(rng.normal(size=s), name=n) for n, s in zip(names, shapes)}
    fused = parameter(rng.normal(size=(2, 4, 3)), name="fused")
    a, v = parameter(rng.normal(size=(2, 2)), name="a"), parameter(rng.normal(size=(2, 2)), name="v")
    weights = rng.normal(size=(2, 4, 3))

    def build():
        return nc.sum(pmf_fuse(fused, a, v, PMFParams(*(params[n] for n in names))) * weights)

    report = grad_check(Graph(build), {**params, "fused": fused, "a": a, "v": v})
    assert report.passed, report.failures[:3]


# ============= CONTRASTIVE PROJECTION =============

def test_identity_kernel_projection_is_masked_mean_over_common_length(rng):
    x = rng.normal(size=(2, 5, 3))
    identity = Tensor(np.eye(3)[None])
    pooled = conv_project(Tensor(x), np.array([2, 5]), identity, Tensor(np.zeros(3)), common_length=3).data
    np.testing.assert_allclose(pooled[0], x[0, :2].mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(pooled[1], x[1, :3].mean(axis=0), atol=1e-12)

    short = conv_project(Tensor(x[:1, :2]), np.array([2]), identity, Tensor(np.zeros(3)), common_length=4).data
    np.testing.assert_allclose(short[0], x[0, :2].mean(axis=0), atol=1e-12)

    with pytest.raises(ConfigError):
        conv_project(Tensor(x), np.array([2, 5]), identity, Tensor(np.zeros(3)), common_length=0)


# ============= MODEL =============

def test_parameters_fall_into_exactly_one_group(model):
    groups = model.groups()
    assert set(groups) == set(GROUPS)
    assert sum(len(g) for g in groups.values()) == len(model.params)
    assert "encoder.1.pmf.w" in groups["pmf"]
    assert "encoder.0.pmf.w" in groups["pmf"]
    assert {"lstm.acoustic.w", "cl.visual.b", "cl.fusion.1.w"} <= set(groups["main"])
    assert "embed.token" in groups["backbone"]
    assert model.cl_layers == [1]


def test_adapter_output_map_starts_near_identity(model):
    w = model.params["encoder.1.pmf.w"].data
    assert np.abs(w - np.eye(w.shape[0])).max() < 1.0


def test_forward_shapes(model, batch, vocab):
    out = model.forward(batch)
    assert out.logits.shape == (4, 4, len(vocab))
    assert len(out.encoder.fusion_states) == 2
    assert len(out.projections) == 1
    assert out.projections[0].fused.shape == (4, TINY_MODEL["d_common"])


def test_attention_ignores_padding(model, batch):
    out = model.forward(batch)
    for weights in out.encoder.attention:
        pad_keys = batch.source_mask[:, None, None, :] == 0
        assert np.all(np.where(np.broadcast_to(pad_keys, weights.shape), weights, 0.0) == 0.0)

    noisy_ids = batch.source_ids.copy()
    noisy_segments = batch.segment_ids.copy()
    padding = batch.source_mask == 0
    assert padding.any()
    noisy_ids[padding] = 7
    noisy_segments[padding] = 1
    noisy = replace(batch, source_ids=noisy_ids, segment_ids=noisy_segments)
    changed = model.forward(noisy)

    np.testing.assert_allclose(changed.logits.data, out.logits.data, atol=1e-12)
    real = batch.source_mask > 0
    np.testing.assert_allclose(changed.encoder.states.data[real], out.encoder.states.data[real], atol=1e-12)


def test_same_seed_gives_identical_model_and_outputs(model_config, vocab, batch):
    first, second = UniMSE(model_config, len(vocab), seed=3), UniMSE(model_config, len(vocab), seed=3)
    assert all(np.array_equal(first.params[k].data, second.params[k].data) for k in first.params)
    np.testing.assert_array_equal(first.forward(batch).logits.data, second.forward(batch).logits.data)
    other = UniMSE(model_config, len(vocab), seed=4)
    assert not np.array_equal(first.params["embed.token"].data, other.params["embed.token"].data)


def test_generation_stops_at_forced_eos(model, batch, vocab):
    model.params["head.w"].data[:] = 0.0
    model.params["head.b"].data[:] = 0.0
    model.params["head.b"].data[vocab.eos_id] = 5.0
    assert model.generate(batch, vocab.bos_id, vocab.eos_id) == [[vocab.eos_id]] * batch.size


def test_generation_ties_pick_lowest_id_and_respect_max_length(model, batch, vocab):
    model.params["head.w"].data[:] = 0.0
    model.params["head.b"].data[:] = 0.0
    generated = model.generate(batch, vocab.bos_id, vocab.eos_id)
    assert generated == [[0] * TINY_MODEL["max_target_length"]] * batch.size
    assert model.generate(batch, vocab.bos_id, vocab.eos_id, max_length=2) == [[0, 0]] * batch.size


def test_model_without_fusion_has_no_modality_parameters(vocab, batch):
    config = ModelConfig(**{**TINY_MODEL, "n_fusion": 0, "n_cl": 0})
    model = UniMSE(config, len(vocab))
    assert not [n for n in model.params if n.startswith(("lstm.", "cl.")) or ".pmf." in n]
    out = model.forward(batch)
    assert out.encoder.fusion_states == [] and out.projections == []


def test_invalid_layer_counts_are_rejected():
    with pytest.raises(ValidationError):
        ModelConfig(**{**TINY_MODEL, "n_cl": 3})
    with pytest.raises(ValidationError):
        ModelConfig(**{**TINY_MODEL, "n_heads": 3})


def test_source_longer_than_position_table_raises(vocab, inputs):
    model = UniMSE(ModelConfig(**{**TINY_MODEL, "max_source_length": 2}), len(vocab))
    with pytest.raises(ShapeError):
        model.encoder_forward(collate(inputs[:2], vocab))


def test_state_dict_load_checks_layout(model, model_config, vocab):
    state = model.state_dict()
    fresh = UniMSE(model_config, len(vocab), seed=99)
    fresh.load_state_dict(state)
    assert all(np.array_equal(fresh.params[k].data, state[k]) for k in state)

    state.pop("head.b")
    state["extra"] = np.zeros(2)
    with pytest.raises(CheckpointError) as excinfo:
        fresh.load_state_dict(state)
    assert set(excinfo.value.mismatched) == {"head.b", "extra"}


def test_pooled_fusion_per_adapter_layer(model, batch):
    pooled = model.pooled_fusion(batch, 1)
    assert pooled.shape == (batch.size, TINY_MODEL["d_model"])
    assert not np.allclose(pooled, model.pooled_fusion(batch, 2))
    with pytest.raises(ConfigError):
        model.pooled_fusion(batch, 3)
