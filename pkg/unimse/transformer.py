"""
Encoder-decoder transformer with LSTM modality encoders, PMF adapters and contrastive projections
Parameters are plain numcore tensors keyed by dotted names and split into three optimizer groups
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from unimse import numcore as nc
from unimse.datapipe import Batch
from unimse.errors import CheckpointError, ConfigError, ShapeError
from unimse.models import ModelConfig
from unimse.numcore import MASK_VALUE, Tensor

GROUPS = ("backbone", "main", "pmf")


# ============= BUILDING BLOCKS =============

@dataclass(frozen=True)
class PMFParams:
    """One adapter: down-projection, up-projection and output map"""
    wd: Tensor  # (d_t + d_a + d_v, bottleneck)
    bd: Tensor
    wu: Tensor  # (bottleneck, d_t)
    bu: Tensor
    w: Tensor   # (d_t, d_t)


@dataclass(frozen=True)
class CLParams:
    """Temporal convolutions mapping each stream to the common width"""
    acoustic_w: Tensor
    acoustic_b: Tensor
    visual_w: Tensor
    visual_b: Tensor
    fusion_w: Tensor
    fusion_b: Tensor


def modality_encode(features, lengths: np.ndarray, weight: Tensor, bias: Tensor) -> Tuple[Tensor, Tensor]:
    """
    Single-layer LSTM over (batch, time, d_in) features

    weight is (d_in + d_h, 4 d_h) with gates ordered input, forget, cell, output.
    Steps past a row's true length carry the state forward, so the returned last
    state is the state at the true length.
    """
    x = nc.as_tensor(features)
    lengths = np.asarray(lengths, dtype=np.int64)
    if x.ndim != 3 or x.shape[1] < 1 or lengths.shape != (x.shape[0],):
        raise ShapeError("modality_encode", x.shape, lengths.shape)
    if np.any(lengths < 1):
        raise ShapeError("modality_encode", x.shape, lengths.shape,
                         detail="modality_encode needs sequences of length >= 1")
    batch, steps, d_in = x.shape
    hidden = weight.shape[1] // 4
    if weight.shape != (d_in + hidden, 4 * hidden) or bias.shape != (4 * hidden,):
        raise ShapeError("modality_encode", x.shape, weight.shape, bias.shape)

    h = Tensor(np.zeros((batch, hidden)))
    c = Tensor(np.zeros((batch, hidden)))
    states = []
    for t in range(steps):
        z = nc.concat([x[:, t, :], h], axis=-1) @ weight + bias
        i = nc.sigmoid(z[:, 0:hidden])
        f = nc.sigmoid(z[:, hidden:2 * hidden])
        g = nc.tanh(z[:, 2 * hidden:3 * hidden])
        o = nc.sigmoid(z[:, 3 * hidden:])
        c_next = f * c + i * g
        h_next = o * nc.tanh(c_next)
        live = (t < lengths).astype(np.float64)[:, None]
        if live.all():
            h, c = h_next, c_next
        else:
            h = h_next * live + h * (1.0 - live)
            c = c_next * live + c * (1.0 - live)
        states.append(nc.reshape(h, (batch, 1, hidden)))
    return nc.concat(states, axis=1), h


def pmf_fuse(fused: Tensor, acoustic_last: Tensor, visual_last: Tensor, params: PMFParams) -> Tensor:
    """
    W([F, a, v] -> sigmoid down -> up  +  F), with a and v row-replicated over every position

    fused is (..., l_t, d_t); acoustic_last and visual_last are (..., d_a) and (..., d_v).
    """
    lead = fused.shape[:-1]

    def rows(summary: Tensor) -> Tensor:
        if summary.ndim == fused.ndim - 1:
            summary = nc.reshape(summary, summary.shape[:-1] + (1, summary.shape[-1]))
        return nc.broadcast_to(summary, lead + (summary.shape[-1],))

    joint = nc.concat([fused, rows(acoustic_last), rows(visual_last)], axis=-1)
    for name, (expected, got) in (("W_d", (joint.shape[-1], params.wd.shape[0])),
                                  ("W_u", (params.wd.shape[1], params.wu.shape[0])),
                                  ("W", (fused.shape[-1], params.w.shape[0]))):
        if expected != got:
            raise ShapeError(f"pmf_fuse.{name}", joint.shape, params.wd.shape, params.wu.shape,
                             params.w.shape, detail=f"PMF projection {name} expects input width {got}, got {expected}")
    down = nc.sigmoid(joint @ params.wd + params.bd)
    up = down @ params.wu + params.bu
    out = (up + fused) @ params.w
    if out.shape != fused.shape:
        raise ShapeError("pmf_fuse.W", fused.shape, out.shape)
    return out


def _fit_length(x: Tensor, length: int) -> Tensor:
    """Truncate or zero-pad the time axis to `length`"""
    if x.shape[1] > length:
        return x[:, :length, :]
    if x.shape[1] < length:
        pad = Tensor(np.zeros((x.shape[0], length - x.shape[1], x.shape[2])))
        return nc.concat([x, pad], axis=1)
    return x


def conv_project(x: Tensor, lengths: np.ndarray, weight: Tensor, bias: Tensor, common_length: int) -> Tensor:
    """Conv to the common width, fit to the common length, masked mean over time"""
    if common_length < 1:
        raise ConfigError("common_length must be >= 1", {"common_length": common_length})
    projected = _fit_length(nc.conv1d(x, weight, bias), common_length)
    valid = np.minimum(np.asarray(lengths, dtype=np.int64), common_length)
    mask = (np.arange(common_length)[None, :] < valid[:, None]).astype(np.float64)
    return nc.mean_pool(projected, mask)


def project_for_cl(acoustic: Tensor, acoustic_lengths: np.ndarray, visual: Tensor,
                   visual_lengths: np.ndarray, fused: Tensor, fused_lengths: np.ndarray,
                   params: CLParams, common_length: int) -> Tuple[Tensor, Tensor, Tensor]:
    """Pooled (F-hat, X-hat acoustic, X-hat visual), each (batch, d_c)"""
    return (
        conv_project(fused, fused_lengths, params.fusion_w, params.fusion_b, common_length),
        conv_project(acoustic, acoustic_lengths, params.acoustic_w, params.acoustic_b, common_length),
        conv_project(visual, visual_lengths, params.visual_w, params.visual_b, common_length),
    )


def _attention_bias(key_mask: np.ndarray) -> np.ndarray:
    """(batch, keys) 0/1 mask -> (batch, 1, 1, keys) additive bias"""
    return np.where(key_mask[:, None, None, :] > 0, 0.0, MASK_VALUE)


# ============= OUTPUT RECORDS =============

@dataclass
class ModalityStates:
    acoustic: Tensor
    acoustic_last: Tensor
    acoustic_lengths: np.ndarray
    visual: Tensor
    visual_last: Tensor
    visual_lengths: np.ndarray


@dataclass
class EncoderOutput:
    states: Tensor
    source_mask: np.ndarray
    fusion_states: List[Tensor] = field(default_factory=list)
    attention: List[np.ndarray] = field(default_factory=list)
    modalities: Optional[ModalityStates] = None

    @property
    def lengths(self) -> np.ndarray:
        return self.source_mask.sum(axis=1).astype(np.int64)


@dataclass
class CLProjection:
    layer: int
    fused: Tensor
    acoustic: Tensor
    visual: Tensor


@dataclass
class ForwardOutput:
    logits: Tensor
    encoder: EncoderOutput
    projections: List[CLProjection] = field(default_factory=list)


# ============= MODEL =============

class UniMSE:
    """
    Pre-norm encoder-decoder over word ids with learned positions and segment embeddings

    The last n_fusion encoder layers wrap their feed-forward output in a PMF adapter;
    the last n_cl of those feed the contrastive projections.
    """

    def __init__(self, config: ModelConfig, vocab_size: Optional[int] = None, seed: int = 0):
        self.config = config
        self.vocab_size = vocab_size or config.vocab_size
        if self.vocab_size < 1:
            raise ConfigError("Model needs a positive vocab_size")
        self.params: Dict[str, Tensor] = {}
        self._rng = np.random.default_rng(seed)
        self._build()
        del self._rng

    # ---------- parameter construction ----------

    def _weight(self, name: str, shape: Tuple[int, ...]) -> None:
        self.params[name] = nc.parameter(self._rng.normal(0.0, self.config.init_std, size=shape), name=name)

    def _const(self, name: str, shape: Tuple[int, ...], value: float = 0.0) -> None:
        self.params[name] = nc.parameter(np.full(shape, value), name=name)

    def _layer_norm(self, prefix: str, width: int) -> None:
        self._const(f"{prefix}.gain", (width,), 1.0)
        self._const(f"{prefix}.bias", (width,))

    def _sublayers(self, prefix: str, cross: bool) -> None:
        d = self.config.d_model
        attentions = ("self_attn", "cross_attn") if cross else ("self_attn",)
        for k, attn in enumerate(attentions, start=1):
            self._layer_norm(f"{prefix}.ln{k}", d)
            for proj in ("wq", "wk", "wv", "wo"):
                self._weight(f"{prefix}.{attn}.{proj}", (d, d))
        self._layer_norm(f"{prefix}.ln_ff", d)
        self._weight(f"{prefix}.ffn.w1", (d, self.config.d_ff))
        self._const(f"{prefix}.ffn.b1", (self.config.d_ff,))
        self._weight(f"{prefix}.ffn.w2", (self.config.d_ff, d))
        self._const(f"{prefix}.ffn.b2", (d,))

    def _adapter(self, prefix: str) -> None:
        cfg = self.config
        width = cfg.d_model + cfg.d_acoustic + cfg.d_visual
        self._weight(f"{prefix}.pmf.wd", (width, cfg.bottleneck_width))
        self._const(f"{prefix}.pmf.bd", (cfg.bottleneck_width,))
        self._weight(f"{prefix}.pmf.wu", (cfg.bottleneck_width, cfg.d_model))
        self._const(f"{prefix}.pmf.bu", (cfg.d_model,))
        self.params[f"{prefix}.pmf.w"] = nc.parameter(
            np.eye(cfg.d_model) + self._rng.normal(0.0, cfg.init_std, size=(cfg.d_model, cfg.d_model)),
            name=f"{prefix}.pmf.w",
        )

    def _build(self) -> None:
        cfg = self.config
        d = cfg.d_model
        self._weight("embed.token", (self.vocab_size, d))
        self._weight("embed.source_position", (cfg.max_source_length, d))
        self._weight("embed.segment", (2, d))
        self._weight("embed.target_position", (cfg.max_target_length, d))

        for i in range(cfg.n_encoder_layers):
            self._sublayers(f"encoder.{i}", cross=False)
            if i in self.fusion_layers:
                self._adapter(f"encoder.{i}")
        self._layer_norm("encoder.ln_final", d)

        for i in range(cfg.n_decoder_layers):
            self._sublayers(f"decoder.{i}", cross=True)
            if cfg.decoder_pmf and i >= cfg.n_decoder_layers - cfg.n_fusion:
                self._adapter(f"decoder.{i}")
        self._layer_norm("decoder.ln_final", d)
        self._weight("head.w", (d, self.vocab_size))
        self._const("head.b", (self.vocab_size,))

        if cfg.n_fusion > 0:
            for stream, d_in, d_h in (("acoustic", cfg.d_acoustic_in, cfg.d_acoustic),
                                      ("visual", cfg.d_visual_in, cfg.d_visual)):
                self._weight(f"lstm.{stream}.w", (d_in + d_h, 4 * d_h))
                self._const(f"lstm.{stream}.b", (4 * d_h,))
        if cfg.n_cl > 0:
            self._weight("cl.acoustic.w", (cfg.kernel_acoustic, cfg.d_acoustic, cfg.d_common))
            self._const("cl.acoustic.b", (cfg.d_common,))
            self._weight("cl.visual.w", (cfg.kernel_visual, cfg.d_visual, cfg.d_common))
            self._const("cl.visual.b", (cfg.d_common,))
            for j in self.cl_layers:
                self._weight(f"cl.fusion.{j}.w", (cfg.kernel_fusion, d, cfg.d_common))
                self._const(f"cl.fusion.{j}.b", (cfg.d_common,))

    # ---------- parameter access ----------

    @property
    def fusion_layers(self) -> List[int]:
        """Encoder layer indices carrying an adapter"""
        n = self.config.n_encoder_layers
        return list(range(n - self.config.n_fusion, n))

    @property
    def cl_layers(self) -> List[int]:
        return self.fusion_layers[len(self.fusion_layers) - self.config.n_cl:]

    @staticmethod
    def group_of(name: str) -> str:
        if ".pmf." in name:
            return "pmf"
        if name.startswith(("lstm.", "cl.")):
            return "main"
        return "backbone"

    def groups(self) -> Dict[str, Dict[str, Tensor]]:
        out: Dict[str, Dict[str, Tensor]] = {g: {} for g in GROUPS}
        for name, p in self.params.items():
            out[self.group_of(name)][name] = p
        return out

    def pmf_params(self, prefix: str) -> PMFParams:
        p = self.params
        return PMFParams(p[f"{prefix}.pmf.wd"], p[f"{prefix}.pmf.bd"], p[f"{prefix}.pmf.wu"],
                         p[f"{prefix}.pmf.bu"], p[f"{prefix}.pmf.w"])

    def cl_params(self, layer: int) -> CLParams:
        p = self.params
        return CLParams(p["cl.acoustic.w"], p["cl.acoustic.b"], p["cl.visual.w"], p["cl.visual.b"],
                        p[f"cl.fusion.{layer}.w"], p[f"cl.fusion.{layer}.b"])

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, tensors: Dict[str, np.ndarray]) -> None:
        expected = {name: p.shape for name, p in self.params.items()}
        got = {name: tuple(np.shape(v)) for name, v in tensors.items()}
        mismatched = {k: (expected.get(k), got.get(k)) for k in set(expected) | set(got)
                      if expected.get(k) != got.get(k)}
        if mismatched:
            raise CheckpointError("Stored tensors do not match the model layout", mismatched)
        for name, value in tensors.items():
            self.params[name].data = np.array(value, dtype=np.float64)
            self.params[name].zero_grad()

    # ---------- sublayers ----------

    def _attend(self, prefix: str, query: Tensor, memory: Tensor, bias: np.ndarray) -> Tuple[Tensor, np.ndarray]:
        p = self.params
        heads = self.config.n_heads
        batch, lq, d = query.shape
        lk = memory.shape[1]
        dh = d // heads

        def split(x: Tensor, length: int) -> Tensor:
            return nc.transpose(nc.reshape(x, (batch, length, heads, dh)), (0, 2, 1, 3))

        q = split(query @ p[f"{prefix}.wq"], lq)
        k = split(memory @ p[f"{prefix}.wk"], lk)
        v = split(memory @ p[f"{prefix}.wv"], lk)
        scores = (q @ k.T) * (1.0 / np.sqrt(dh)) + bias
        weights = nc.softmax(scores, axis=-1)
        context = nc.reshape(nc.transpose(weights @ v, (0, 2, 1, 3)), (batch, lq, d))
        return context @ p[f"{prefix}.wo"], weights.data

    def _feed_forward(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        hidden = nc.gelu(x @ p[f"{prefix}.ffn.w1"] + p[f"{prefix}.ffn.b1"])
        return hidden @ p[f"{prefix}.ffn.w2"] + p[f"{prefix}.ffn.b2"]

    def _norm(self, prefix: str, x: Tensor) -> Tensor:
        return nc.layer_norm(x, self.params[f"{prefix}.gain"], self.params[f"{prefix}.bias"],
                             self.config.layer_norm_eps)

    def _layer(self, prefix: str, x: Tensor, self_bias: np.ndarray,
               memory: Optional[Tensor] = None, memory_bias: Optional[np.ndarray] = None,
               modalities: Optional[ModalityStates] = None) -> Tuple[Tensor, np.ndarray]:
        rate = self.config.dropout
        normed = self._norm(f"{prefix}.ln1", x)
        attended, weights = self._attend(f"{prefix}.self_attn", normed, normed, self_bias)
        x = x + nc.dropout(attended, rate)
        if memory is not None:
            crossed, _ = self._attend(f"{prefix}.cross_attn", self._norm(f"{prefix}.ln2", x), memory, memory_bias)
            x = x + nc.dropout(crossed, rate)
        ff = self._feed_forward(prefix, self._norm(f"{prefix}.ln_ff", x))
        if f"{prefix}.pmf.wd" in self.params and modalities is not None:
            ff = pmf_fuse(ff, modalities.acoustic_last, modalities.visual_last, self.pmf_params(prefix))
        return x + nc.dropout(ff, rate), weights

    # ---------- forward passes ----------

    def encode_modalities(self, batch: Batch) -> Optional[ModalityStates]:
        if self.config.n_fusion == 0:
            return None
        p = self.params
        a_states, a_last = modality_encode(batch.acoustic, batch.acoustic_lengths, p["lstm.acoustic.w"],
                                           p["lstm.acoustic.b"])
        v_states, v_last = modality_encode(batch.visual, batch.visual_lengths, p["lstm.visual.w"],
                                           p["lstm.visual.b"])
        return ModalityStates(a_states, a_last, batch.acoustic_lengths, v_states, v_last, batch.visual_lengths)

    def encoder_forward(self, batch: Batch) -> EncoderOutput:
        """Final encoder states plus the fusion state after every adapter layer"""
        cfg = self.config
        batch_size, length = batch.source_ids.shape
        if length > cfg.max_source_length:
            raise ShapeError("encoder_forward", batch.source_ids.shape, (cfg.max_source_length,),
                             detail=f"Source length {length} exceeds max_source_length {cfg.max_source_length}")
        p = self.params
        positions = np.broadcast_to(np.arange(length), (batch_size, length))
        x = (nc.embedding(p["embed.token"], batch.source_ids)
             + nc.embedding(p["embed.source_position"], positions)
             + nc.embedding(p["embed.segment"], batch.segment_ids))
        x = nc.dropout(x, cfg.dropout)

        modalities = self.encode_modalities(batch)
        bias = _attention_bias(batch.source_mask)
        out = EncoderOutput(states=x, source_mask=batch.source_mask, modalities=modalities)
        for i in range(cfg.n_encoder_layers):
            x, weights = self._layer(f"encoder.{i}", x, bias, modalities=modalities)
            out.attention.append(weights)
            if i in self.fusion_layers:
                out.fusion_states.append(x)
        out.states = self._norm("encoder.ln_final", x)
        return out

    def decoder_forward(self, target_in: np.ndarray, encoded: EncoderOutput) -> Tensor:
        """Next-token logits (batch, T, vocab) for BOS-shifted target ids"""
        cfg = self.config
        batch_size, length = target_in.shape
        if length > cfg.max_target_length:
            raise ShapeError("decoder_forward", target_in.shape, (cfg.max_target_length,),
                             detail=f"Target length {length} exceeds max_target_length {cfg.max_target_length}")
        p = self.params
        positions = np.broadcast_to(np.arange(length), (batch_size, length))
        y = nc.embedding(p["embed.token"], target_in) + nc.embedding(p["embed.target_position"], positions)
        y = nc.dropout(y, cfg.dropout)
        causal = np.triu(np.full((length, length), MASK_VALUE), k=1)[None, None]
        memory_bias = _attention_bias(encoded.source_mask)
        for i in range(cfg.n_decoder_layers):
            y, _ = self._layer(f"decoder.{i}", y, causal, memory=encoded.states,
                               memory_bias=memory_bias, modalities=encoded.modalities)
        y = self._norm("decoder.ln_final", y)
        return y @ p["head.w"] + p["head.b"]

    def contrastive_projections(self, encoded: EncoderOutput) -> List[CLProjection]:
        if self.config.n_cl == 0 or encoded.modalities is None:
            return []
        m = encoded.modalities
        projections = []
        for j in self.cl_layers:
            fused = encoded.fusion_states[self.fusion_layers.index(j)]
            f_hat, a_hat, v_hat = project_for_cl(m.acoustic, m.acoustic_lengths, m.visual, m.visual_lengths,
                                                 fused, encoded.lengths, self.cl_params(j),
                                                 self.config.common_length)
            projections.append(CLProjection(j, f_hat, a_hat, v_hat))
        return projections

    def forward(self, batch: Batch) -> ForwardOutput:
        if batch.target_in is None:
            raise ConfigError("Batch has no targets; complete its labels before training")
        encoded = self.encoder_forward(batch)
        logits = self.decoder_forward(batch.target_in, encoded)
        return ForwardOutput(logits, encoded, self.contrastive_projections(encoded))

    # ---------- inference ----------

    def generate(self, batch: Batch, bos_id: int, eos_id: int, max_length: Optional[int] = None) -> List[List[int]]:
        """
        Greedy decoding from BOS until EOS or max_length tokens

        argmax ties resolve to the lowest token id. Returned sequences exclude BOS.
        """
        max_length = min(max_length or self.config.max_target_length, self.config.max_target_length)
        with nc.no_grad():
            encoded = self.encoder_forward(batch)
            prefix = np.full((batch.size, 1), bos_id, dtype=np.int64)
            done = np.zeros(batch.size, dtype=bool)
            generated: List[List[int]] = [[] for _ in range(batch.size)]
            for _ in range(max_length):
                logits = self.decoder_forward(prefix, encoded).data[:, -1, :]
                step = np.argmax(logits, axis=-1)
                for k in np.flatnonzero(~done):
                    generated[k].append(int(step[k]))
                done |= step == eos_id
                if done.all() or prefix.shape[1] == self.config.max_target_length:
                    break
                prefix = np.concatenate([prefix, step[:, None]], axis=1)
        return generated

    def pooled_fusion(self, batch: Batch, layer: int) -> np.ndarray:
        """Masked mean over positions of F^(layer) for 1-based adapter layer index"""
        if not 1 <= layer <= len(self.fusion_layers):
            raise ConfigError(f"Layer {layer} is not an adapter layer",
                              {"adapter_layers": len(self.fusion_layers)})
        with nc.no_grad():
            encoded = self.encoder_forward(batch)
            fused = encoded.fusion_states[layer - 1]
            return nc.mean_pool(fused, batch.source_mask).data
