"""
Input formalization, feature-file ingestion, synthetic corpora and batching
Feature files: b"UMSE", version byte, uint32 rows, uint32 cols, row-major little-endian values
(float32 for version 1, float64 for version 2)
"""

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from pydantic import ValidationError

from unimse.errors import ConfigError, ManifestError
from unimse.models import (
    EMOTION_POLARITY,
    EMOTIONS,
    AuditEntry,
    CompletionSummary,
    ManifestRecord,
    Polarity,
    Split,
    SynthConfig,
    Task,
)
from unimse.textcodec import SEP, UNK, Vocabulary, encode_target, encode_text, tokenize
from unimse.unilabel import SimilarityOracle, build_unified_dataset, universal_label

MAGIC = b"UMSE"
FORMAT_VERSION = 1
WIDE_VERSION = 2
_VALUE_DTYPES = {FORMAT_VERSION: "<f4", WIDE_VERSION: "<f8"}
_HEADER_BYTES = len(MAGIC) + 1 + 8


# ============= FEATURE SEQUENCES =============

@dataclass(frozen=True, eq=False)
class FeatureSequence:
    """(length x dim) float64 matrix"""
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ValueError(f"Feature sequence must be a non-empty matrix, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("Feature sequence contains non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other) -> bool:
        return isinstance(other, FeatureSequence) and np.array_equal(self.values, other.values)


def write_features(path: Union[str, Path], values: np.ndarray, wide: bool = False) -> None:
    """Write a matrix as float32 (version 1) or, with `wide`, float64 (version 2)"""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError(f"Feature matrix must be 2-D, got shape {values.shape}")
    version = WIDE_VERSION if wide else FORMAT_VERSION
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = MAGIC + bytes([version]) + np.array(values.shape, dtype="<u4").tobytes()
    path.write_bytes(header + np.ascontiguousarray(values, dtype=_VALUE_DTYPES[version]).tobytes())


def read_features(path: Union[str, Path]) -> FeatureSequence:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Feature file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER_BYTES or raw[:4] != MAGIC:
        raise ValueError(f"Malformed feature header in {path.name}")
    version = raw[4]
    if version not in _VALUE_DTYPES:
        raise ValueError(f"Unsupported feature format version {version} in {path.name}")
    dtype = np.dtype(_VALUE_DTYPES[version])
    rows, cols = (int(v) for v in np.frombuffer(raw, dtype="<u4", count=2, offset=5))
    expected = _HEADER_BYTES + rows * cols * dtype.itemsize
    if len(raw) != expected:
        raise ValueError(f"Feature file {path.name} holds {len(raw)} bytes, header implies {expected}")
    values = np.frombuffer(raw, dtype=dtype, offset=_HEADER_BYTES).reshape(rows, cols)
    return FeatureSequence(values.astype(np.float64))


# ============= MANIFEST =============

@dataclass(eq=False)
class Manifest:
    """Ordered records plus their (acoustic, visual) features"""
    records: List[ManifestRecord]
    features: Dict[str, Tuple[FeatureSequence, FeatureSequence]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Manifest) or self.records != other.records:
            return False
        return self.features.keys() == other.features.keys() and all(
            self.features[k][0] == other.features[k][0] and self.features[k][1] == other.features[k][1]
            for k in self.features
        )

    def select(self, keep) -> "Manifest":
        records = [r for r in self.records if keep(r)]
        return Manifest(records, {r.id: self.features[r.id] for r in records if r.id in self.features})


def _load_record_features(root: Path, record: ManifestRecord) -> Tuple[FeatureSequence, FeatureSequence]:
    return read_features(root / record.acoustic_path), read_features(root / record.visual_path)


def load_manifest(path: Union[str, Path], n_jobs: int = 1) -> Manifest:
    """
    Parse a JSON-lines manifest and load every referenced feature file

    Validation problems are collected per record and raised together.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"Manifest not found: {path}")
    lines = [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not lines:
        raise ManifestError(f"Manifest {path.name} has no records")

    errors: Dict[str, str] = {}
    records: List[ManifestRecord] = []
    seen = set()
    for number, line in enumerate(lines, start=1):
        try:
            record = ManifestRecord.model_validate_json(line)
        except ValidationError as e:
            errors[f"line {number}"] = "; ".join(err["msg"] for err in e.errors())
            continue
        if record.id in seen:
            errors[record.id] = "duplicate id"
            continue
        seen.add(record.id)
        records.append(record)

    def load_one(record):
        try:
            return record.id, _load_record_features(path.parent, record), None
        except (OSError, ValueError) as e:
            return record.id, None, str(e)

    loaded = Parallel(n_jobs=n_jobs, backend="threading")(delayed(load_one)(r) for r in records)
    features: Dict[str, Tuple[FeatureSequence, FeatureSequence]] = {}
    for record_id, pair, message in loaded:
        if message is not None:
            errors[record_id] = message
        else:
            features[record_id] = pair

    dims: Dict[Tuple[str, str], int] = {}
    for record in records:
        if record.id not in features:
            continue
        for modality, seq in zip(("acoustic", "visual"), features[record.id]):
            key = (record.dataset, modality)
            dims.setdefault(key, seq.dim)
            if seq.dim != dims[key]:
                errors[record.id] = (f"{modality} dim {seq.dim} differs from dataset "
                                     f"{record.dataset} dim {dims[key]}")

    if errors:
        raise ManifestError(f"Manifest {path.name} failed validation", errors)
    return Manifest(records, features)


def write_manifest(manifest: Manifest, path: Union[str, Path]) -> Path:
    """Write the JSON-lines manifest and its feature files (paths relative to its directory)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    for record in manifest.records:
        if record.id in manifest.features:
            acoustic, visual = manifest.features[record.id]
            write_features(path.parent / record.acoustic_path, acoustic.values)
            write_features(path.parent / record.visual_path, visual.values)
    path.write_text("".join(r.model_dump_json() + "\n" for r in manifest.records), encoding="utf-8")
    return path


# ============= INPUT FORMALIZATION =============

@dataclass(frozen=True)
class FormalizedText:
    tokens: List[str]
    segment_ids: List[int]

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


def formalize_context(dialogue: Sequence[str], i: int, task: Union[Task, str]) -> FormalizedText:
    """
    ERC: turns i-2 .. i+2 joined by SEP, segment id 1 over turn i only.
    MSA: turn i alone, all segment ids 1. Missing boundary turns are omitted.
    """
    if not 0 <= i < len(dialogue):
        raise IndexError(f"Utterance index {i} out of range for a {len(dialogue)}-turn dialogue")
    current = tokenize(dialogue[i]) or [UNK]
    if Task(task) == Task.MSA:
        return FormalizedText(current, [1] * len(current))

    tokens: List[str] = []
    segments: List[int] = []
    for j in range(max(0, i - 2), min(len(dialogue), i + 3)):
        if tokens:
            tokens.append(SEP)
            segments.append(0)
        turn = current if j == i else tokenize(dialogue[j])
        tokens.extend(turn)
        segments.extend([1 if j == i else 0] * len(turn))
    return FormalizedText(tokens, segments)


@dataclass(frozen=True, eq=False)
class FormalizedInput:
    """Token ids, segment ids, both feature streams and the serialized target"""
    id: str
    task: Task
    dataset: str
    token_ids: List[int]
    segment_ids: List[int]
    acoustic: FeatureSequence
    visual: FeatureSequence
    target_ids: Optional[List[int]] = None
    gold_intensity: Optional[float] = None
    gold_emotion: Optional[str] = None


def formalize_record(record: ManifestRecord, features: Tuple[FeatureSequence, FeatureSequence],
                     vocab: Vocabulary) -> FormalizedInput:
    dialogue = list(record.context_before) + [record.text] + list(record.context_after)
    text = formalize_context(dialogue, len(record.context_before), record.task)
    target = None
    if record.intensity is not None and record.emotion is not None:
        target = encode_target(universal_label(record.to_sample()), vocab)
    return FormalizedInput(
        id=record.id,
        task=record.task,
        dataset=record.dataset,
        token_ids=encode_text(text.text, vocab),
        segment_ids=text.segment_ids,
        acoustic=features[0],
        visual=features[1],
        target_ids=target,
        gold_intensity=record.intensity,
        gold_emotion=record.emotion,
    )


def formalize_manifest(manifest: Manifest, vocab: Vocabulary) -> List[FormalizedInput]:
    return [formalize_record(r, manifest.features[r.id], vocab) for r in manifest.records]


def corpus_texts(manifest: Manifest) -> List[str]:
    """Every utterance and context turn, for vocabulary building"""
    texts: List[str] = []
    for r in manifest.records:
        texts.extend(r.context_before)
        texts.append(r.text)
        texts.extend(r.context_after)
    return texts


# ============= BATCHING =============

@dataclass(frozen=True, eq=False)
class Batch:
    """Padded arrays for K formalized inputs"""
    ids: List[str]
    tasks: List[Task]
    datasets: List[str]
    source_ids: np.ndarray        # (K, L) int
    segment_ids: np.ndarray       # (K, L) int, 0 on padding
    source_mask: np.ndarray       # (K, L) float, 1 on real tokens
    acoustic: np.ndarray          # (K, La, Da) zero-padded
    acoustic_lengths: np.ndarray  # (K,)
    visual: np.ndarray
    visual_lengths: np.ndarray
    target_in: Optional[np.ndarray] = None   # (K, T) BOS-shifted
    target_out: Optional[np.ndarray] = None  # (K, T)
    target_mask: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return len(self.ids)

    def drop_modality(self, which: Optional[str]) -> "Batch":
        """Zero the acoustic ('a'), visual ('v') or both ('av') feature streams"""
        if not which:
            return self
        updates = {}
        if "a" in which:
            updates["acoustic"] = np.zeros_like(self.acoustic)
        if "v" in which:
            updates["visual"] = np.zeros_like(self.visual)
        return replace(self, **updates)


def _pad_features(seqs: Sequence[FeatureSequence]) -> Tuple[np.ndarray, np.ndarray]:
    lengths = np.array([s.length for s in seqs], dtype=np.int64)
    out = np.zeros((len(seqs), int(lengths.max()), seqs[0].dim), dtype=np.float64)
    for k, s in enumerate(seqs):
        out[k, :s.length] = s.values
    return out, lengths


def collate(inputs: Sequence[FormalizedInput], vocab: Vocabulary) -> Batch:
    """Pad text with PAD ids (segment 0) and features with zero rows"""
    width = max(len(x.token_ids) for x in inputs)
    source = np.full((len(inputs), width), vocab.pad_id, dtype=np.int64)
    segments = np.zeros((len(inputs), width), dtype=np.int64)
    mask = np.zeros((len(inputs), width), dtype=np.float64)
    for k, x in enumerate(inputs):
        n = len(x.token_ids)
        source[k, :n] = x.token_ids
        segments[k, :n] = x.segment_ids
        mask[k, :n] = 1.0
    acoustic, acoustic_lengths = _pad_features([x.acoustic for x in inputs])
    visual, visual_lengths = _pad_features([x.visual for x in inputs])

    target_in = target_out = target_mask = None
    if all(x.target_ids is not None for x in inputs):
        t_width = max(len(x.target_ids) for x in inputs)
        target_in = np.full((len(inputs), t_width), vocab.pad_id, dtype=np.int64)
        target_out = np.full((len(inputs), t_width), vocab.pad_id, dtype=np.int64)
        target_mask = np.zeros((len(inputs), t_width), dtype=np.float64)
        for k, x in enumerate(inputs):
            n = len(x.target_ids)
            target_in[k, :n] = [vocab.bos_id] + list(x.target_ids[:-1])
            target_out[k, :n] = x.target_ids
            target_mask[k, :n] = 1.0

    return Batch(
        ids=[x.id for x in inputs],
        tasks=[x.task for x in inputs],
        datasets=[x.dataset for x in inputs],
        source_ids=source,
        segment_ids=segments,
        source_mask=mask,
        acoustic=acoustic,
        acoustic_lengths=acoustic_lengths,
        visual=visual,
        visual_lengths=visual_lengths,
        target_in=target_in,
        target_out=target_out,
        target_mask=target_mask,
    )


def batch_iter(inputs: Sequence[FormalizedInput], batch_size: int, vocab: Vocabulary,
               seed: int = 0, shuffle: bool = True, cl_enabled: bool = False) -> Iterator[Batch]:
    """
    Deterministic mini-batches of K inputs

    With contrastive learning on, a trailing single-sample batch joins the previous batch
    so every batch has negatives; a single-sample split has none and is rejected.
    """
    if cl_enabled and batch_size < 2:
        raise ConfigError("Contrastive learning needs batch_size >= 2", {"batch_size": batch_size})
    if batch_size < 1:
        raise ConfigError("batch_size must be positive", {"batch_size": batch_size})
    if cl_enabled and len(inputs) == 1:
        raise ConfigError("Contrastive learning needs at least 2 samples per split", {"samples": 1})
    order = np.random.default_rng(seed).permutation(len(inputs)) if shuffle else np.arange(len(inputs))
    chunks = [list(order[i:i + batch_size]) for i in range(0, len(order), batch_size)]
    if cl_enabled and len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2].extend(chunks.pop())
    for chunk in chunks:
        yield collate([inputs[int(k)] for k in chunk], vocab)


# ============= SYNTHETIC CORPORA =============

CUE_WORDS = {
    Polarity.NEGATIVE: "awful",
    Polarity.NEUTRAL: "okay",
    Polarity.POSITIVE: "great",
}
_POLARITY_ORDER = (Polarity.NEGATIVE, Polarity.NEUTRAL, Polarity.POSITIVE)
EMOTION_GROUPS = {p: [e for e in EMOTIONS if EMOTION_POLARITY[e] == p][:4] for p in Polarity}


def cue_prototypes(config: SynthConfig, seed: int) -> Dict[str, np.ndarray]:
    """Unit-norm mean-shift directions for acoustic / visual digits 0 and 1"""
    rng = np.random.default_rng([seed, 0])
    protos = {}
    for name, dim in (("acoustic", config.d_acoustic), ("visual", config.d_visual)):
        raw = rng.normal(size=(2, dim))
        protos[name] = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    return protos


def planted_intensity(polarity: Polarity, a: int, v: int) -> float:
    """Text cue fixes the sign; acoustic and visual digits set the magnitude"""
    if polarity == Polarity.NEUTRAL:
        return 0.0
    sign = 1.0 if polarity == Polarity.POSITIVE else -1.0
    return sign * (1.0 + 1.0 * a + 0.5 * v)


def planted_emotion(polarity: Polarity, a: int, v: int) -> str:
    group = EMOTION_GROUPS[polarity]
    return group[(a + 2 * v) % len(group)]


def synthesize_dataset(config: SynthConfig, seed: int) -> Manifest:
    """
    MSA and ERC samples whose labels are a function of planted cues

    The text cue word carries polarity, the acoustic and visual mean shifts each carry
    one independent bit. With signal_strength 0 every cue is label-independent.
    """
    try:
        config = SynthConfig.model_validate(config.model_dump())
    except ValidationError as e:
        raise ConfigError(f"Invalid synthetic config: {e.errors()[0]['msg']}")
    rng = np.random.default_rng([seed, 1])
    protos = cue_prototypes(config, seed)
    fillers = [f"w{k}" for k in range(config.filler_vocab)]
    weights = np.asarray(config.polarity_weights, dtype=np.float64)
    weights = weights / weights.sum()
    text_reliability = min(1.0, config.signal_strength)

    def features(modality: str, digit: int) -> FeatureSequence:
        dim = protos[modality].shape[1]
        length = int(rng.integers(config.min_frames, config.max_frames + 1))
        noise = rng.normal(scale=config.noise_std, size=(length, dim))
        return FeatureSequence((noise + config.signal_strength * protos[modality][digit]).astype(np.float32))

    def text_for(polarity: Polarity) -> str:
        n = int(rng.integers(config.text_min_words, config.text_max_words + 1))
        words = [fillers[int(k)] for k in rng.integers(0, len(fillers), size=n)]
        cue = polarity if rng.random() < text_reliability else _POLARITY_ORDER[int(rng.integers(0, 3))]
        words.insert(int(rng.integers(0, n + 1)), CUE_WORDS[cue])
        return " ".join(words)

    records: List[ManifestRecord] = []
    feats: Dict[str, Tuple[FeatureSequence, FeatureSequence]] = {}
    for task, dataset, counts in ((Task.MSA, config.msa_dataset, config.n_msa),
                                  (Task.ERC, config.erc_dataset, config.n_erc)):
        for split in Split:
            split_records: List[ManifestRecord] = []
            texts: List[str] = []
            for k in range(counts.get(split, 0)):
                polarity = _POLARITY_ORDER[int(rng.choice(3, p=weights))]
                a, v = int(rng.integers(0, 2)), int(rng.integers(0, 2))
                record_id = f"{dataset}_{split.value}_{k:05d}"
                texts.append(text_for(polarity))
                feats[record_id] = (features("acoustic", a), features("visual", v))
                split_records.append(ManifestRecord(
                    id=record_id, dataset=dataset, split=split, task=task, text=texts[-1],
                    acoustic_path=f"features/{record_id}.a.umse",
                    visual_path=f"features/{record_id}.v.umse",
                    intensity=planted_intensity(polarity, a, v) if task == Task.MSA else None,
                    emotion=planted_emotion(polarity, a, v) if task == Task.ERC else None,
                ))
            if task == Task.ERC:
                split_records = _attach_dialogue_context(split_records, texts, config.dialogue_length)
            records.extend(split_records)
    return Manifest(records, feats)


def _attach_dialogue_context(records: List[ManifestRecord], texts: List[str],
                             dialogue_length: int) -> List[ManifestRecord]:
    """Group consecutive records into dialogues and fill the +-2 context turns"""
    out = []
    for start in range(0, len(records), dialogue_length):
        turns = texts[start:start + dialogue_length]
        for offset, record in enumerate(records[start:start + dialogue_length]):
            out.append(record.model_copy(update={
                "context_before": turns[max(0, offset - 2):offset],
                "context_after": turns[offset + 1:offset + 3],
            }))
    return out


# ============= LABEL COMPLETION OVER MANIFESTS =============

def complete_manifest(msa: Manifest, erc: Manifest, oracle: SimilarityOracle, widen: bool = False,
                      donors_from_train_only: bool = True
                      ) -> Tuple[Manifest, List[AuditEntry], CompletionSummary]:
    """
    Unified manifest with every record's universal label completed

    Feature paths are rewritten to features/<id>.{a,v}.umse for the output directory.
    """
    wrong = {r.id: f"task {r.task.value} in the {task.value} manifest"
             for task, part in ((Task.MSA, msa), (Task.ERC, erc)) for r in part.records if r.task != task}
    if wrong:
        raise ManifestError("Manifest mixes tasks", wrong)
    clash = sorted({r.id for r in msa.records} & {r.id for r in erc.records})
    if clash:
        raise ManifestError("Record ids appear in both manifests", {i: "duplicate id" for i in clash})

    completed, audits, summary = build_unified_dataset(
        [r.to_sample() for r in msa.records], [r.to_sample() for r in erc.records],
        oracle, widen=widen, donors_from_train_only=donors_from_train_only,
    )
    sources = {r.id: r for r in msa.records + erc.records}
    records = [
        sources[s.id].model_copy(update={
            "intensity": s.intensity,
            "emotion": s.emotion,
            "intensity_source": s.intensity_source,
            "emotion_source": s.emotion_source,
            "acoustic_path": f"features/{s.id}.a.umse",
            "visual_path": f"features/{s.id}.v.umse",
        })
        for s in completed
    ]
    return Manifest(records, {**msa.features, **erc.features}), audits, summary
