"""
Pydantic models for labels, manifests, configuration and reports
Shared by every stage of the UniMSE pipeline
"""

from enum import Enum
from typing import Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

INTENSITY_MIN = -3.0
INTENSITY_MAX = 3.0


# ============= ENUMS =============

class Task(str, Enum):
    """Source task of a sample"""
    MSA = "MSA"
    ERC = "ERC"


class Polarity(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    NEUTRAL = "neutral"


# Emotion -> polarity buckets over the union of the MELD and IEMOCAP label sets
EMOTION_POLARITY: Dict[str, Polarity] = {
    "neutral": Polarity.NEUTRAL,
    "joy": Polarity.POSITIVE,
    "excited": Polarity.POSITIVE,
    "surprise": Polarity.POSITIVE,
    "sadness": Polarity.NEGATIVE,
    "anger": Polarity.NEGATIVE,
    "angry": Polarity.NEGATIVE,
    "fear": Polarity.NEGATIVE,
    "disgust": Polarity.NEGATIVE,
    "frustrated": Polarity.NEGATIVE,
}
EMOTIONS = tuple(EMOTION_POLARITY)


class Provenance(str, Enum):
    """Whether a label field came from the annotation or from completion"""
    ORIGINAL = "original"
    GENERATED = "generated"


class Split(str, Enum):
    TRAIN = "train"
    VALID = "valid"
    TEST = "test"


def quantize_intensity(value: float) -> float:
    """Round to the 0.1 grid; -0.0 collapses to 0.0"""
    return round(float(value), 1) + 0.0


def polarity_of_intensity(value: float) -> Polarity:
    if value > 0:
        return Polarity.POSITIVE
    if value < 0:
        return Polarity.NEGATIVE
    return Polarity.NEUTRAL


# ============= LABEL MODELS =============

class UniversalLabel(BaseModel):
    """(polarity, intensity, emotion) with per-field provenance"""
    model_config = ConfigDict(frozen=True)

    polarity: Optional[Polarity] = None
    intensity: Optional[float] = Field(None, ge=INTENSITY_MIN, le=INTENSITY_MAX)
    emotion: Optional[str] = None
    polarity_source: Provenance = Provenance.ORIGINAL
    intensity_source: Provenance = Provenance.ORIGINAL
    emotion_source: Provenance = Provenance.ORIGINAL

    @field_validator("intensity")
    @classmethod
    def snap_to_grid(cls, v):
        return None if v is None else quantize_intensity(v)

    @field_validator("emotion")
    @classmethod
    def lowercase_emotion(cls, v):
        return None if v is None else v.strip().lower()

    @model_validator(mode="after")
    def check_sign_consistency(self):
        """Original polarity and original intensity must agree in sign"""
        both_original = (self.polarity_source == Provenance.ORIGINAL
                         and self.intensity_source == Provenance.ORIGINAL)
        if both_original and self.polarity is not None and self.intensity is not None:
            expected = polarity_of_intensity(self.intensity)
            if self.polarity != expected:
                raise ValueError(
                    f"Polarity {self.polarity.value} disagrees with intensity {self.intensity:+.1f}"
                )
        return self

    @property
    def is_complete(self) -> bool:
        return None not in (self.polarity, self.intensity, self.emotion)


class DecodedPrediction(BaseModel):
    """Task value read back from a generated sequence"""
    task: Task
    value: Union[float, str]
    well_formed: bool


class LabeledSample(BaseModel):
    """One utterance with its partial (or completed) label"""
    id: str
    task: Task
    text: str = ""
    intensity: Optional[float] = Field(None, ge=INTENSITY_MIN, le=INTENSITY_MAX)
    emotion: Optional[str] = None
    split: Split = Split.TRAIN
    dataset: str = ""
    intensity_source: Provenance = Provenance.ORIGINAL
    emotion_source: Provenance = Provenance.ORIGINAL

    @field_validator("intensity")
    @classmethod
    def snap_to_grid(cls, v):
        return None if v is None else quantize_intensity(v)

    @field_validator("emotion")
    @classmethod
    def lowercase_emotion(cls, v):
        return None if v is None else v.strip().lower()

    @model_validator(mode="after")
    def check_task_fields(self):
        """Before completion an MSA sample holds only intensity, an ERC sample only emotion"""
        if self.task == Task.MSA:
            if self.intensity is None:
                raise ValueError(f"MSA sample {self.id} has no intensity")
            if self.emotion is not None and self.emotion_source == Provenance.ORIGINAL:
                raise ValueError(f"MSA sample {self.id} carries an original emotion")
        else:
            if self.emotion is None:
                raise ValueError(f"ERC sample {self.id} has no emotion")
            if self.intensity is not None and self.intensity_source == Provenance.ORIGINAL:
                raise ValueError(f"ERC sample {self.id} carries an original intensity")
        return self


# ============= MANIFEST MODELS =============

class ManifestRecord(BaseModel):
    """One manifest line"""
    model_config = ConfigDict(extra="forbid")

    id: str = Field(..., min_length=1)
    dataset: str = Field(..., min_length=1)
    split: Split
    task: Task
    text: str = ""
    context_before: List[str] = Field(default_factory=list, max_length=2,
                                      description="Previous turns, oldest first")
    context_after: List[str] = Field(default_factory=list, max_length=2,
                                     description="Next turns, nearest first")
    acoustic_path: str
    visual_path: str
    intensity: Optional[float] = Field(None, ge=INTENSITY_MIN, le=INTENSITY_MAX)
    emotion: Optional[str] = None
    intensity_source: Provenance = Provenance.ORIGINAL
    emotion_source: Provenance = Provenance.ORIGINAL

    @field_validator("intensity")
    @classmethod
    def snap_to_grid(cls, v):
        return None if v is None else quantize_intensity(v)

    def to_sample(self) -> LabeledSample:
        return LabeledSample(
            id=self.id, task=self.task, text=self.text,
            intensity=self.intensity, emotion=self.emotion,
            split=self.split, dataset=self.dataset,
            intensity_source=self.intensity_source,
            emotion_source=self.emotion_source,
        )


class AuditEntry(BaseModel):
    """One completion decision"""
    sample_id: str
    donor_id: str
    similarity: float
    field: Literal["intensity", "emotion"]
    value: str


class CompletionSummary(BaseModel):
    total: int = 0
    generated_intensity: int = 0
    generated_emotion: int = 0
    widened_pools: int = 0


# ============= CONFIGURATION MODELS =============

class ModelConfig(BaseModel):
    """Shape of the encoder-decoder, its modality encoders and fusion layers"""
    model_config = ConfigDict(extra="forbid")

    vocab_size: int = Field(0, ge=0, description="0 = size of the built vocabulary")
    d_model: int = Field(32, ge=1, description="Text width d_t")
    n_encoder_layers: int = Field(2, ge=1)
    n_decoder_layers: int = Field(2, ge=1)
    n_heads: int = Field(2, ge=1)
    d_ff: int = Field(64, ge=1)
    d_acoustic_in: int = Field(8, ge=1)
    d_acoustic: int = Field(16, ge=1, description="Acoustic hidden width d_a")
    d_visual_in: int = Field(8, ge=1)
    d_visual: int = Field(16, ge=1, description="Visual hidden width d_v")
    n_fusion: int = Field(2, ge=0, description="Encoder layers carrying a PMF adapter (n_f)")
    n_cl: int = Field(2, ge=0, description="Adapter layers with contrastive terms (n_cl)")
    bottleneck: int = Field(0, ge=0, description="Adapter bottleneck; 0 = d_model // 2")
    d_common: int = Field(16, ge=1, description="Contrastive common width d_c")
    common_length: int = Field(8, ge=1, description="Contrastive common length L_c")
    kernel_acoustic: int = Field(1, ge=1)
    kernel_visual: int = Field(1, ge=1)
    kernel_fusion: int = Field(1, ge=1)
    max_source_length: int = Field(64, ge=1)
    max_target_length: int = Field(8, ge=2)
    decoder_pmf: bool = False
    dropout: float = Field(0.0, ge=0.0, lt=1.0)
    layer_norm_eps: float = Field(1e-5, gt=0.0)
    init_std: float = Field(0.1, gt=0.0)

    @model_validator(mode="after")
    def check_layer_counts(self):
        if self.n_fusion > self.n_encoder_layers:
            raise ValueError("n_fusion must not exceed n_encoder_layers")
        if self.n_cl > self.n_fusion:
            raise ValueError("n_cl must not exceed n_fusion")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.decoder_pmf and self.n_fusion > self.n_decoder_layers:
            raise ValueError("decoder_pmf needs n_fusion <= n_decoder_layers")
        return self

    @property
    def bottleneck_width(self) -> int:
        return self.bottleneck or max(1, self.d_model // 2)


class OptimConfig(BaseModel):
    """Optimizer family and per-group learning rates"""
    model_config = ConfigDict(extra="forbid")

    name: Literal["adam", "sgd"] = "adam"
    lr_backbone: float = Field(3e-4, gt=0.0)
    lr_main: float = Field(1e-4, gt=0.0)
    lr_pmf: float = Field(1e-4, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)


class SynthConfig(BaseModel):
    """Sizes and signal strength of the synthetic multi-source corpus"""
    model_config = ConfigDict(extra="forbid")

    n_msa: Dict[Split, int] = Field(default_factory=lambda: {Split.TRAIN: 32, Split.VALID: 8, Split.TEST: 8})
    n_erc: Dict[Split, int] = Field(default_factory=lambda: {Split.TRAIN: 32, Split.VALID: 8, Split.TEST: 8})
    msa_dataset: str = "synth_msa"
    erc_dataset: str = "synth_erc"
    filler_vocab: int = Field(40, ge=1, description="Number of distinct filler words")
    text_min_words: int = Field(3, ge=0)
    text_max_words: int = Field(6, ge=0)
    d_acoustic: int = Field(8, ge=1)
    d_visual: int = Field(8, ge=1)
    min_frames: int = Field(3, ge=1)
    max_frames: int = Field(8, ge=1)
    signal_strength: float = Field(2.0, ge=0.0)
    noise_std: float = Field(1.0, gt=0.0)
    polarity_weights: List[float] = Field(default_factory=lambda: [1.0, 1.0, 1.0],
                                          description="negative, neutral, positive")
    dialogue_length: int = Field(4, ge=1)

    @model_validator(mode="after")
    def check_ranges(self):
        if self.text_min_words > self.text_max_words:
            raise ValueError("text_min_words must not exceed text_max_words")
        if self.min_frames > self.max_frames:
            raise ValueError("min_frames must not exceed max_frames")
        if len(self.polarity_weights) != 3 or min(self.polarity_weights) < 0 or not sum(self.polarity_weights) > 0:
            raise ValueError("polarity_weights needs three non-negative weights with a positive sum")
        if any(n < 0 for n in list(self.n_msa.values()) + list(self.n_erc.values())):
            raise ValueError("sample counts must be non-negative")
        return self


class GradCheckConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    eps: float = Field(1e-5, gt=0.0, le=1e-2)
    tol: float = Field(1e-4, gt=0.0)
    max_coords: Optional[int] = Field(6, ge=1, description="Coordinates per parameter; None = all")
    batch_size: int = Field(4, ge=2)
    max_d_model: int = Field(64, ge=1)


class RunConfig(BaseModel):
    """Every setting a command reads; unknown keys are rejected"""
    model_config = ConfigDict(extra="forbid")

    preset: Literal["desk", "paper"] = "desk"
    model: ModelConfig = Field(default_factory=ModelConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    gradcheck: GradCheckConfig = Field(default_factory=GradCheckConfig)
    batch_size: int = Field(8, ge=1, description="Mini-batch size K")
    epochs: int = Field(30, ge=0)
    eval_every: int = Field(5, ge=1, description="Epochs between validation passes")
    seed: int = 0
    alpha: float = Field(0.5, ge=0.0, description="Weight of text-acoustic contrastive terms")
    beta: float = Field(0.5, ge=0.0, description="Weight of text-visual contrastive terms")
    temperature: float = Field(1.0, gt=0.0)
    no_pmf: bool = False
    no_cl: bool = False
    drop_modality: Optional[Literal["a", "v", "av"]] = None
    exclude_datasets: List[str] = Field(default_factory=list)
    data_path: Optional[str] = None
    output_dir: str = "runs/default"
    oracle: str = "bow-cosine"
    neutral_pool_fallback: bool = False
    donors_from_train_only: bool = True
    malformed_fallback: bool = True
    n_jobs: int = Field(1, ge=1)

    @property
    def cl_enabled(self) -> bool:
        return not self.no_cl and self.model.n_cl > 0 and (self.alpha > 0 or self.beta > 0)

    @property
    def effective_n_fusion(self) -> int:
        return 0 if self.no_pmf else self.model.n_fusion

    @property
    def effective_n_cl(self) -> int:
        return 0 if self.no_cl else min(self.model.n_cl, self.effective_n_fusion)


# ============= REPORT MODELS =============

class GradCheckFailure(BaseModel):
    param: str
    index: int
    analytic: float
    numeric: float
    rel_error: float


class GradCheckReport(BaseModel):
    """Outcome of comparing analytic and central-difference gradients"""
    passed: bool
    max_rel_error: float
    tol: float
    eps: float
    checked: int
    per_param: Dict[str, float] = Field(default_factory=dict)
    failures: List[GradCheckFailure] = Field(default_factory=list)


class LossBreakdown(BaseModel):
    """Task loss, per-layer contrastive terms and their weighted total"""
    task: float = Field(..., ge=0.0)
    ta: List[float] = Field(default_factory=list)
    tv: List[float] = Field(default_factory=list)
    alpha: float = Field(0.5, ge=0.0)
    beta: float = Field(0.5, ge=0.0)
    total: float = Field(..., ge=0.0)

    @property
    def ta_sum(self) -> float:
        return float(sum(self.ta))

    @property
    def tv_sum(self) -> float:
        return float(sum(self.tv))


class MetricReport(BaseModel):
    """Metric name -> value for one task (and optionally one dataset)"""
    task: Task
    dataset: Optional[str] = None
    metrics: Dict[str, Optional[float]] = Field(default_factory=dict)
    n: int = Field(0, ge=0)
    malformed: int = Field(0, ge=0)
    flags: List[str] = Field(default_factory=list)
