"""
Universal-label construction across MSA and ERC samples
Polarity bucketing, pluggable text similarity and similarity-based completion
"""

import re
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from unimse.errors import CompletionError, LabelError
from unimse.models import (
    EMOTION_POLARITY,
    AuditEntry,
    CompletionSummary,
    LabeledSample,
    Polarity,
    Provenance,
    Split,
    Task,
    UniversalLabel,
    polarity_of_intensity,
)
from unimse.textcodec import tokenize


# ============= POLARITY =============

def polarity_of(sample: LabeledSample) -> Polarity:
    """Polarity from the sample's original label field"""
    if sample.task == Task.MSA:
        return polarity_of_intensity(sample.intensity)
    if sample.emotion not in EMOTION_POLARITY:
        known = {p.value: sorted(e for e, q in EMOTION_POLARITY.items() if q == p) for p in Polarity}
        raise LabelError(f"Unknown emotion '{sample.emotion}' for sample {sample.id}", {"known": known})
    return EMOTION_POLARITY[sample.emotion]


# ============= SIMILARITY ORACLES =============

@dataclass(frozen=True)
class SimilarityOracle:
    """Named symmetric text scorer with values in [-1, 1]"""
    name: str
    score: Callable[[str, str], float]


@dataclass(frozen=True)
class SimilarityResult:
    score: float
    degenerate: bool = False


def _term_frequencies(text: str) -> Counter:
    return Counter(tokenize(text))


def bow_cosine(a: str, b: str) -> float:
    """Cosine between L2-normalized term-frequency bags"""
    fa, fb = _term_frequencies(a), _term_frequencies(b)
    if not fa or not fb:
        return 0.0
    keys = sorted(set(fa) | set(fb))
    va = np.array([fa[k] for k in keys], dtype=np.float64)
    vb = np.array([fb[k] for k in keys], dtype=np.float64)
    va /= np.linalg.norm(va)
    vb /= np.linalg.norm(vb)
    return float(np.clip(va @ vb, -1.0, 1.0))


_ORACLES: Dict[str, SimilarityOracle] = {}


def register_oracle(oracle: SimilarityOracle) -> None:
    _ORACLES[oracle.name] = oracle


def get_oracle(name: str) -> SimilarityOracle:
    if name not in _ORACLES:
        raise LabelError(f"Unknown similarity oracle '{name}'", {"registered": sorted(_ORACLES)})
    return _ORACLES[name]


register_oracle(SimilarityOracle(name="bow-cosine", score=bow_cosine))


def similarity(a: str, b: str, oracle: SimilarityOracle) -> SimilarityResult:
    if not tokenize(a) and not tokenize(b):
        return SimilarityResult(score=0.0, degenerate=True)
    return SimilarityResult(score=float(oracle.score(a, b)))


# ============= COMPLETION =============

def _missing_field(sample: LabeledSample) -> str:
    return "emotion" if sample.task == Task.MSA else "intensity"


def candidate_pool(sample: LabeledSample, pool: Sequence[LabeledSample],
                   widen: bool = False) -> Tuple[List[LabeledSample], bool]:
    """
    Donors for a sample: opposite task and same polarity

    With `widen`, an empty same-polarity pool falls back to every opposite-task donor.
    Returns the donors and whether the pool was widened.
    """
    target = polarity_of(sample)
    opposite = [c for c in pool if c.task != sample.task]
    matching = [c for c in opposite if polarity_of(c) == target]
    if matching or not widen:
        return matching, False
    return opposite, bool(opposite)


def id_order(sample_id: str) -> List[Union[str, int]]:
    """Natural sort key: digit runs compare as numbers, so m2 precedes m10"""
    # re.split with a group alternates text and digits, keeping positions type-aligned
    return [int(part) if i % 2 else part for i, part in enumerate(re.split(r"(\d+)", sample_id))]


def best_donor(sample: LabeledSample, donors: Sequence[LabeledSample],
               oracle: SimilarityOracle) -> Tuple[LabeledSample, float]:
    """Argmax similarity; ties go to the donor first in natural id order"""
    ranked = sorted(
        ((similarity(sample.text, d.text, oracle).score, d) for d in donors),
        key=lambda pair: (-pair[0], id_order(pair[1].id), pair[1].id),
    )
    score, donor = ranked[0]
    return donor, score


def universal_label(sample: LabeledSample) -> UniversalLabel:
    """The sample's label fields as a UniversalLabel"""
    return UniversalLabel(
        polarity=polarity_of(sample),
        intensity=sample.intensity,
        emotion=sample.emotion,
        intensity_source=sample.intensity_source,
        emotion_source=sample.emotion_source,
    )


def _complete(sample: LabeledSample, pool: Sequence[LabeledSample], oracle: SimilarityOracle,
              widen: bool) -> Tuple[LabeledSample, Optional[AuditEntry], bool]:
    field = _missing_field(sample)
    if getattr(sample, field) is not None:
        return sample, None, False

    donors, widened = candidate_pool(sample, pool, widen=widen)
    if not donors:
        donor_task = "ERC" if sample.task == Task.MSA else "MSA"
        raise CompletionError(
            f"No {polarity_of(sample).value} {donor_task} donor for sample {sample.id}; "
            f"add donors or enable neutral_pool_fallback",
            {"sample_id": sample.id},
        )
    donor, score = best_donor(sample, donors, oracle)
    value = getattr(donor, field)
    completed = sample.model_copy(update={field: value, f"{field}_source": Provenance.GENERATED})
    audit = AuditEntry(
        sample_id=sample.id,
        donor_id=donor.id,
        similarity=score,
        field=field,
        value=f"{value:+.1f}" if field == "intensity" else str(value),
    )
    return completed, audit, widened


def complete_universal_label(sample: LabeledSample, pool: Sequence[LabeledSample],
                             oracle: SimilarityOracle, widen: bool = False) -> UniversalLabel:
    """
    Fill the sample's missing field from its most similar opposite-task donor

    Original fields are never rewritten; an already complete sample is returned as is.
    """
    completed, _, _ = _complete(sample, pool, oracle, widen)
    return universal_label(completed)


def build_unified_dataset(msa: Sequence[LabeledSample], erc: Sequence[LabeledSample],
                          oracle: SimilarityOracle, widen: bool = False,
                          donors_from_train_only: bool = True
                          ) -> Tuple[List[LabeledSample], List[AuditEntry], CompletionSummary]:
    """
    Complete every MSA and ERC sample against the other task's samples

    Output keeps source order, MSA samples first. Donors come from the training
    split unless `donors_from_train_only` is off.
    """
    if not msa or not erc:
        raise CompletionError("Both the MSA and the ERC sample sets must be non-empty")
    msa_donors = [s for s in msa if s.split == Split.TRAIN or not donors_from_train_only]
    erc_donors = [s for s in erc if s.split == Split.TRAIN or not donors_from_train_only]

    completed: List[LabeledSample] = []
    audits: List[AuditEntry] = []
    summary = CompletionSummary()
    for sample in list(msa) + list(erc):
        pool = erc_donors if sample.task == Task.MSA else msa_donors
        done, audit, widened = _complete(sample, pool, oracle, widen)
        if audit is not None:
            audits.append(audit)
            if audit.field == "intensity":
                summary.generated_intensity += 1
            else:
                summary.generated_emotion += 1
        summary.widened_pools += int(widened)
        completed.append(done)
    summary.total = len(completed)
    return completed, audits, summary
