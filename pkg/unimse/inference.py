"""
Batched greedy generation, decoding and scoring against gold labels
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

import pandas as pd
from joblib import Parallel, delayed

from unimse.datapipe import FormalizedInput, collate
from unimse.evalmetrics import erc_metrics, msa_metrics
from unimse.models import EMOTIONS, MetricReport, Task, quantize_intensity
from unimse.textcodec import Vocabulary, decode_prediction
from unimse.transformer import UniMSE


@dataclass(frozen=True)
class Prediction:
    id: str
    task: Task
    dataset: str
    generated: List[int]
    tokens: List[str]
    value: Union[float, str]
    well_formed: bool
    gold: Union[float, str, None]
    exact: Optional[bool]

    @property
    def task_match(self) -> Optional[bool]:
        if self.gold is None:
            return None
        if self.task == Task.MSA:
            return quantize_intensity(self.value) == quantize_intensity(self.gold)
        return self.value == self.gold


def _generate_chunk(model: UniMSE, chunk: Sequence[FormalizedInput], vocab: Vocabulary,
                    drop_modality: Optional[str]) -> List[List[int]]:
    batch = collate(chunk, vocab).drop_modality(drop_modality)
    return model.generate(batch, vocab.bos_id, vocab.eos_id)


def generate_all(model: UniMSE, inputs: Sequence[FormalizedInput], vocab: Vocabulary,
                 batch_size: int = 8, n_jobs: int = 1, drop_modality: Optional[str] = None) -> List[List[int]]:
    """Greedy outputs for every input, in input order"""
    chunks = [list(inputs[i:i + batch_size]) for i in range(0, len(inputs), batch_size)]
    results = Parallel(n_jobs=n_jobs, backend="threading")(
        delayed(_generate_chunk)(model, chunk, vocab, drop_modality) for chunk in chunks
    )
    return [seq for chunk in results for seq in chunk]


def predict(model: UniMSE, inputs: Sequence[FormalizedInput], vocab: Vocabulary, batch_size: int = 8,
            n_jobs: int = 1, drop_modality: Optional[str] = None, fallback: bool = True) -> List[Prediction]:
    generated = generate_all(model, inputs, vocab, batch_size, n_jobs, drop_modality)
    predictions = []
    for x, ids in zip(inputs, generated):
        tokens = vocab.decode_ids(ids)
        decoded = decode_prediction(tokens, x.task, fallback=fallback)
        gold = x.gold_intensity if x.task == Task.MSA else x.gold_emotion
        predictions.append(Prediction(
            id=x.id, task=x.task, dataset=x.dataset, generated=list(ids), tokens=tokens,
            value=decoded.value, well_formed=decoded.well_formed, gold=gold,
            exact=None if x.target_ids is None else list(ids) == list(x.target_ids),
        ))
    return predictions


def exact_match(predictions: Sequence[Prediction]) -> float:
    """Share of predictions reproducing the full serialized label"""
    scored = [p.exact for p in predictions if p.exact is not None]
    return sum(scored) / len(scored) if scored else 0.0


def task_exact_match(predictions: Sequence[Prediction]) -> float:
    scored = [p.task_match for p in predictions if p.task_match is not None]
    return sum(scored) / len(scored) if scored else 0.0


def _report(task: Task, group: Sequence[Prediction], dataset: Optional[str]) -> MetricReport:
    malformed = sum(not p.well_formed for p in group)
    pred = [p.value for p in group]
    gold = [p.gold for p in group]
    if task == Task.MSA:
        report = msa_metrics(pred, gold, dataset=dataset, malformed=malformed)
    else:
        report = erc_metrics(pred, gold, EMOTIONS, dataset=dataset, malformed=malformed)
    report.metrics["exact_match"] = exact_match(group) if any(p.exact is not None for p in group) else None
    report.metrics["task_exact_match"] = task_exact_match(group)
    return report


def score(predictions: Sequence[Prediction], task: Optional[Task] = None) -> List[MetricReport]:
    """
    One report per task over all datasets, then one per (task, dataset)

    Each sample is scored only under its own source task.
    """
    reports: List[MetricReport] = []
    for t in (Task.MSA, Task.ERC):
        if task is not None and t != task:
            continue
        group = [p for p in predictions if p.task == t and p.gold is not None]
        if not group:
            continue
        reports.append(_report(t, group, None))
        by_dataset: Dict[str, List[Prediction]] = {}
        for p in group:
            by_dataset.setdefault(p.dataset, []).append(p)
        for name in sorted(by_dataset):
            reports.append(_report(t, by_dataset[name], name))
    return reports


def predictions_frame(predictions: Sequence[Prediction]) -> pd.DataFrame:
    return pd.DataFrame([{
        "id": p.id, "task": p.task.value, "dataset": p.dataset, "generated": " ".join(p.tokens),
        "value": p.value, "gold": p.gold, "well_formed": p.well_formed, "exact": p.exact,
    } for p in predictions], columns=["id", "task", "dataset", "generated", "value", "gold", "well_formed", "exact"])
