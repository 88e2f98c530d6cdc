"""
Metric suite for both tasks
MSA: MAE, Pearson, seven-class accuracy and the two binary conventions. ERC: accuracy and weighted F1.
"""

from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.stats import pearsonr
from sklearn.metrics import accuracy_score, f1_score, mean_absolute_error

from unimse.errors import MetricError
from unimse.models import INTENSITY_MAX, INTENSITY_MIN, MetricReport, Task

MSA_METRICS = ("mae", "corr", "acc7", "acc2_nonneg", "f1_nonneg", "acc2_pos", "f1_pos")
ERC_METRICS = ("acc", "wf1")


def _paired(pred: Sequence, gold: Sequence, numeric: bool):
    if len(pred) != len(gold):
        raise MetricError("Prediction and gold vectors differ in length",
                          {"pred": len(pred), "gold": len(gold)})
    if len(gold) == 0:
        raise MetricError("Cannot score an empty prediction set")
    if not numeric:
        return list(pred), list(gold)
    p, g = np.asarray(pred, dtype=np.float64), np.asarray(gold, dtype=np.float64)
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(g))):
        raise MetricError("Non-finite intensity in metric input")
    return p, g


def seven_class(values: np.ndarray) -> np.ndarray:
    """Clamp to [-3, 3] and round to the nearest integer, halves away from zero"""
    clamped = np.clip(np.asarray(values, dtype=np.float64), INTENSITY_MIN, INTENSITY_MAX)
    return np.sign(clamped) * np.floor(np.abs(clamped) + 0.5)


def msa_metrics(pred: Sequence[float], gold: Sequence[float], dataset: Optional[str] = None,
                malformed: int = 0) -> MetricReport:
    p, g = _paired(pred, gold, numeric=True)
    flags: List[str] = []

    corr: Optional[float] = None
    if np.ptp(p) == 0 or np.ptp(g) == 0:
        flags.append("corr_undefined_zero_variance")
    else:
        corr = float(np.clip(pearsonr(p, g)[0], -1.0, 1.0))

    nonneg_gold, nonneg_pred = (g >= 0).astype(int), (p >= 0).astype(int)
    metrics = {
        "mae": float(mean_absolute_error(g, p)),
        "corr": corr,
        "acc7": float(accuracy_score(seven_class(g), seven_class(p))),
        "acc2_nonneg": float(accuracy_score(nonneg_gold, nonneg_pred)),
        "f1_nonneg": float(f1_score(nonneg_gold, nonneg_pred, zero_division=0)),
        "acc2_pos": None,
        "f1_pos": None,
    }
    nonzero = g != 0
    if nonzero.any():
        pos_gold, pos_pred = (g[nonzero] > 0).astype(int), (p[nonzero] > 0).astype(int)
        metrics["acc2_pos"] = float(accuracy_score(pos_gold, pos_pred))
        metrics["f1_pos"] = float(f1_score(pos_gold, pos_pred, zero_division=0))
    else:
        flags.append("pos_neg_undefined_all_gold_zero")

    return MetricReport(task=Task.MSA, dataset=dataset, metrics=metrics, n=len(g),
                        malformed=malformed, flags=flags)


def erc_metrics(pred: Sequence[str], gold: Sequence[str], label_set: Iterable[str],
                dataset: Optional[str] = None, malformed: int = 0) -> MetricReport:
    p, g = _paired(pred, gold, numeric=False)
    known = set(label_set)
    unknown = sorted({x for x in p + g if x not in known})
    if unknown:
        raise MetricError(f"Labels outside the label set: {', '.join(unknown)}", {"known": sorted(known)})
    metrics = {
        "acc": float(accuracy_score(g, p)),
        "wf1": float(f1_score(g, p, average="weighted", zero_division=0)),
    }
    return MetricReport(task=Task.ERC, dataset=dataset, metrics=metrics, n=len(g), malformed=malformed)


def exact_match_rate(generated: Sequence[Sequence[int]], gold: Sequence[Sequence[int]]) -> float:
    """Fraction of generated sequences identical to their gold serialization"""
    if len(generated) != len(gold):
        raise MetricError("Generated and gold sequence counts differ",
                          {"generated": len(generated), "gold": len(gold)})
    if not gold:
        raise MetricError("Cannot score an empty sequence set")
    return float(np.mean([list(a) == list(b) for a, b in zip(generated, gold)]))


# ============= REPORT OUTPUT =============

def format_report(report: MetricReport) -> str:
    """Metric lines of the form `name value N`"""
    header = f"{report.task.value}" + (f" [{report.dataset}]" if report.dataset else "")
    lines = [f"{header}  N={report.n}  malformed={report.malformed}"]
    for name, value in report.metrics.items():
        shown = "null" if value is None else f"{value:.4f}"
        lines.append(f"  {name:<16} {shown:>8}  {report.n}")
    for flag in report.flags:
        lines.append(f"  flag: {flag}")
    return "\n".join(lines)


def reports_frame(reports: Sequence[MetricReport]) -> pd.DataFrame:
    rows = [
        {"task": r.task.value, "dataset": r.dataset or "ALL", "metric": name,
         "value": value, "n": r.n, "malformed": r.malformed}
        for r in reports for name, value in r.metrics.items()
    ]
    return pd.DataFrame(rows, columns=["task", "dataset", "metric", "value", "n", "malformed"])


def write_reports(reports: Sequence[MetricReport], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    reports_frame(reports).to_csv(path, index=False)
    return path
