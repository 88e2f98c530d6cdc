"""
Training objectives: generative NLL, inter-modality contrastive terms and their weighted sum
"""

from typing import Optional, Sequence, Tuple, Union

import numpy as np

from unimse import numcore as nc
from unimse.datapipe import Batch
from unimse.errors import ObjectiveError
from unimse.models import LossBreakdown
from unimse.numcore import Tensor
from unimse.transformer import ForwardOutput, UniMSE

Scalar = Union[Tensor, float]


def task_nll(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over unmasked target positions"""
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.float64)
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise ObjectiveError("task_nll: logits, targets and mask disagree in shape",
                             {"logits": logits.shape, "targets": targets.shape, "mask": mask.shape})
    count = mask.sum()
    if count <= 0:
        raise ObjectiveError("task_nll: every target position is masked")
    picked = nc.take_last(nc.log_softmax(logits, axis=-1), targets)
    return -nc.sum(picked * mask) / count


def inter_modal_cl(anchors, others, temperature: float = 1.0) -> Tensor:
    """
    Text-anchored InfoNCE over a batch

    Row i scores anchor i against every other-modality vector; the diagonal is the
    positive pair. The result is the mean over anchors.
    """
    anchors, others = nc.as_tensor(anchors), nc.as_tensor(others)
    if anchors.ndim != 2 or anchors.shape != others.shape:
        raise ObjectiveError("inter_modal_cl expects two (K, d) matrices of equal shape",
                             {"anchors": anchors.shape, "others": others.shape})
    k = anchors.shape[0]
    if k < 2:
        raise ObjectiveError("inter_modal_cl needs a batch of at least 2 samples", {"K": k})
    if temperature <= 0:
        raise ObjectiveError("Temperature must be positive", {"temperature": temperature})
    scores = (anchors @ others.T) * (1.0 / temperature)
    return -nc.mean(nc.take_last(nc.log_softmax(scores, axis=-1), np.arange(k)))


def _check_weights(alpha: float, beta: float) -> None:
    if alpha < 0 or beta < 0:
        raise ObjectiveError("Contrastive weights must be non-negative", {"alpha": alpha, "beta": beta})


def weighted_total(task: Tensor, ta: Sequence[Tensor], tv: Sequence[Tensor],
                   alpha: float, beta: float) -> Tensor:
    """Differentiable L = task + alpha * sum(ta) + beta * sum(tv)"""
    _check_weights(alpha, beta)
    total = task
    for term in ta:
        total = total + term * alpha
    for term in tv:
        total = total + term * beta
    return total


def _value(x: Scalar) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def total_loss(task: Scalar, ta: Sequence[Scalar], tv: Sequence[Scalar],
               alpha: float = 0.5, beta: float = 0.5) -> LossBreakdown:
    _check_weights(alpha, beta)
    task_v = _value(task)
    ta_v = [_value(t) for t in ta]
    tv_v = [_value(t) for t in tv]
    # same accumulation order as weighted_total
    total = task_v
    for term in ta_v:
        total += term * alpha
    for term in tv_v:
        total += term * beta
    return LossBreakdown(task=task_v, ta=ta_v, tv=tv_v, alpha=alpha, beta=beta, total=total)


def compute_loss(model: UniMSE, batch: Batch, alpha: float = 0.5, beta: float = 0.5,
                 temperature: float = 1.0, drop_modality: Optional[str] = None
                 ) -> Tuple[Tensor, LossBreakdown, ForwardOutput]:
    """
    Forward one batch and assemble the weighted objective

    A dropped modality contributes no contrastive term.
    """
    out = model.forward(batch)
    task = task_nll(out.logits, batch.target_out, batch.target_mask)
    drop = drop_modality or ""
    ta = [] if "a" in drop else [inter_modal_cl(p.fused, p.acoustic, temperature) for p in out.projections]
    tv = [] if "v" in drop else [inter_modal_cl(p.fused, p.visual, temperature) for p in out.projections]
    loss = weighted_total(task, ta, tv, alpha, beta)
    return loss, total_loss(task, ta, tv, alpha, beta), out
