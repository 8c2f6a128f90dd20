"""Loss terms for last-mini-batch confidence-weighted self-distillation.

All functions operate on ``batch x 1 x H x W`` tensors and are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

CONFIDENCE_MODES = ("per-sample", "per-batch")


class ConfigError(ValueError):
    """Invalid configuration value (temperature, mode, sizes, ...)."""


class ContractError(ValueError):
    """Arguments violate a shape or value contract."""


def _check_same_shape(*tensors: Tensor) -> None:
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ContractError(f"shape mismatch: {tuple(shape)} vs {tuple(t.shape)}")


def _check_temperature(T: float) -> None:
    if not T > 0:
        raise ConfigError(f"temperature must be positive, got {T}")


def sigmoid_with_temperature(logits: Tensor, T: float = 1.0) -> Tensor:
    """Elementwise ``sigmoid(logits / T)``. ``T == 1`` is exactly the plain sigmoid."""
    _check_temperature(T)
    if T == 1:
        return torch.sigmoid(logits)
    return torch.sigmoid(logits / T)


def dice_loss(prob: Tensor, mask: Tensor, eps: float = 1.0, reduction: str = "batch") -> Tensor:
    """Soft Dice loss ``1 - (2 sum(p*y) + eps) / (sum(p) + sum(y) + eps)``.

    ``reduction="batch"`` pools the sums over the whole batch and returns a
    scalar; ``reduction="none"`` returns one loss per sample.
    """
    _check_same_shape(prob, mask)
    if eps <= 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    mask = mask.to(prob.dtype)
    if reduction == "batch":
        dims = tuple(range(prob.dim()))
    elif reduction == "none":
        dims = tuple(range(1, prob.dim()))
    else:
        raise ConfigError(f"unknown reduction {reduction!r}")
    inter = (prob * mask).sum(dim=dims)
    denom = prob.sum(dim=dims) + mask.sum(dim=dims)
    return 1.0 - (2.0 * inter + eps) / (denom + eps)


def bce_loss(logits: Tensor, mask: Tensor) -> Tensor:
    """Mean binary cross-entropy computed directly from logits."""
    _check_same_shape(logits, mask)
    return F.binary_cross_entropy_with_logits(logits, mask.to(logits.dtype))


def mse_consistency(p: Tensor, q: Tensor, per_sample: bool = False) -> Tensor:
    """Mean squared difference; a per-sample vector when ``per_sample``."""
    _check_same_shape(p, q)
    sq = (p - q) ** 2
    if per_sample:
        return sq.flatten(1).mean(dim=1)
    return sq.mean()


@torch.no_grad()
def confidence_coefficient(
    prev_soft: Tensor, prev_mask: Tensor, eps: float = 1.0, mode: str = "per-sample"
) -> Tensor:
    """Trust placed in the previous prediction: ``1 - dice_loss(prev_soft, prev_mask)``.

    Returned detached; it only scales the consistency term.
    """
    if mode not in CONFIDENCE_MODES:
        raise ConfigError(f"unknown confidence mode {mode!r}; expected one of {CONFIDENCE_MODES}")
    reduction = "none" if mode == "per-sample" else "batch"
    return 1.0 - dice_loss(prev_soft.detach(), prev_mask, eps=eps, reduction=reduction)


def dcsd_loss(
    curr_soft_on_prev: Tensor,
    prev_soft_stored: Tensor,
    prev_mask: Tensor,
    mode: str = "per-sample",
    eps: float = 1.0,
    confidence: Tensor | float | None = None,
) -> tuple[Tensor, Tensor]:
    """Confidence-weighted consistency between the current and stored predictions.

    Returns ``(loss, confidence)``. In per-sample mode the loss is
    ``mean_i(c_i * MSE_i)``; in per-batch mode it is ``c * MSE`` over the
    whole batch. Passing ``confidence`` overrides the computed coefficient
    (used to force it to 1 in diagnostics).
    """
    _check_same_shape(curr_soft_on_prev, prev_soft_stored, prev_mask)
    if mode not in CONFIDENCE_MODES:
        raise ConfigError(f"unknown confidence mode {mode!r}; expected one of {CONFIDENCE_MODES}")
    target = prev_soft_stored.detach()
    if confidence is None:
        conf = confidence_coefficient(target, prev_mask, eps=eps, mode=mode)
    else:
        conf = torch.as_tensor(confidence, dtype=curr_soft_on_prev.dtype)
        if mode == "per-sample" and conf.dim() == 0:
            conf = conf.expand(curr_soft_on_prev.shape[0])
    per_sample = mode == "per-sample"
    mse = mse_consistency(curr_soft_on_prev, target, per_sample=per_sample)
    loss = (conf * mse).mean() if per_sample else conf * mse
    return loss, conf


@dataclass
class LossBreakdown:
    dice: Tensor
    bce: Tensor
    dcsd: Tensor
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("dice", "bce", "dcsd", "total")}


def total_loss(
    out: Tensor, label: Tensor, dcsd_value: Tensor | float = 0.0, T: float = 1.0, eps: float = 1.0
) -> LossBreakdown:
    """Supervised Dice + BCE on the untempered logits, plus ``T**2 * dcsd_value``.

    With ``dcsd_value == 0`` the total is exactly ``dice + bce``.
    """
    _check_temperature(T)
    dice = dice_loss(torch.sigmoid(out), label, eps=eps)
    bce = bce_loss(out, label)
    supervised = dice + bce
    if isinstance(dcsd_value, Tensor) or dcsd_value != 0:
        distill = torch.as_tensor(dcsd_value, dtype=out.dtype)
        total = supervised + (T * T) * distill
    else:
        distill = torch.zeros((), dtype=out.dtype)
        total = supervised
    return LossBreakdown(dice=dice, bce=bce, dcsd=distill, total=total)
