"""Regression losses for steering prediction, including the cost-sensitive
families that counter long-tail label distributions.

Steering datasets are dominated by near-zero angles, so an unweighted loss
lets the network collapse onto small predictions. The two weighted
families multiply each sample's residual penalty by a factor that grows
with the magnitude of the ground-truth label:

    steering_loss   = 1/(2n) * sum (1 + alpha*|y|^gamma)^delta * (y - y')^2
    steering_loss2  = 1/n    * sum (1 + alpha*|y|^gamma) * smooth_l1(|y - y'|)

where ``y`` is ground truth and ``y'`` the prediction; the weight depends
on the label, never on the prediction. ``steering_loss2`` drops the
``delta`` exponent and swaps the quadratic penalty for smooth-L1, which
keeps the robustness of absolute error for large residuals.

Everything here is computed in float64; training uses an equivalent
tensor implementation (see ``training.torch_loss``).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class LossFamily(str, Enum):
    MAE = "MAE"
    MSE = "MSE"
    STEERING_LOSS = "STEERING_LOSS"
    STEERING_LOSS2 = "STEERING_LOSS2"


@dataclass(frozen=True)
class LossConfig:
    """Loss family selector plus weighting hyperparameters.

    ``delta`` only applies to ``STEERING_LOSS``; it defaults to 1.0 there
    and must be left unset (``None``) for ``STEERING_LOSS2``, which has no
    such exponent. ``alpha`` and ``gamma`` default to 1.0.
    """

    family: LossFamily
    alpha: float = 1.0
    gamma: float = 1.0
    delta: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "family", LossFamily(self.family))
        if self.alpha < 0 or self.gamma < 0:
            raise ValueError(f"alpha and gamma must be >= 0, got {self.alpha}, {self.gamma}")
        if self.delta is not None and self.delta < 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")
        if self.family is LossFamily.STEERING_LOSS2 and self.delta is not None:
            raise ValueError("STEERING_LOSS2 has no delta hyperparameter; leave it unset")

    def effective_delta(self) -> float:
        return 1.0 if self.delta is None else self.delta


def smooth_l1(x):
    """Smooth-L1 penalty: ``0.5*x**2`` for ``|x| <= 1``, else ``|x| - 0.5``.

    Continuous with continuous first derivative at the knee. Accepts
    scalars or arrays.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("smooth_l1 input must be finite")
    ax = np.abs(x)
    out = np.where(ax <= 1.0, 0.5 * x * x, ax - 0.5)
    return float(out) if out.ndim == 0 else out


def _validate_pair(preds, truths) -> tuple[np.ndarray, np.ndarray]:
    preds = np.asarray(preds, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if preds.ndim != 1 or truths.ndim != 1:
        preds = preds.reshape(-1)
        truths = truths.reshape(-1)
    if preds.size != truths.size:
        raise ValueError(f"length mismatch: {preds.size} predictions vs {truths.size} truths")
    if preds.size == 0:
        raise ValueError("loss of an empty sample set is undefined")
    if not (np.all(np.isfinite(preds)) and np.all(np.isfinite(truths))):
        raise ValueError("losses require finite predictions and truths")
    return preds, truths


def _label_weight(truths: np.ndarray, cfg: LossConfig) -> np.ndarray:
    return 1.0 + cfg.alpha * np.abs(truths) ** cfg.gamma


def loss_value(preds, truths, cfg: LossConfig) -> float:
    """Scalar loss over a batch; ``preds``/``truths`` in radians."""
    preds, truths = _validate_pair(preds, truths)
    r = truths - preds
    family = cfg.family
    if family is LossFamily.MAE:
        return float(np.mean(np.abs(r)))
    if family is LossFamily.MSE:
        return float(np.mean(r * r))
    if family is LossFamily.STEERING_LOSS:
        w = _label_weight(truths, cfg) ** cfg.effective_delta()
        return float(0.5 * np.mean(w * r * r))
    if family is LossFamily.STEERING_LOSS2:
        w = _label_weight(truths, cfg)
        return float(np.mean(w * smooth_l1(r)))
    raise ValueError(f"unknown loss family {family!r}")


def loss_gradient(preds, truths, cfg: LossConfig) -> np.ndarray:
    """Element-wise derivative of ``loss_value`` w.r.t. each prediction.

    Closed forms; at the MAE kink (zero residual) the subgradient 0 is
    used. Includes the 1/n averaging factor, so summing
    ``loss_gradient * dp`` approximates the change in ``loss_value``.
    """
    preds, truths = _validate_pair(preds, truths)
    n = preds.size
    r = truths - preds
    family = cfg.family
    if family is LossFamily.MAE:
        return -np.sign(r) / n
    if family is LossFamily.MSE:
        return -2.0 * r / n
    if family is LossFamily.STEERING_LOSS:
        w = _label_weight(truths, cfg) ** cfg.effective_delta()
        return -w * r / n
    if family is LossFamily.STEERING_LOSS2:
        w = _label_weight(truths, cfg)
        # d/dp smooth_l1(y - p): -r on the quadratic branch, -sign(r) outside.
        inner = np.where(np.abs(r) <= 1.0, -r, -np.sign(r))
        return w * inner / n
    raise ValueError(f"unknown loss family {family!r}")
