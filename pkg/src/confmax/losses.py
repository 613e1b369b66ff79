"""Confidence-maximization objectives and the class-distribution regularizer.

Every loss takes logits ``o`` of shape ``(n_cl,)`` or ``(N, n_cl)`` and returns
one value per row (a 0-d tensor for a single vector).  They are written in
logit space with max-subtracted log-sum-exp; probability-space versions
(``cross_entropy_probs``, ``nll_ratio``) are kept for cross-checking.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DomainError, ShapeError

CONF_KINDS = ("entropy", "hard-pl", "hlr", "slr")
PROB_FLOOR = 1e-30


def _check_logits(o: Tensor) -> None:
    if o.ndim not in (1, 2) or o.shape[-1] < 2:
        raise ShapeError(f"expected logits (n_cl,) or (N, n_cl) with n_cl >= 2, got {o.shape}")


def softmax(o: Tensor) -> Tensor:
    return ad.softmax(o)


def predicted_class(o: Tensor) -> np.ndarray:
    """c* = argmax, lowest index on ties; a constant for differentiation."""
    return ad.argmax(o, axis=-1)


def cross_entropy_logits(o: Tensor, y_r) -> Tensor:
    """H(sm(o), y^r) = -o_{c^r} + log Σ_i e^{o_i} for one-hot ``y_r``."""
    _check_logits(o)
    y = np.asarray(y_r, dtype=np.float64)
    if y.shape != o.shape or not np.all((y == 0) | (y == 1)) or not np.all(y.sum(axis=-1) == 1):
        raise ContractError("reference label must be one-hot with the logits' shape")
    c_r = np.argmax(y, axis=-1)
    return ad.sub(ad.log_sum_exp(o), ad.take(o, c_r))


def cross_entropy_labels(o: Tensor, labels) -> Tensor:
    """Cross-entropy against integer class labels (the supervised oracle)."""
    _check_logits(o)
    labels = np.asarray(labels, dtype=np.intp)
    return ad.sub(ad.log_sum_exp(o), ad.take(o, labels))


def loss_pl(o: Tensor) -> Tensor:
    """Hard pseudo-label loss -log ŷ_{c*}."""
    _check_logits(o)
    c = predicted_class(o)
    return ad.sub(ad.log_sum_exp(o), ad.take(o, c))


def loss_ent(o: Tensor) -> Tensor:
    """Entropy of sm(o), evaluated as -Σ sm(o)·log_softmax(o)."""
    _check_logits(o)
    return ad.neg(ad.sum(ad.mul(ad.softmax(o), ad.log_softmax(o)), axis=-1))


def loss_hlr(o: Tensor) -> Tensor:
    """Hard likelihood ratio: -o_{c*} + log Σ_{i≠c*} e^{o_i}."""
    _check_logits(o)
    c = predicted_class(o)
    return ad.sub(ad.log_sum_exp(o, exclude=c), ad.take(o, c))


def loss_slr(o: Tensor) -> Tensor:
    """Soft likelihood ratio: Σ_c ŷ_c (-o_c + log Σ_{i≠c} e^{o_i}).

    The ŷ weights are differentiated as well (no stop-gradient).
    """
    _check_logits(o)
    ratio = ad.sub(ad.log_sum_exp_others(o), o)
    return ad.sum(ad.mul(ad.softmax(o), ratio), axis=-1)


CONF_LOSSES = {"entropy": loss_ent, "hard-pl": loss_pl, "hlr": loss_hlr, "slr": loss_slr}


# ---------------------------------------------------------------------------
# probability-space forms


def cross_entropy_probs(y_hat, y_r) -> np.ndarray:
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y_r = np.asarray(y_r, dtype=np.float64)
    return -(y_r * np.log(np.maximum(y_hat, PROB_FLOOR))).sum(axis=-1)


def others_mass(y_hat) -> np.ndarray:
    """Σ_{i≠c} ŷ_i for every c, summed explicitly rather than as 1 - ŷ_c."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    n = y_hat.shape[-1]
    mask = ~np.eye(n, dtype=bool)
    return (y_hat[..., None, :] * mask).sum(axis=-1)


def nll_ratio(y_hat, y_r) -> np.ndarray:
    """R(ŷ, y^r) = -Σ_c y^r_c log(ŷ_c / Σ_{i≠c} ŷ_i) on confidences."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y_r = np.asarray(y_r, dtype=np.float64)
    if y_hat.shape != y_r.shape:
        raise ShapeError(f"confidences {y_hat.shape} vs reference {y_r.shape}")
    num = np.log(np.maximum(y_hat, PROB_FLOOR))
    den = np.log(np.maximum(others_mass(y_hat), PROB_FLOOR))
    return -(y_r * (num - den)).sum(axis=-1)


# ---------------------------------------------------------------------------
# diversity regularizer


@dataclass
class DiversityState:
    """Running estimate p_t of the prediction distribution.

    ``p`` is the detached value.  After ``update_diversity`` the differentiable
    estimate for the current step lives in ``p_tensor``; only the current batch
    contributes to its gradient.
    """

    p: np.ndarray
    kappa: float
    target: np.ndarray
    t: int = 0
    p_tensor: Optional[Tensor] = field(default=None, repr=False, compare=False)

    @classmethod
    def uniform(cls, n_cl: int, kappa: float, target=None) -> "DiversityState":
        tgt = np.full(n_cl, 1.0 / n_cl) if target is None else np.asarray(target, dtype=np.float64)
        _check_distribution(tgt, "target")
        if not 0.0 <= kappa <= 1.0:
            raise ContractError(f"kappa must lie in [0, 1], got {kappa}")
        return cls(np.full(n_cl, 1.0 / n_cl), float(kappa), tgt.copy())


def _check_distribution(p: np.ndarray, what: str) -> None:
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ContractError(f"{what} must be a probability vector")


def update_diversity(state: DiversityState, y_hat: Tensor) -> DiversityState:
    """p_t = κ·p_{t-1} + (1-κ)·mean_k ŷ^(k); returns a new state."""
    if y_hat.ndim != 2 or y_hat.shape[0] == 0:
        raise ContractError("update_diversity needs a non-empty (N, n_cl) batch of confidences")
    if y_hat.shape[1] != state.p.shape[0]:
        raise ShapeError(f"batch has {y_hat.shape[1]} classes, state has {state.p.shape[0]}")
    k = state.kappa
    emp = ad.mean(y_hat, axis=0)
    p_t = ad.add(Tensor(k * state.p), ad.scale(emp, 1.0 - k))
    return replace(state, p=p_t.data.copy(), t=state.t + 1, p_tensor=p_t)


def loss_div(state: DiversityState) -> Tensor:
    """KL(p_t || target) with 0·log 0 := 0."""
    if np.any(state.target <= 0):
        raise DomainError("target distribution must be strictly positive")
    p = state.p_tensor if state.p_tensor is not None else Tensor(state.p)
    log_target = Tensor(np.log(state.target))
    return ad.sub(ad.sum(ad.xlogx(p)), ad.sum(ad.mul(p, log_target)))


@dataclass(frozen=True)
class LossWeights:
    delta: float = 0.025
    conf_kind: str = "slr"
    use_div: bool = True

    def __post_init__(self):
        if not np.isfinite(self.delta) or self.delta < 0:
            raise ContractError(f"delta must be finite and >= 0, got {self.delta}")


@dataclass
class LossResult:
    total: Tensor
    l_div: float
    l_conf: float
    state: DiversityState


def total_loss(o: Tensor, state: DiversityState, w: LossWeights) -> LossResult:
    """L = L_div(updated p_t) + δ·mean_batch L_conf."""
    fn = CONF_LOSSES.get(w.conf_kind)
    if fn is None:
        raise ContractError(f"unknown confidence loss {w.conf_kind!r}; expected one of {CONF_KINDS}")
    if o.ndim != 2:
        raise ShapeError(f"total_loss expects batched logits, got {o.shape}")
    conf = ad.mean(fn(o))
    new_state = update_diversity(state, ad.softmax(o))
    if w.use_div:
        div = loss_div(new_state)
        total = ad.add(div, ad.scale(conf, w.delta))
        div_val = div.item()
    else:
        total = ad.scale(conf, w.delta)
        div_val = loss_div(replace(new_state, p_tensor=None)).item()
    return LossResult(total, div_val, conf.item(), new_state)
