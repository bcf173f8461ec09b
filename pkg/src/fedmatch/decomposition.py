"""Additive parameter decomposition and the two disjoint training steps.

The full model is theta = sigma + psi. Supervised steps move only sigma
(the labeled-data half); unsupervised steps move only psi (the
unlabeled-data half), with an L1 proximal shrink that drives unused psi
coordinates to exact zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .consistency import AugmentConfig, HelperSet, EMPTY_HELPERS, IDENTITY_AUGMENT, phi_loss
from .nn import OptimState, ParamVector, ce_value_and_grad


@dataclass(frozen=True)
class LossConfig:
    """Loss-term weights and the pseudo-label confidence threshold."""

    lambda_s: float = 10.0
    lambda_iccs: float = 1e-2
    lambda_l1: float = 1e-4
    lambda_l2: float = 10.0
    tau: float = 0.85

    def __post_init__(self):
        for name in ("lambda_s", "lambda_iccs", "lambda_l1", "lambda_l2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")


@dataclass(frozen=True)
class DecomposedModel:
    """Pair of aligned parameter halves; the usable model is their sum."""

    sigma: ParamVector
    psi: ParamVector

    def __post_init__(self):
        if self.sigma.arch != self.psi.arch:
            raise ValueError("sigma and psi must share one architecture")
        if self.sigma.values.shape != self.psi.values.shape:
            raise ValueError("sigma and psi must have equal length")


def compose(model: DecomposedModel) -> ParamVector:
    """Element-wise sigma + psi."""
    return ParamVector(model.sigma.values + model.psi.values, model.sigma.arch)


def soft_threshold(values: np.ndarray, amount: float) -> np.ndarray:
    """Proximal L1 shrink: pull every coordinate toward zero by `amount`."""
    if amount == 0.0:
        return values
    return np.sign(values) * np.maximum(np.abs(values) - amount, 0.0)


def supervised_step(
    model: DecomposedModel,
    labeled_batch: tuple[np.ndarray, np.ndarray],
    cfg: LossConfig,
    opt: OptimState,
) -> DecomposedModel:
    """One SGD step on sigma from the weighted cross-entropy at sigma + psi.

    The gradient is taken with respect to the composed parameters and
    applied to sigma only; psi is returned untouched.
    """
    features, targets = labeled_batch
    if targets is None:
        raise ValueError("supervised step requires a labeled batch")
    theta = compose(model)
    _, grad = ce_value_and_grad(theta, features, targets)
    new_sigma = model.sigma.values - opt.lr * cfg.lambda_s * grad
    return DecomposedModel(model.sigma.with_values(new_sigma), model.psi)


def unsupervised_step(
    model: DecomposedModel,
    batch_u: np.ndarray,
    helpers: HelperSet,
    cfg: LossConfig,
    opt: OptimState,
    aug: AugmentConfig = IDENTITY_AUGMENT,
    rng: Optional[np.random.Generator] = None,
) -> DecomposedModel:
    """One step on psi: consistency and L2 gradients, then the L1 proximal shrink.

    sigma is returned untouched. The L2 term penalizes ||sigma - psi||^2
    as configured, so its psi-gradient is 2 * (psi - sigma).
    """
    if helpers is None:
        helpers = EMPTY_HELPERS
    grad = np.zeros(model.psi.values.shape[0])
    if cfg.lambda_iccs > 0.0:
        theta = compose(model)
        _, phi_grad = phi_loss(theta, batch_u, helpers, cfg.tau, aug, rng)
        grad += cfg.lambda_iccs * phi_grad
    if cfg.lambda_l2 > 0.0:
        grad += cfg.lambda_l2 * 2.0 * (model.psi.values - model.sigma.values)
    shifted = model.psi.values - opt.lr * grad
    new_psi = soft_threshold(shifted, opt.lr * cfg.lambda_l1)
    return DecomposedModel(model.sigma, model.psi.with_values(new_psi))
