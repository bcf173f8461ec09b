"""Unlabeled-data losses: agreement pseudo-labels, inter-client consistency,
and the combined regularizer used for the unsupervised half of training.

Helper models are frozen peers: they vote on pseudo-labels and anchor the
KL consistency term, but never receive gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import NoHelpersError
from .nn import (
    ParamVector,
    ProbDist,
    _backward_from_dlogits,
    _forward_cached,
    PROB_FLOOR,
    forward,
    kl_divergence,
    one_hot,
)


@dataclass(frozen=True)
class AugmentConfig:
    """Stochastic input perturbation: additive Gaussian noise plus feature masking."""

    noise_sigma: float = 0.1
    mask_prob: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError("mask_prob must lie in [0, 1]")


IDENTITY_AUGMENT = AugmentConfig(noise_sigma=0.0, mask_prob=0.0)


@dataclass(frozen=True)
class HelperSet:
    """Frozen peer parameter vectors attached to a client for one round."""

    members: tuple[ParamVector, ...] = ()
    source_ids: tuple[int, ...] = ()

    def __post_init__(self):
        if len(self.members) != len(self.source_ids):
            raise ValueError("one source id per helper required")

    def __len__(self) -> int:
        return len(self.members)


EMPTY_HELPERS = HelperSet()


@dataclass(frozen=True)
class PseudoBatch:
    """One-hot vote winners per row plus the confidence keep mask."""

    labels: np.ndarray
    keep_mask: np.ndarray

    def __post_init__(self):
        if self.labels.shape[0] != self.keep_mask.shape[0]:
            raise ValueError("keep mask length must match label rows")


def augment(
    cfg: AugmentConfig, batch: np.ndarray, rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    """Perturb a feature batch. Deterministic given the generator state."""
    out = np.array(batch, dtype=np.float64, copy=True)
    if cfg.noise_sigma == 0.0 and cfg.mask_prob == 0.0:
        return out
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    if cfg.noise_sigma > 0.0:
        out += cfg.noise_sigma * rng.standard_normal(out.shape)
    if cfg.mask_prob > 0.0:
        out[rng.random(out.shape) < cfg.mask_prob] = 0.0
    return out


def agreement_votes(
    local_pred: ProbDist, helper_preds: Sequence[ProbDist]
) -> np.ndarray:
    """Per-row vote counts: one argmax vote from the local model and each helper."""
    votes = one_hot(local_pred)
    for pred in helper_preds:
        if pred.rows.shape != local_pred.rows.shape:
            raise ValueError("helper prediction shape differs from local prediction")
        votes = votes + one_hot(pred)
    return votes


def agreement_pseudo_label(
    local_pred: ProbDist, helper_preds: Sequence[ProbDist], tau: float
) -> PseudoBatch:
    """Majority vote over argmax predictions, gated by local confidence.

    Rows whose local max probability falls below tau are marked as dropped;
    vote ties resolve to the lowest class index.
    """
    votes = agreement_votes(local_pred, helper_preds)
    n, c = votes.shape
    labels = np.zeros((n, c))
    labels[np.arange(n), votes.argmax(axis=1)] = 1.0
    keep = local_pred.rows.max(axis=1) >= tau
    return PseudoBatch(labels=labels, keep_mask=keep)


def inter_client_consistency(
    local_pred: ProbDist, helper_preds: Sequence[ProbDist]
) -> float:
    """Mean KL from each frozen helper prediction to the local prediction."""
    if len(helper_preds) == 0:
        raise NoHelpersError("inter-client consistency needs at least one helper")
    total = 0.0
    for pred in helper_preds:
        total += kl_divergence(pred, local_pred)
    return total / len(helper_preds)


def phi_loss(
    params: ParamVector,
    batch_u: np.ndarray,
    helpers: HelperSet = EMPTY_HELPERS,
    tau: float = 0.85,
    aug: AugmentConfig = IDENTITY_AUGMENT,
    rng: Optional[np.random.Generator] = None,
) -> tuple[float, np.ndarray]:
    """Combined consistency regularizer and its flat parameter gradient.

    Two terms: cross-entropy of the model on perturbed inputs against the
    frozen agreement pseudo-labels (averaged over kept rows), plus the mean
    KL from helper predictions to the local prediction on the clean inputs.
    Either term vanishes when it has nothing to work with (no confident
    rows, no helpers). Pseudo-labels and the keep mask are snapshots: no
    gradient flows through them.
    """
    batch_u = np.asarray(batch_u, dtype=np.float64)
    probs_u, caches_u = _forward_cached(params, batch_u)
    local_dist = ProbDist(probs_u)
    helper_dists = [forward(member, batch_u) for member in helpers.members]
    pseudo = agreement_pseudo_label(local_dist, helper_dists, tau)

    value = 0.0
    grad = np.zeros(params.arch.n_params)

    kept = pseudo.keep_mask
    n_kept = int(kept.sum())
    if n_kept > 0:
        perturbed = augment(aug, batch_u, rng)
        probs_aug, caches_aug = _forward_cached(params, perturbed)
        targets = pseudo.labels[kept]
        logq = np.log(np.maximum(probs_aug[kept], PROB_FLOOR))
        value += float(-(targets * logq).sum(axis=1).mean())
        dlogits = np.zeros_like(probs_aug)
        dlogits[kept] = (probs_aug[kept] - targets) / n_kept
        grad += _backward_from_dlogits(params, caches_aug, dlogits)

    if len(helper_dists) > 0:
        value += inter_client_consistency(local_dist, helper_dists)
        mean_helper = np.mean([d.rows for d in helper_dists], axis=0)
        dlogits = (probs_u - mean_helper) / probs_u.shape[0]
        grad += _backward_from_dlogits(params, caches_u, dlogits)

    return value, grad
