"""Shared test oracles, independent of the implementations they check."""

import numpy as np


def central_difference(f, x, step=1e-5):
    """Central finite-difference gradient of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        hi = x.copy()
        lo = x.copy()
        hi[i] += step
        lo[i] -= step
        grad[i] = (f(hi) - f(lo)) / (2.0 * step)
    return grad


def assert_grad_matches(analytic, numeric, rel=1e-3, floor=1e-8):
    """Relative agreement wherever the analytic gradient is meaningfully nonzero."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    mask = np.abs(analytic) > floor
    assert mask.any(), "gradient check needs at least one live coordinate"
    rel_err = np.abs(analytic[mask] - numeric[mask]) / np.abs(analytic[mask])
    assert rel_err.max() <= rel, f"max relative error {rel_err.max():.3e} exceeds {rel}"


def brute_force_knn(points, ids, query, k, exclude=None):
    """k nearest by (squared distance, id), optionally excluding one id."""
    ranked = sorted(
        (float(np.sum((np.asarray(p) - np.asarray(query)) ** 2)), int(i))
        for p, i in zip(points, ids)
        if i != exclude
    )
    return [i for _, i in ranked[:k]]


def majority_vote(local_argmax, helper_argmaxes, n_classes):
    """Plain vote count; ties resolve to the lowest class index."""
    counts = [0] * n_classes
    counts[local_argmax] += 1
    for a in helper_argmaxes:
        counts[a] += 1
    best = 0
    for c in range(1, n_classes):
        if counts[c] > counts[best]:
            best = c
    return best
