import itertools
import math

import numpy as np
import pytest

from fedmatch.consistency import (
    AugmentConfig,
    EMPTY_HELPERS,
    HelperSet,
    agreement_pseudo_label,
    agreement_votes,
    augment,
    inter_client_consistency,
    phi_loss,
)
from fedmatch.errors import NoHelpersError
from fedmatch.nn import (
    ModelArch,
    ParamVector,
    ProbDist,
    cross_entropy,
    forward,
    init_params,
)

from conftest import assert_grad_matches, central_difference, majority_vote

ARCH = ModelArch((2, 4, 3), "tanh")


def dist(rows):
    return ProbDist(np.asarray(rows, dtype=float))


class TestAugment:
    def test_identity(self):
        batch = np.arange(12.0).reshape(3, 4)
        out = augment(AugmentConfig(0.0, 0.0), batch)
        assert np.array_equal(out, batch)
        assert out is not batch

    def test_deterministic_given_rng_state(self):
        cfg = AugmentConfig(noise_sigma=0.3, mask_prob=0.2)
        batch = np.ones((4, 5))
        a = augment(cfg, batch, np.random.default_rng(9))
        b = augment(cfg, batch, np.random.default_rng(9))
        assert np.array_equal(a, b)

    def test_noise_std_monte_carlo(self):
        cfg = AugmentConfig(noise_sigma=0.1, mask_prob=0.0)
        batch = np.zeros((10_000, 4))
        out = augment(cfg, batch, np.random.default_rng(3))
        std = (out - batch).std()
        assert abs(std - 0.1) < 0.01

    def test_mask_zeroes_features(self):
        cfg = AugmentConfig(noise_sigma=0.0, mask_prob=0.5)
        batch = np.ones((2000, 4))
        out = augment(cfg, batch, np.random.default_rng(4))
        frac = (out == 0.0).mean()
        assert abs(frac - 0.5) < 0.05

    def test_rejects_bad_config(self):
        with pytest.raises(ValueError):
            AugmentConfig(noise_sigma=-0.1)
        with pytest.raises(ValueError):
            AugmentConfig(mask_prob=1.5)


class TestAgreementPseudoLabel:
    def test_worked_example(self):
        local = dist([[0.9, 0.05, 0.05]])
        helpers = [dist([[0.2, 0.7, 0.1]]), dist([[0.6, 0.3, 0.1]])]
        out = agreement_pseudo_label(local, helpers, tau=0.85)
        assert out.labels.tolist() == [[1.0, 0.0, 0.0]]  # votes (2, 1, 0)
        assert out.keep_mask.tolist() == [True]

    def test_low_confidence_dropped(self):
        local = dist([[0.4, 0.35, 0.25]])
        helpers = [dist([[0.98, 0.01, 0.01]])]
        out = agreement_pseudo_label(local, helpers, tau=0.85)
        assert out.keep_mask.tolist() == [False]

    def test_three_way_tie_lowest_index(self):
        local = dist([[0.9, 0.05, 0.05]])
        helpers = [dist([[0.05, 0.9, 0.05]]), dist([[0.05, 0.05, 0.9]])]
        out = agreement_pseudo_label(local, helpers, tau=0.5)
        assert out.labels.tolist() == [[1.0, 0.0, 0.0]]

    def test_votes_sum_to_one_plus_helpers(self):
        rng = np.random.default_rng(0)
        raw = rng.random((5, 3)) + 0.01
        local = dist(raw / raw.sum(axis=1, keepdims=True))
        helpers = []
        for _ in range(2):
            raw = rng.random((5, 3)) + 0.01
            helpers.append(dist(raw / raw.sum(axis=1, keepdims=True)))
        votes = agreement_votes(local, helpers)
        assert np.all(votes.sum(axis=1) == 3)

    def test_exhaustive_against_majority_oracle(self):
        # all argmax patterns for the local model and two helpers, C = 3
        peak, rest = 0.8, 0.1
        for la, h1, h2 in itertools.product(range(3), repeat=3):
            def row(c):
                r = [rest] * 3
                r[c] = peak
                return [r]

            out = agreement_pseudo_label(dist(row(la)), [dist(row(h1)), dist(row(h2))], tau=0.5)
            assert out.labels[0].argmax() == majority_vote(la, [h1, h2], 3)

    def test_raising_tau_never_keeps_more(self):
        rng = np.random.default_rng(1)
        raw = rng.random((40, 3)) + 0.01
        local = dist(raw / raw.sum(axis=1, keepdims=True))
        kept = [
            agreement_pseudo_label(local, [], tau).keep_mask.sum()
            for tau in np.linspace(0.0, 1.0, 21)
        ]
        assert all(a >= b for a, b in zip(kept, kept[1:]))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            agreement_pseudo_label(dist([[0.5, 0.5]]), [dist([[0.3, 0.3, 0.4]])], 0.5)


class TestInterClientConsistency:
    def test_empty_helpers_signal(self):
        with pytest.raises(NoHelpersError):
            inter_client_consistency(dist([[0.5, 0.5]]), [])

    def test_identical_helpers_zero(self):
        local = dist([[0.3, 0.7]])
        assert abs(inter_client_consistency(local, [local, local])) <= 1e-12

    def test_confident_helper_against_uniform_local(self):
        local = dist([[0.5, 0.5]])
        helper = dist([[1.0 - 1e-12, 1e-12]])
        assert inter_client_consistency(local, [helper]) == pytest.approx(
            math.log(2.0), abs=1e-9
        )

    def test_mean_of_two_helpers(self):
        local = dist([[0.4, 0.6]])
        h1 = dist([[0.8, 0.2]])
        h2 = dist([[0.1, 0.9]])
        a = inter_client_consistency(local, [h1])
        b = inter_client_consistency(local, [h2])
        both = inter_client_consistency(local, [h1, h2])
        assert both == pytest.approx((a + b) / 2.0, abs=1e-15)


class TestPhiLoss:
    def test_vacuous_terms_give_zero(self):
        # weights chosen so no row clears the confidence bar
        params = ParamVector(np.zeros(ARCH.n_params), ARCH)
        batch = np.random.default_rng(0).normal(size=(5, 2))
        value, grad = phi_loss(params, batch, EMPTY_HELPERS, tau=0.85)
        assert value == 0.0
        assert np.all(grad == 0.0)

    def test_self_helper_reduces_to_pseudo_label_ce(self):
        rng = np.random.default_rng(2)
        params = init_params(ARCH, rng)
        params = params.with_values(params.values * 6.0)  # push predictions confident
        batch = rng.normal(size=(12, 2))
        preds = forward(params, batch)
        helpers = HelperSet((params,), (1,))
        value, _ = phi_loss(params, batch, helpers, tau=0.4)
        pseudo = agreement_pseudo_label(preds, [preds], tau=0.4)
        kept = pseudo.keep_mask
        expected = cross_entropy(pseudo.labels[kept], ProbDist(preds.rows[kept]))
        # KL(self || self) contributes nothing
        assert value == pytest.approx(expected, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        params = init_params(ARCH, rng)
        params = params.with_values(params.values * 4.0)
        batch = rng.normal(size=(8, 2))
        helper = init_params(ARCH, np.random.default_rng(6))
        helpers = HelperSet((helper,), (1,))
        aug = AugmentConfig(noise_sigma=0.05, mask_prob=0.0)

        def value_at(v):
            val, _ = phi_loss(
                ParamVector(v, ARCH), batch, helpers, 0.5, aug, np.random.default_rng(77)
            )
            return val

        _, analytic = phi_loss(params, batch, helpers, 0.5, aug, np.random.default_rng(77))
        assert_grad_matches(analytic, central_difference(value_at, params.values))

    def test_helpers_never_modified(self):
        rng = np.random.default_rng(8)
        helper = init_params(ARCH, rng)
        snapshot = helper.values.tobytes()
        params = init_params(ARCH, rng)
        batch = rng.normal(size=(6, 2))
        phi_loss(params, batch, HelperSet((helper,), (0,)), tau=0.3)
        assert helper.values.tobytes() == snapshot


class TestHelperSet:
    def test_requires_matching_ids(self):
        with pytest.raises(ValueError):
            HelperSet((init_params(ARCH, np.random.default_rng(0)),), ())

    def test_len(self):
        assert len(EMPTY_HELPERS) == 0
