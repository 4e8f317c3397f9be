import math

import numpy as np
import pytest

from implicit_policy import entropy as en
from implicit_policy.approximators import Adam
from implicit_policy.autodiff import Graph, backward

from oracles import gaussian_entropy_gradient_samples, within_se


def zero_classifier(**kw):
    clf = en.DensityClassifier(1, 2, -1.0, 1.0, hidden=(16,), **kw)
    for k, v in clf.params.items():
        clf.params.values[k] = np.zeros_like(v)
    return clf


def uniform_sampler(graph, states, rng):
    return graph.constant(rng.uniform(-1, 1, size=(states.shape[0], 2)))


class TestLoss:
    def test_uninformed_classifier(self):
        clf = zero_classifier()
        rng = np.random.default_rng(0)
        loss = en.classifier_loss(clf, np.zeros((5, 1)), rng.uniform(-1, 1, (5, 2)), np.zeros((7, 1)), rng.uniform(-1, 1, (7, 2)), Graph())
        assert abs(loss.item() - 2 * math.log(2)) < 1e-15
        assert abs(2 * math.log(2) - 1.3863) < 1e-4

    def test_stable_for_saturated_logits(self):
        clf = zero_classifier()
        last = f"b{clf.spec.n_layers - 1}"
        clf.params.values[last] = np.array([800.0])
        loss = en.classifier_loss(clf, np.zeros((2, 1)), np.zeros((2, 2)), np.zeros((2, 1)), np.zeros((2, 2)), Graph())
        assert abs(loss.item() - 800.0) < 1e-9

    def test_empty_batch(self):
        clf = zero_classifier()
        with pytest.raises(Exception):
            en.classifier_loss(clf, np.zeros((0, 1)), np.zeros((0, 2)), np.zeros((3, 1)), np.zeros((3, 2)), Graph())

    def test_uniform_policy_optimum_is_zero(self):
        # policy == uniform: the best logit is 0 everywhere
        clf = en.DensityClassifier(1, 2, -1.0, 1.0, hidden=(16,), seed=1)
        rng = np.random.default_rng(1)
        en.train_classifier(clf, lambda r, n: (np.zeros((n, 1)), r.uniform(-1, 1, (n, 2))), 400, 256, 1e-3, rng, final_lr=1e-4)
        c = clf.logits_array(np.zeros((1000, 1)), rng.uniform(-1, 1, (1000, 2)))
        assert np.abs(c).mean() < 0.1

    def test_classifier_learns_a_ratio(self):
        # policy concentrated on the right half of the box: ratio 2 there, 0 elsewhere
        clf = en.DensityClassifier(1, 1, -1.0, 1.0, hidden=(32,), seed=2)
        rng = np.random.default_rng(2)
        en.train_classifier(clf, lambda r, n: (np.zeros((n, 1)), r.uniform(0, 1, (n, 1))), 800, 256, 3e-3, rng)
        right = clf.logits_array(np.zeros((50, 1)), np.linspace(0.2, 0.9, 50)[:, None])
        left = clf.logits_array(np.zeros((50, 1)), np.linspace(-0.9, -0.2, 50)[:, None])
        assert abs(np.median(right) - math.log(2)) < 0.15
        assert np.median(left) < -2.0


class TestEstimate:
    def test_uniform_policy_entropy(self):
        clf = zero_classifier()
        h, se = en.entropy_estimate(clf, uniform_sampler, np.zeros(1), 100, np.random.default_rng(0))
        assert abs(h - math.log(4)) < 1e-15 and se == 0.0

    def test_log_volume(self):
        clf = en.DensityClassifier(1, 2, (-1.0, -3.0), (1.0, 3.0))
        assert abs(clf.log_volume - math.log(12)) < 1e-15

    def test_unbiased(self):
        clf = en.DensityClassifier(1, 2, -1.0, 1.0, hidden=(16,), seed=3)

        def sampler(graph, states, rng):
            return graph.constant(np.tanh(rng.normal(0.3, 0.5, size=(states.shape[0], 2))))

        rng = np.random.default_rng(4)
        singles = np.array([en.entropy_estimate(clf, sampler, np.zeros(1), 1, rng)[0] for _ in range(3000)])
        big, _ = en.entropy_estimate(clf, sampler, np.zeros(1), 100_000, rng)
        ok, mean, se = within_se(singles, big)
        assert ok


class TestGradient:
    def test_constant_sample_path_has_zero_gradient(self):
        clf = en.DensityClassifier(1, 2, -1.0, 1.0, hidden=(8,), seed=0)
        g = Graph()
        theta = g.leaf(np.array([0.2, -0.1]))

        def sampler(graph, states, rng):
            # depends on theta only through a zero multiple
            return graph.constant(np.full((states.shape[0], 2), 0.4)) + theta * 0.0

        grads, _ = en.entropy_gradient(clf, sampler, {"theta": theta}, g, np.zeros((3, 1)), 4, np.random.default_rng(0))
        np.testing.assert_array_equal(grads["theta"], [0.0, 0.0])

    def test_location_family_gradient_is_zero(self):
        gm, _ = gaussian_entropy_gradient_samples([0.4, -0.7], np.eye(2), 100_000, 1)
        ok, mean, se = within_se(gm, np.zeros(2))
        assert ok

    def test_scale_family_gradient_is_one(self):
        # a = e^theta eps: the gradient in theta is (dL/dtheta) * dH/dL = e^theta * e^-theta per axis
        _, gL = gaussian_entropy_gradient_samples([0.0, 0.0], np.eye(2) * math.e**0.5, 100_000, 2)
        per_theta = gL[:, 0, 0] * math.e**0.5
        ok, mean, se = within_se(per_theta, 1.0)
        assert ok

    def test_closed_form_matches_exact_gradient(self):
        L = np.array([[1.2, 0.0], [0.4, 0.7]])
        gm, gL = gaussian_entropy_gradient_samples([0.3, -0.2], L, 100_000, 3)
        assert within_se(gm, np.zeros(2))[0]
        # d log|det L| / dL = L^{-T}
        assert within_se(gL, np.linalg.inv(L).T)[0]

    def test_classifier_is_frozen(self):
        clf = en.DensityClassifier(1, 2, -1.0, 1.0, hidden=(8,), seed=5)
        before = clf.params.copy()

        def run(delta):
            saved = clf.params.copy()
            for k in clf.params.names():
                clf.params.values[k] = clf.params[k] + delta
            g = Graph()
            theta = g.leaf(np.array([0.1, 0.2]))

            def sampler(graph, states, rng):
                return (theta + graph.constant(rng.normal(scale=0.3, size=(states.shape[0], 2)))).tanh()

            grads, _ = en.entropy_gradient(clf, sampler, {"theta": theta}, g, np.zeros((2, 1)), 50, np.random.default_rng(6))
            clf.params = saved
            return grads["theta"]

        base = run(0.0)
        assert clf.params.equals(before)
        small = run(1e-7)
        assert np.abs(small - base).max() < 1e-4
        assert clf.params.equals(before)

    def test_classifier_step_reduces_loss(self):
        clf = en.DensityClassifier(1, 1, -1.0, 1.0, hidden=(16,), seed=7)
        rng = np.random.default_rng(7)
        opt = Adam(1e-2)
        losses = [en.classifier_step(clf, opt, np.zeros((256, 1)), rng.uniform(0, 1, (256, 1)), rng) for _ in range(200)]
        assert np.mean(losses[-20:]) < np.mean(losses[:5]) - 0.1
