"""Independent reference computations shared by the unit and acceptance tests."""

import math

import numpy as np
from scipy import stats

from implicit_policy.autodiff import Graph, backward
from implicit_policy.entropy import DensityClassifier, entropy_surrogate, train_classifier

BOX = 3.0


def truncated_gaussian(rng, n, box=BOX):
    """Rejection sampler for a standard 2D normal restricted to [-box, box]^2."""
    out = np.empty((0, 2))
    while len(out) < n:
        x = rng.standard_normal((2 * n, 2))
        out = np.vstack([out, x[np.all(np.abs(x) <= box, axis=1)]])
    return out[:n]


def truncated_log_density(x, box=BOX):
    z = stats.norm.cdf(box) - stats.norm.cdf(-box)
    return stats.norm.logpdf(x).sum(axis=1) - 2 * math.log(z)


def truncated_entropy_quadrature(box=BOX, n=1201):
    """Entropy of the truncated 2D normal by trapezoidal quadrature."""
    grid = np.linspace(-box, box, n)
    X, Y = np.meshgrid(grid, grid, indexing="ij")
    logp = truncated_log_density(np.stack([X.ravel(), Y.ravel()], axis=1), box).reshape(n, n)
    integrand = -np.exp(logp) * logp
    return float(np.trapezoid(np.trapezoid(integrand, grid, axis=1), grid))


def fit_truncated_classifier(seed, steps=3000, batch=512, lr=1e-3, final_lr=1e-4):
    """Classifier trained to separate the truncated normal from uniform on the box."""
    clf = DensityClassifier(1, 2, -BOX, BOX, seed=seed)
    rng = np.random.default_rng(seed)
    train_classifier(clf, lambda r, n: (np.zeros((n, 1)), truncated_gaussian(r, n)), steps, batch, lr, rng, final_lr=final_lr)
    return clf


def gaussian_entropy_gradient_samples(mu, L, n, seed, log_volume=0.0):
    """Per-sample entropy-gradient estimates for a = mu + L eps (L lower triangular)
    using the closed-form optimal classifier c(a) = log N(a; mu, L L^T) + log|A|.

    Returns ``(grad_mu, grad_L)`` with shapes (n, 2) and (n, 2, 2). The
    classifier is frozen at the current parameters, so only the sample path
    carries gradient.
    """
    mu = np.asarray(mu, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    eps = np.random.default_rng(seed).standard_normal((n, 2))
    Linv = np.linalg.inv(L)
    logdet = float(np.log(np.abs(np.diag(L))).sum())

    g = Graph()
    mu_t = g.leaf(np.tile(mu, (n, 1)))
    L_t = g.leaf(np.tile(L, (n, 1, 1)))
    a = mu_t + (L_t @ g.constant(eps[:, :, None])).reshape(n, 2)

    def logits(states, actions):
        z = (actions - g.constant(mu)) @ g.constant(Linv.T)
        return z.square().sum(axis=1) * -0.5 - (logdet + math.log(2 * math.pi) - log_volume)

    # entropy_surrogate averages over samples; scale by n to recover per-sample terms
    h = entropy_surrogate(logits, g.constant(np.zeros((n, 1))), a) * float(n)
    grads = backward(g, h)
    return grads[mu_t], grads[L_t]


def within_se(samples, expected, k=3.0):
    """Mean of per-sample estimates is within ``k`` standard errors of ``expected``.

    Coordinates with zero spread must match exactly.
    """
    samples = np.asarray(samples)
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / math.sqrt(len(samples))
    return np.all(np.abs(mean - expected) <= k * se + 1e-12), mean, se
