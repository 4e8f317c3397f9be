"""Density-ratio classifier for policies without a tractable density.

A classifier trained to separate policy actions (positives) from uniform
actions over the box (negatives) has optimal logit ``log(pi(a|s) * |A|)``.
Its negated mean over policy samples, plus ``log|A|``, estimates the entropy,
and its gradient along the sample path (classifier frozen) is the entropy
gradient.
"""

from __future__ import annotations

import math
from typing import Callable, Mapping

import numpy as np

from .approximators import Adam, MlpSpec, ParamSet, init_params, mlp_forward
from .autodiff import Graph, Tensor, backward, concat

LOG4 = 2.0 * math.log(2.0)

# A sampler draws actions for given states inside a graph, differentiably in
# whatever parameters it has bound there: sampler(graph, states, rng) -> Tensor.
Sampler = Callable[[Graph, Tensor, np.random.Generator], Tensor]


class DensityClassifier:
    def __init__(self, state_dim: int, action_dim: int, action_low, action_high, hidden=(64, 64), activation: str = "relu", seed: int = 0):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.low = np.broadcast_to(np.asarray(action_low, dtype=np.float64), (action_dim,)).copy()
        self.high = np.broadcast_to(np.asarray(action_high, dtype=np.float64), (action_dim,)).copy()
        self.spec = MlpSpec((state_dim + action_dim,) + tuple(hidden) + (1,), hidden_activation=activation)
        self.params = init_params(self.spec, seed)
        self.params.spec.update({"kind": "density-classifier", "low": self.low.tolist(), "high": self.high.tolist()})

    @property
    def log_volume(self) -> float:
        return float(np.sum(np.log(self.high - self.low)))

    def bind(self, graph: Graph, trainable: bool = True) -> dict[str, Tensor]:
        return graph.bind(self.params.values, trainable)

    def logits(self, bound, states: Tensor, actions: Tensor) -> Tensor:
        x = concat([states, actions], axis=1)
        return mlp_forward(bound, self.spec, x).reshape(states.shape[0])

    def logits_array(self, states, actions) -> np.ndarray:
        g = Graph()
        return self.logits(self.bind(g, False), g.constant(np.atleast_2d(states)), g.constant(np.atleast_2d(actions))).numpy()

    def uniform_actions(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.low, self.high, size=(n, self.action_dim))


def _tensor(graph: Graph, x) -> Tensor:
    return x if isinstance(x, Tensor) else graph.constant(np.atleast_2d(x))


def classifier_loss(clf: DensityClassifier, pos_states, pos_actions, neg_states, neg_actions, graph: Graph, params=None) -> Tensor:
    """Mean BCE: policy actions labelled 1, uniform actions labelled 0.

    -log sigmoid(c) = softplus(-c) and -log(1 - sigmoid(c)) = softplus(c)
    keep both terms finite for saturated logits.
    """
    bound = params if params is not None else clf.bind(graph, trainable=False)
    c_pos = clf.logits(bound, _tensor(graph, pos_states), _tensor(graph, pos_actions))
    c_neg = clf.logits(bound, _tensor(graph, neg_states), _tensor(graph, neg_actions))
    if c_pos.shape[0] == 0 or c_neg.shape[0] == 0:
        raise ValueError("both batches must be non-empty")
    return (-c_pos).softplus().mean() + c_neg.softplus().mean()


def classifier_step(clf: DensityClassifier, opt: Adam, states: np.ndarray, actions: np.ndarray, rng: np.random.Generator) -> float:
    """One descent step on fresh uniform negatives (one per positive)."""
    neg = clf.uniform_actions(rng, actions.shape[0])
    g = Graph()
    bound = clf.bind(g)
    loss = classifier_loss(clf, states, actions, states, neg, g, bound)
    grads = backward(g, loss).collect(bound)
    opt.step(clf.params, grads)
    return loss.item()


def entropy_estimate(clf: DensityClassifier, sampler: Sampler, state, n_samples: int, rng: np.random.Generator) -> tuple[float, float]:
    """Returns ``(entropy, standard error)`` with entropy = mean(-c) + log|A|."""
    g = Graph()
    states = g.constant(np.tile(np.asarray(state, dtype=np.float64).reshape(1, -1), (n_samples, 1)))
    actions = sampler(g, states, rng)
    c = clf.logits(clf.bind(g, trainable=False), states, actions).numpy()
    se = float(c.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else float("nan")
    return float(-c.mean() + clf.log_volume), se


def entropy_surrogate(clf_logits: Callable[[Tensor, Tensor], Tensor], states: Tensor, actions: Tensor) -> Tensor:
    """-mean(c(s, a)). Differentiating it with the classifier frozen gives the entropy gradient."""
    return -clf_logits(states, actions).mean()


def entropy_gradient(
    clf: DensityClassifier,
    sampler: Sampler,
    policy_bound: Mapping[str, Tensor],
    graph: Graph,
    states,
    n_per_state: int,
    rng: np.random.Generator,
) -> tuple[dict[str, np.ndarray], float]:
    """Gradient of the (batch-mean) entropy w.r.t. the policy parameters.

    The classifier is bound as constants, so no gradient reaches it; only the
    sample path f(s, eps) carries dependence on the policy.
    Returns ``(grads by name, entropy estimate)``.
    """
    s = np.repeat(np.atleast_2d(states), n_per_state, axis=0)
    st = graph.constant(s)
    actions = sampler(graph, st, rng)
    psi = clf.bind(graph, trainable=False)
    h = entropy_surrogate(lambda a, b: clf.logits(psi, a, b), st, actions)
    grads = backward(graph, h).collect(policy_bound)
    return grads, h.item() + clf.log_volume


def train_classifier(
    clf: DensityClassifier,
    sample_actions: Callable[[np.random.Generator, int], tuple[np.ndarray, np.ndarray]],
    steps: int,
    batch: int,
    lr: float,
    rng: np.random.Generator,
    final_lr: float | None = None,
    decay_at: float = 0.7,
) -> list[float]:
    """Fit the classifier against a fixed policy; returns the loss history.

    With ``final_lr`` the rate drops to that value after a ``decay_at``
    fraction of the steps, which settles the Adam noise in the final fit.
    """
    opt = Adam(lr)
    losses = []
    for k in range(steps):
        if final_lr is not None and k == int(decay_at * steps):
            opt.lr = final_lr
        states, actions = sample_actions(rng, batch)
        losses.append(classifier_step(clf, opt, states, actions, rng))
    return losses


CLASSIFIER_LOSS_ALERT = LOG4
"""Loss at or above the uninformed value means entropy estimates are unreliable."""
