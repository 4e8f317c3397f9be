"""Normalizing-flow policy built from affine coupling layers.

The sampling map is ``a = g_K(...g_2(L(s) + g_1(eps)))`` with ``eps`` standard
normal, so the log-density of an action follows from the change-of-variables
formula along the inverse path. The state shift has unit Jacobian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .approximators import MlpSpec, ParamSet, init_params, merge_params, mlp_forward, subset
from .autodiff import Graph, Tensor, concat

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class CouplingLayer:
    """Structure of one coupling layer; its weights live in a ParamSet.

    The layer permutes its input, keeps the first ``split`` coordinates and
    transforms the rest as ``x2 * exp(s(x1)) + t(x1)``. Outputs stay in the
    permuted order.
    """

    dim: int
    split: int
    perm: tuple[int, ...]
    s_spec: MlpSpec
    t_spec: MlpSpec
    scale_bound: float | None = 5.0

    def __post_init__(self):
        if not 1 <= self.split < self.dim:
            raise ValueError(f"split index must satisfy 1 <= d < m, got d={self.split}, m={self.dim}")
        if sorted(self.perm) != list(range(self.dim)):
            raise ValueError(f"perm {self.perm} is not a permutation of range({self.dim})")

    @property
    def inverse_perm(self) -> tuple[int, ...]:
        inv = [0] * self.dim
        for i, p in enumerate(self.perm):
            inv[p] = i
        return tuple(inv)

    @property
    def is_identity_perm(self) -> bool:
        return self.perm == tuple(range(self.dim))

    def init(self, rng: np.random.Generator) -> ParamSet:
        return merge_params({"s": init_params(self.s_spec, rng), "t": init_params(self.t_spec, rng)})


def _as_batch(x, graph: Graph) -> tuple[Tensor, bool]:
    if not isinstance(x, Tensor):
        x = graph.constant(x)
    if x.ndim == 1:
        return x.reshape(1, x.shape[0]), True
    return x, False


def _permute(x: Tensor, perm: tuple[int, ...]) -> Tensor:
    return x[:, np.asarray(perm)]


def _scale_shift(layer: CouplingLayer, params, x1: Tensor) -> tuple[Tensor, Tensor]:
    s = mlp_forward(subset(params, "s"), layer.s_spec, x1)
    if layer.scale_bound is not None:
        s = (s * (1.0 / layer.scale_bound)).tanh() * layer.scale_bound
    t = mlp_forward(subset(params, "t"), layer.t_spec, x1)
    return s, t


def coupling_forward(layer: CouplingLayer, x, graph: Graph, params) -> tuple[Tensor, Tensor]:
    """Returns ``(y, logdet)``; logdet has one entry per batch row."""
    x, squeeze = _as_batch(x, graph)
    if x.shape[-1] != layer.dim:
        raise ValueError(f"coupling layer expects width {layer.dim}, got {x.shape[-1]}")
    xp = x if layer.is_identity_perm else _permute(x, layer.perm)
    d = layer.split
    x1, x2 = xp[:, :d], xp[:, d:]
    s, t = _scale_shift(layer, params, x1)
    y = concat([x1, x2 * s.exp() + t], axis=1)
    logdet = s.sum(axis=1)
    if squeeze:
        return y.reshape(layer.dim), logdet.reshape(())
    return y, logdet


def coupling_inverse(layer: CouplingLayer, y, graph: Graph, params) -> tuple[Tensor, Tensor]:
    """Inverse map. Returns ``(x, logdet)`` where logdet is the forward log|det| at x."""
    y, squeeze = _as_batch(y, graph)
    d = layer.split
    y1, y2 = y[:, :d], y[:, d:]
    s, t = _scale_shift(layer, params, y1)
    xp = concat([y1, (y2 - t) * (-s).exp()], axis=1)
    x = xp if layer.is_identity_perm else _permute(xp, layer.inverse_perm)
    logdet = s.sum(axis=1)
    if squeeze:
        return x.reshape(layer.dim), logdet.reshape(())
    return x, logdet


def standard_normal_logpdf(eps: Tensor) -> Tensor:
    m = eps.shape[-1]
    return eps.square().sum(axis=-1) * -0.5 - 0.5 * m * LOG_2PI


class FlowPolicy:
    """State-conditional flow policy ``a = f(s, eps)`` with exact log-density.

    ``flow_dim`` is ``max(action_dim, 2)``: a one-dimensional action is
    carried as the first coordinate of a two-dimensional flow whose second
    coordinate is an auxiliary latent ignored by the environment.
    """

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        n_layers: int = 4,
        hidden: int = 3,
        coupling_hidden_layers: int = 3,
        embed_hidden: tuple[int, ...] = (64, 64),
        scale_bound: float | None = 5.0,
        squash: bool = False,
        seed: int = 0,
    ):
        if n_layers < 1:
            raise ValueError("need at least one coupling layer")
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.flow_dim = max(action_dim, 2)
        self.squash = squash
        m = self.flow_dim
        d = 1 if m == 2 else m // 2
        self.layers: list[CouplingLayer] = []
        for i in range(n_layers):
            perm = tuple(range(m)) if i % 2 == 0 else tuple(reversed(range(m)))
            widths_s = (d,) + (hidden,) * coupling_hidden_layers + (m - d,)
            self.layers.append(
                CouplingLayer(
                    dim=m,
                    split=d,
                    perm=perm,
                    s_spec=MlpSpec(widths_s, hidden_activation="tanh"),
                    t_spec=MlpSpec(widths_s, hidden_activation="tanh"),
                    scale_bound=scale_bound,
                )
            )
        self.embed_spec = MlpSpec((state_dim,) + tuple(embed_hidden) + (m,), hidden_activation="tanh")
        self.config = {
            "kind": "flow-policy",
            "state_dim": state_dim,
            "action_dim": action_dim,
            "n_layers": n_layers,
            "hidden": hidden,
            "coupling_hidden_layers": coupling_hidden_layers,
            "embed_hidden": list(embed_hidden),
            "scale_bound": scale_bound,
            "squash": squash,
        }
        rng = np.random.default_rng(seed)
        parts = {f"layer{i}": layer.init(rng) for i, layer in enumerate(self.layers)}
        parts["embed"] = init_params(self.embed_spec, rng)
        self.params = merge_params(parts, spec=self.config)

    # -- parameter plumbing -------------------------------------------------

    def bind(self, graph: Graph, trainable: bool = True, params: ParamSet | None = None) -> dict[str, Tensor]:
        return graph.bind((params or self.params).values, trainable)

    def _layer_params(self, bound, i: int):
        return subset(bound, f"layer{i}")

    def embed(self, bound, state: Tensor) -> Tensor:
        return mlp_forward(subset(bound, "embed"), self.embed_spec, state)

    # -- protocol used by the on-policy trainer -----------------------------

    def sample(self, graph: Graph, bound, states, rng: np.random.Generator):
        states, _ = _as_batch(states, graph)
        noise = rng.standard_normal((states.shape[0], self.flow_dim))
        return nfp_sample(self, states, noise, graph, bound)

    def log_prob(self, graph: Graph, bound, states, actions) -> Tensor:
        return nfp_log_prob(self, states, actions, graph, bound)

    def entropy(self, graph: Graph, bound, states, rng: np.random.Generator) -> Tensor:
        """Mean over states of a one-draw reparameterized entropy estimate."""
        x, logp = self.sample(graph, bound, states, rng)
        return squashed_entropy(x, logp, self.action_dim, self.squash)

    def env_action(self, full: np.ndarray) -> np.ndarray:
        return env_action(full, self.action_dim, self.squash)

    def act(self, state: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, float]:
        """Returns (env action, full flow sample, log-density of the full sample)."""
        g = Graph()
        bound = self.bind(g, trainable=False)
        a, logp = self.sample(g, bound, np.atleast_2d(state), rng)
        full = a.numpy()[0]
        return self.env_action(full), full, float(logp.data[0])


def env_action(full: np.ndarray, action_dim: int, squash: bool) -> np.ndarray:
    """Env-facing action from a policy-space vector: drop the auxiliary latent,
    then apply tanh when the policy is squashed onto the [-1, 1] box."""
    a = np.asarray(full)[..., :action_dim]
    return np.tanh(a) if squash else a


def squashed_entropy(x: Tensor, logp: Tensor, action_dim: int, squash: bool) -> Tensor:
    """-mean log-density, corrected for a tanh on the first ``action_dim`` coordinates.

    log|d tanh(u)/du| = 2 (log 2 - u - softplus(-2u)), which stays finite
    for saturated u.
    """
    ent = -logp.mean()
    if not squash:
        return ent
    u = x[:, :action_dim]
    log_jac = (2.0 * (math.log(2.0) - u - (-2.0 * u).softplus())).sum(axis=1)
    return ent + log_jac.mean()


def _flow_forward(policy: FlowPolicy, bound, states: Tensor, noise: Tensor):
    logdet = None
    x = noise
    for i, layer in enumerate(policy.layers):
        x, ld = coupling_forward(layer, x, noise.graph, policy._layer_params(bound, i))
        if i == 0:
            x = x + policy.embed(bound, states)
        logdet = ld if logdet is None else logdet + ld
    return x, logdet


def nfp_sample(policy: FlowPolicy, state, noise, graph: Graph, params=None) -> tuple[Tensor, Tensor]:
    """Push base noise through the flow. Returns ``(action, log-density)``.

    ``params`` is a binding from :meth:`FlowPolicy.bind`; when omitted the
    current values are used as constants.
    """
    bound = params if params is not None else policy.bind(graph, trainable=False)
    states, squeeze = _as_batch(state, graph)
    noise, _ = _as_batch(noise, graph)
    if noise.shape[0] != states.shape[0]:
        states = states + graph.constant(np.zeros((noise.shape[0], 1)))
    action, logdet = _flow_forward(policy, bound, states, noise)
    logp = standard_normal_logpdf(noise) - logdet
    if squeeze and action.shape[0] == 1:
        return action.reshape(policy.flow_dim), logp.reshape(())
    return action, logp


def nfp_invert(policy: FlowPolicy, state, action, graph: Graph, params=None) -> tuple[Tensor, Tensor]:
    """Map an action back to base noise. Returns ``(noise, total forward logdet)``."""
    bound = params if params is not None else policy.bind(graph, trainable=False)
    states, _ = _as_batch(state, graph)
    x, _ = _as_batch(action, graph)
    if x.shape[-1] != policy.flow_dim:
        raise ValueError(f"expected flow vectors of width {policy.flow_dim}, got {x.shape[-1]}")
    if x.shape[0] != states.shape[0]:
        states = states + graph.constant(np.zeros((x.shape[0], 1)))
    logdet = None
    for i in range(len(policy.layers) - 1, -1, -1):
        if i == 0:
            x = x - policy.embed(bound, states)
        x, ld = coupling_inverse(policy.layers[i], x, graph, policy._layer_params(bound, i))
        logdet = ld if logdet is None else logdet + ld
    return x, logdet


def nfp_log_prob(policy: FlowPolicy, state, action, graph: Graph, params=None) -> Tensor:
    """Exact log pi(a|s) via the inverse path; differentiable in the parameters."""
    squeeze = (action.ndim if isinstance(action, Tensor) else np.ndim(action)) == 1
    eps, logdet = nfp_invert(policy, state, action, graph, params)
    logp = standard_normal_logpdf(eps) - logdet
    return logp.reshape(()) if squeeze else logp


def nfp_entropy_estimate(policy: FlowPolicy, state, n_samples: int, noise_seed: int, graph: Graph, params=None) -> Tensor:
    """Reparameterized Monte-Carlo entropy of pi(.|s), differentiable in the parameters.

    Uses -log pi(f(s, eps)|s), evaluated along the sampling path where it
    equals log rho0(eps) - sum of forward log-determinants.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    state = np.asarray(state.data if isinstance(state, Tensor) else state, dtype=np.float64).reshape(-1)
    states = np.tile(state, (n_samples, 1))
    noise = np.random.default_rng(noise_seed).standard_normal((n_samples, policy.flow_dim))
    _, logp = nfp_sample(policy, states, noise, graph, params)
    return -logp.mean()


def nfp_log_prob_array(policy: FlowPolicy, states: np.ndarray, actions: np.ndarray, params: ParamSet | None = None) -> np.ndarray:
    g = Graph()
    bound = policy.bind(g, trainable=False, params=params)
    return nfp_log_prob(policy, np.atleast_2d(states), np.atleast_2d(actions), g, bound).numpy()


def nfp_sample_array(policy: FlowPolicy, states: np.ndarray, noise: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    g = Graph()
    a, logp = nfp_sample(policy, np.atleast_2d(states), np.atleast_2d(noise), g)
    return a.numpy(), logp.numpy()


class GaussianPolicy:
    """Factorized Gaussian baseline: state-dependent mean, free log-std vector."""

    def __init__(self, state_dim: int, action_dim: int, hidden: tuple[int, ...] = (64, 64), init_log_std: float = 0.0, squash: bool = False, seed: int = 0):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.flow_dim = action_dim
        self.squash = squash
        self.mean_spec = MlpSpec((state_dim,) + tuple(hidden) + (action_dim,), hidden_activation="tanh")
        self.config = {
            "kind": "gaussian-policy",
            "state_dim": state_dim,
            "action_dim": action_dim,
            "hidden": list(hidden),
            "squash": squash,
        }
        rng = np.random.default_rng(seed)
        mean = init_params(self.mean_spec, rng)
        values = {f"mean/{k}": v for k, v in mean.items()}
        values["log_std"] = np.full(action_dim, float(init_log_std))
        self.params = ParamSet(values, self.config)

    def bind(self, graph: Graph, trainable: bool = True, params: ParamSet | None = None):
        return graph.bind((params or self.params).values, trainable)

    def _mean(self, bound, states: Tensor) -> Tensor:
        return mlp_forward(subset(bound, "mean"), self.mean_spec, states)

    def sample(self, graph: Graph, bound, states, rng: np.random.Generator):
        states, _ = _as_batch(states, graph)
        eps = graph.constant(rng.standard_normal((states.shape[0], self.action_dim)))
        log_std = bound["log_std"]
        a = self._mean(bound, states) + eps * log_std.exp()
        logp = standard_normal_logpdf(eps) - log_std.sum()
        return a, logp

    def log_prob(self, graph: Graph, bound, states, actions) -> Tensor:
        states, _ = _as_batch(states, graph)
        actions, _ = _as_batch(actions, graph)
        log_std = bound["log_std"]
        z = (actions - self._mean(bound, states)) * (-log_std).exp()
        return standard_normal_logpdf(z) - log_std.sum()

    def entropy(self, graph: Graph, bound, states, rng: np.random.Generator) -> Tensor:
        x, logp = self.sample(graph, bound, states, rng)
        return squashed_entropy(x, logp, self.action_dim, self.squash)

    def env_action(self, full: np.ndarray) -> np.ndarray:
        return env_action(full, self.action_dim, self.squash)

    def act(self, state: np.ndarray, rng: np.random.Generator):
        g = Graph()
        bound = self.bind(g, trainable=False)
        a, logp = self.sample(g, bound, np.atleast_2d(state), rng)
        full = a.numpy()[0]
        return self.env_action(full), full, float(logp.data[0])
