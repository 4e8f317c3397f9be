"""Parameter-noise MLP policy with dropout on the last hidden layer.

Each action draws its own weights ``theta = mu + softplus(rho) * eps`` and its
own Bernoulli mask, so the induced action distribution has no tractable
density but is differentiable in (mu, rho) along the sample path.
"""

from __future__ import annotations

import numpy as np

from .approximators import MlpSpec, ParamSet, _activate, init_params, mlp_forward
from .autodiff import Graph, Tensor, dropout_mask_mul, layer_norm

RHO_INIT_RANGE = (-9.0, -1.0)


def sigma_from_rho(rho):
    """softplus(rho) = log(1 + exp(rho)); works on arrays and tensors."""
    if isinstance(rho, Tensor):
        return rho.softplus()
    return np.logaddexp(0.0, np.asarray(rho, dtype=np.float64))


class NoisyMlpPolicy:
    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        action_low,
        action_high,
        hidden: tuple[int, ...] = (64, 64),
        dropout_p: float = 0.1,
        rho_init: float = -4.0,
        layer_norm: bool = True,
        dropout_at_eval: bool = True,
        seed: int = 0,
    ):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.low = np.broadcast_to(np.asarray(action_low, dtype=np.float64), (action_dim,)).copy()
        self.high = np.broadcast_to(np.asarray(action_high, dtype=np.float64), (action_dim,)).copy()
        self.spec = MlpSpec(
            (state_dim,) + tuple(hidden) + (action_dim,),
            hidden_activation="relu",
            output_activation="tanh",
            layer_norm=layer_norm,
            dropout_p=dropout_p,
        )
        self.dropout_p = dropout_p
        self.dropout_at_eval = dropout_at_eval
        self.config = {
            "kind": "noisy-mlp-policy",
            "state_dim": state_dim,
            "action_dim": action_dim,
            "low": self.low.tolist(),
            "high": self.high.tolist(),
            "mlp": self.spec.to_dict(),
            "rho_init": rho_init,
        }
        mu = init_params(self.spec, seed)
        self.mu = ParamSet(mu.values, {**self.config, "part": "mu"})
        self.rho = ParamSet({k: np.full(v.shape, float(rho_init)) for k, v in mu.items()}, {**self.config, "part": "rho"})

    # ParamSet view used by optimizers and checkpoints: "mu/<name>", "rho/<name>"
    @property
    def params(self) -> ParamSet:
        values = {f"mu/{k}": v for k, v in self.mu.items()}
        values.update({f"rho/{k}": v for k, v in self.rho.items()})
        return ParamSet(values, self.config)

    def set_params(self, params: ParamSet) -> None:
        for k in self.mu.names():
            self.mu.values[k] = params[f"mu/{k}"]
            self.rho.values[k] = params[f"rho/{k}"]

    def bind(self, graph: Graph, trainable: bool = True, params: ParamSet | None = None) -> dict[str, Tensor]:
        return graph.bind((params or self.params).values, trainable)

    def sample_noise(self, rng: np.random.Generator, batch: int | None = None) -> dict[str, np.ndarray]:
        lead = () if batch is None else (batch,)
        return {k: rng.standard_normal(lead + v.shape) for k, v in self.mu.items()}

    def sample_mask(self, rng: np.random.Generator, batch: int, training: bool = True) -> np.ndarray:
        h = self.spec.last_hidden
        if self.dropout_p == 0.0 or (not training and not self.dropout_at_eval):
            return np.ones((batch, h))
        return (rng.random((batch, h)) >= self.dropout_p).astype(np.float64)

    def scale_action(self, squashed: Tensor) -> Tensor:
        half = (self.high - self.low) / 2.0
        center = (self.high + self.low) / 2.0
        return squashed * half + center

    def sample_local_noise(self, rng: np.random.Generator, batch: int) -> dict[str, np.ndarray]:
        """Standard normals for :func:`nbp_sample_local`: one per pre-activation
        unit for affine layers, one per entry for layer-norm parameters."""
        out = {}
        for name, shape in self.spec.shapes().items():
            if name.startswith("b"):
                continue
            width = shape[-1]
            out[name] = rng.standard_normal((batch, width))
        return out

    def sample(self, graph: Graph, bound, states, rng: np.random.Generator, training: bool = True) -> Tensor:
        """Fresh-noise actions, one independent weight draw per row."""
        states = states if isinstance(states, Tensor) else graph.constant(np.atleast_2d(states))
        batch = states.shape[0]
        noise = self.sample_local_noise(rng, batch)
        return nbp_sample_local(self, states, noise, self.sample_mask(rng, batch, training), graph, bound)

    def act(self, state: np.ndarray, rng: np.random.Generator, training: bool = True) -> np.ndarray:
        return self.act_batch(np.atleast_2d(state), rng, training)[0]

    def act_batch(self, states: np.ndarray, rng: np.random.Generator, training: bool = True, params: ParamSet | None = None) -> np.ndarray:
        """Gradient-free sampling (same draws as :meth:`sample` for the same rng)."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        batch = states.shape[0]
        noise = self.sample_local_noise(rng, batch)
        mask = self.sample_mask(rng, batch, training)
        return nbp_sample_local_array(self, states, noise, mask, params)


def perturbed_weights(policy: NoisyMlpPolicy, bound, noise: dict[str, np.ndarray]) -> dict[str, Tensor]:
    graph = next(iter(bound.values())).graph
    out = {}
    for name in policy.mu.names():
        mu = bound[f"mu/{name}"]
        eps = noise[name]
        if eps.shape[-mu.ndim:] != mu.shape:
            raise ValueError(f"noise for {name} has shape {eps.shape}, expected (..., {mu.shape})")
        out[name] = mu + sigma_from_rho(bound[f"rho/{name}"]) * graph.constant(eps)
    return out


def nbp_sample(policy: NoisyMlpPolicy, state, param_noise: dict[str, np.ndarray], dropout_mask, graph: Graph, params=None) -> Tensor:
    """One forward pass with perturbed weights and a fixed dropout mask.

    ``param_noise`` entries are shaped like the weights, optionally with a
    leading batch axis (one weight draw per state row).
    """
    bound = params if params is not None else policy.bind(graph, trainable=False)
    states = state if isinstance(state, Tensor) else graph.constant(np.atleast_2d(state))
    theta = perturbed_weights(policy, bound, param_noise)
    mask = np.asarray(dropout_mask, dtype=np.float64)
    if mask.ndim == 1:
        mask = np.broadcast_to(mask, (states.shape[0], mask.shape[0]))
    if mask.shape != (states.shape[0], policy.spec.last_hidden):
        raise ValueError(f"dropout mask shape {mask.shape} != ({states.shape[0]}, {policy.spec.last_hidden})")
    out = mlp_forward(theta, policy.spec, states, dropout_mask=mask)
    return policy.scale_action(out)


def _noisy_affine(h: Tensor, mu_w: Tensor, sig_w: Tensor, mu_b: Tensor, sig_b: Tensor, xi: np.ndarray) -> Tensor:
    mean = h @ mu_w + mu_b
    var = h.square() @ sig_w.square() + sig_b.square()
    return mean + (0.5 * var.log()).exp() * h.graph.constant(xi)


def nbp_sample_local(policy: NoisyMlpPolicy, state, noise: dict[str, np.ndarray], dropout_mask, graph: Graph, params=None) -> Tensor:
    """Same action distribution as :func:`nbp_sample` with per-row weight draws.

    With independent Gaussian weights, row b's pre-activation is exactly
    N(h mu_W + mu_b, h^2 sigma_W^2 + sigma_b^2), so it is sampled directly
    (still pathwise in mu and rho) instead of materializing (batch, in, out)
    weight tensors. ``noise`` comes from :meth:`NoisyMlpPolicy.sample_local_noise`.
    """
    bound = params if params is not None else policy.bind(graph, trainable=False)
    h = state if isinstance(state, Tensor) else graph.constant(np.atleast_2d(state))
    spec = policy.spec
    mu = {k[3:]: v for k, v in bound.items() if k.startswith("mu/")}
    sig = {k[4:]: sigma_from_rho(v) for k, v in bound.items() if k.startswith("rho/")}
    mask = np.asarray(dropout_mask, dtype=np.float64)
    if mask.ndim == 1:
        mask = np.broadcast_to(mask, (h.shape[0], mask.shape[0]))
    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        if i == last:
            h = dropout_mask_mul(h, mask)
        h = _noisy_affine(h, mu[f"W{i}"], sig[f"W{i}"], mu[f"b{i}"], sig[f"b{i}"], noise[f"W{i}"])
        if i < last:
            if spec.layer_norm:
                gain = mu[f"ln_g{i}"] + sig[f"ln_g{i}"] * graph.constant(noise[f"ln_g{i}"])
                shift = mu[f"ln_b{i}"] + sig[f"ln_b{i}"] * graph.constant(noise[f"ln_b{i}"])
                h = layer_norm(h) * gain + shift
            h = _activate(h, spec.hidden_activation)
        else:
            h = _activate(h, spec.output_activation)
    return policy.scale_action(h)


def _layer_norm_array(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


_ACT = {"relu": lambda x: np.maximum(x, 0.0), "tanh": np.tanh, "identity": lambda x: x}


def nbp_sample_local_array(policy: NoisyMlpPolicy, states: np.ndarray, noise: dict[str, np.ndarray], dropout_mask, params: ParamSet | None = None) -> np.ndarray:
    """Plain-numpy twin of :func:`nbp_sample_local` for acting and targets."""
    values = (params or policy.params).values
    mu = {k[3:]: v for k, v in values.items() if k.startswith("mu/")}
    sig = {k[4:]: sigma_from_rho(v) for k, v in values.items() if k.startswith("rho/")}
    spec = policy.spec
    h = np.atleast_2d(states)
    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        if i == last:
            h = h * dropout_mask
        mean = h @ mu[f"W{i}"] + mu[f"b{i}"]
        std = np.sqrt((h * h) @ (sig[f"W{i}"] ** 2) + sig[f"b{i}"] ** 2)
        h = mean + std * noise[f"W{i}"]
        if i < last:
            if spec.layer_norm:
                gain = mu[f"ln_g{i}"] + sig[f"ln_g{i}"] * noise[f"ln_g{i}"]
                shift = mu[f"ln_b{i}"] + sig[f"ln_b{i}"] * noise[f"ln_b{i}"]
                h = _layer_norm_array(h) * gain + shift
            h = _ACT[spec.hidden_activation](h)
        else:
            h = _ACT[spec.output_activation](h)
    half = (policy.high - policy.low) / 2.0
    return h * half + (policy.high + policy.low) / 2.0
