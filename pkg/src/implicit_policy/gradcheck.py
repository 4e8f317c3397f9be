"""Catalog of gradient checks: every tape op, and the policy-level gradients
(flow log-density, flow entropy estimate, parameter-noise sample path)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, Graph, Tensor, finite_diff_check, param_grad_check
from .blackbox import NoisyMlpPolicy, nbp_sample, nbp_sample_local
from .flow import FlowPolicy, nfp_entropy_estimate, nfp_log_prob

OP_TOL = 1e-5
MODEL_TOL = 1e-4
TARGETS = ("ops", "nfp-logprob", "nfp-entropy", "nbp-sample")


@dataclass
class CheckRow:
    target: str
    name: str
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def _weighted(out: Tensor, rng_seed: int) -> Tensor:
    # a random projection keeps every gradient coordinate O(1)
    w = np.random.default_rng(rng_seed).uniform(0.5, 1.5, size=out.shape)
    return (out * out.graph.constant(w)).sum()


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[Graph, Tensor], Tensor], np.ndarray]]:
    """One scalar-valued probe per op kind: name -> (f(graph, x), point)."""
    x34 = rng.normal(size=(3, 4))
    pos34 = rng.uniform(0.5, 2.0, size=(3, 4))
    other = rng.normal(size=(3, 4))
    w45 = rng.normal(size=(4, 5))
    away = np.where(np.abs(x34) < 0.1, 0.5, x34)  # keep relu probes off the kink
    mask = (rng.random((3, 4)) > 0.3).astype(float)
    batch_w = rng.normal(size=(3, 4, 2))

    def c(g, v):
        return g.constant(v)

    cases = {
        "add": (lambda g, x: _weighted(x + c(g, other), 1), x34),
        "sub": (lambda g, x: _weighted(c(g, other) - x, 2), x34),
        "mul": (lambda g, x: _weighted(x * c(g, other), 3), x34),
        "div": (lambda g, x: _weighted(c(g, other) / x + x / c(g, pos34), 4), pos34),
        "matmul": (lambda g, x: _weighted(x @ c(g, w45), 5), x34),
        "matmul-batched": (lambda g, x: _weighted(x.reshape(3, 1, 4) @ c(g, batch_w), 6), x34),
        "tanh": (lambda g, x: _weighted(x.tanh(), 7), x34),
        "relu": (lambda g, x: _weighted(x.relu(), 8), away),
        "sigmoid": (lambda g, x: _weighted(x.sigmoid(), 9), x34),
        "exp": (lambda g, x: _weighted(x.exp(), 10), x34),
        "log": (lambda g, x: _weighted(x.log(), 11), pos34),
        "softplus": (lambda g, x: _weighted(x.softplus(), 12), x34),
        "sum": (lambda g, x: _weighted(x.sum(axis=1), 13), x34),
        "mean": (lambda g, x: _weighted(x.mean(axis=0, keepdims=True), 14), x34),
        "square": (lambda g, x: _weighted(x.square(), 15), x34),
        "neg": (lambda g, x: _weighted(-x, 16), x34),
        "concat": (lambda g, x: _weighted(ad.concat([x, c(g, other), x], axis=1), 17), x34),
        "slice": (lambda g, x: _weighted(x[:, 1:3], 18) + _weighted(x[np.array([0, 2, 2])], 19), x34),
        "scale": (lambda g, x: _weighted(2.5 * x, 20), x34),
        "dropout-mask-mul": (lambda g, x: _weighted(ad.dropout_mask_mul(x, mask), 21), x34),
        "layer-norm": (lambda g, x: _weighted(ad.layer_norm(x), 22), x34),
        "reshape": (lambda g, x: _weighted(x.reshape(4, 3), 23), x34),
    }
    return cases


def check_ops(seed: int = 0, tol: float = OP_TOL) -> list[CheckRow]:
    rng = np.random.default_rng(seed)
    return [CheckRow("ops", name, finite_diff_check(f, p, step=1e-5, tol=tol)) for name, (f, p) in op_cases(rng).items()]


def small_flow(state_dim: int = 2, action_dim: int = 2, seed: int = 0) -> FlowPolicy:
    return FlowPolicy(state_dim, action_dim, n_layers=4, hidden=3, embed_hidden=(8,), seed=seed)


def check_nfp_logprob(seed: int = 0, tol: float = MODEL_TOL, policy: FlowPolicy | None = None) -> list[CheckRow]:
    policy = policy or small_flow(seed=seed)
    rng = np.random.default_rng(seed + 100)
    states = rng.normal(size=(5, policy.state_dim))
    actions = rng.normal(size=(5, policy.flow_dim))
    rep = param_grad_check(lambda g, p: nfp_log_prob(policy, states, actions, g, p).mean(), policy.params.values, tol=tol)
    return [CheckRow("nfp-logprob", "mean log-density wrt all parameters", rep)]


def check_nfp_entropy(seed: int = 0, tol: float = MODEL_TOL, policy: FlowPolicy | None = None) -> list[CheckRow]:
    policy = policy or small_flow(seed=seed)
    state = np.random.default_rng(seed + 200).normal(size=policy.state_dim)
    rep = param_grad_check(lambda g, p: nfp_entropy_estimate(policy, state, 16, seed + 7, g, p), policy.params.values, tol=tol)
    return [CheckRow("nfp-entropy", "reparameterized entropy estimate (frozen noise)", rep)]


def small_nbp(seed: int = 0) -> NoisyMlpPolicy:
    return NoisyMlpPolicy(2, 2, -1.0, 1.0, hidden=(6, 5), dropout_p=0.3, rho_init=-2.0, seed=seed)


def check_nbp_sample(seed: int = 0, tol: float = MODEL_TOL, policy: NoisyMlpPolicy | None = None) -> list[CheckRow]:
    """Sample-path gradients with noise and dropout masks held fixed."""
    policy = policy or small_nbp(seed)
    rng = np.random.default_rng(seed + 300)
    batch = 4
    states = rng.normal(size=(batch, policy.state_dim))
    w_noise = policy.sample_noise(rng, batch)
    local_noise = policy.sample_local_noise(rng, batch)
    mask = policy.sample_mask(rng, batch)
    weights = rng.uniform(0.5, 1.5, size=(batch, policy.action_dim))
    values = policy.params.values

    def per_sample(g, p):
        return (nbp_sample(policy, states, w_noise, mask, g, p) * g.constant(weights)).sum()

    def local(g, p):
        return (nbp_sample_local(policy, states, local_noise, mask, g, p) * g.constant(weights)).sum()

    return [
        CheckRow("nbp-sample", "per-sample weight draws", param_grad_check(per_sample, values, tol=tol)),
        CheckRow("nbp-sample", "pre-activation noise", param_grad_check(local, values, tol=tol)),
    ]


def run_target(target: str, seed: int = 0) -> list[CheckRow]:
    if target == "ops":
        return check_ops(seed)
    if target == "nfp-logprob":
        return check_nfp_logprob(seed)
    if target == "nfp-entropy":
        return check_nfp_entropy(seed)
    if target == "nbp-sample":
        return check_nbp_sample(seed)
    if target == "all":
        return [row for t in TARGETS for row in run_target(t, seed)]
    raise ValueError(f"unknown grad-check target {target!r}; choose from {TARGETS + ('all',)}")


def format_table(rows: list[CheckRow]) -> str:
    width = max((len(r.target) + len(r.name) for r in rows), default=10) + 3
    lines = [f"{'check':<{width}} {'max rel err':>12} {'tol':>8}  result"]
    for r in rows:
        label = f"{r.target}: {r.name}"
        lines.append(f"{label:<{width}} {r.report.max_rel_error:>12.3e} {r.report.tol:>8.0e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
