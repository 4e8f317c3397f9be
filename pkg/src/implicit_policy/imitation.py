"""Imitating a multi-modal expert: maximum-likelihood cloning for the flow
policy and adversarial cloning for the parameter-noise policy."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .approximators import Adam
from .autodiff import Graph, backward
from .blackbox import NoisyMlpPolicy
from .entropy import DensityClassifier, classifier_loss
from .envs import AXIS_LIMIT, Env, EnvSpec, Trajectory, clip_action


@dataclass
class DemoDataset:
    states: np.ndarray
    actions: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        self.actions = np.atleast_2d(np.asarray(self.actions, dtype=np.float64))
        if len(self.states) == 0:
            raise ValueError("a demo dataset must not be empty")
        if len(self.states) != len(self.actions):
            raise ValueError("states and actions differ in length")

    def __len__(self) -> int:
        return len(self.states)

    def batch(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        idx = rng.integers(len(self), size=n)
        return self.states[idx], self.actions[idx]

    def save(self, path) -> None:
        """CSV of (s..., a...) plus a ``.meta.json`` sidecar."""
        path = Path(path)
        n, m = self.states.shape[1], self.actions.shape[1]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"s{i}" for i in range(n)] + [f"a{i}" for i in range(m)])
            for s, a in zip(self.states, self.actions):
                w.writerow([repr(float(v)) for v in s] + [repr(float(v)) for v in a])
        meta = {**self.metadata, "state_dim": n, "action_dim": m, "count": len(self)}
        sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "DemoDataset":
        path = Path(path)
        meta = json.loads(sidecar(path).read_text())
        n, m = meta["state_dim"], meta["action_dim"]
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(rows[:, :n], rows[:, n : n + m], meta)


def sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def generate_expert_dataset(spec: EnvSpec, expert, episodes: int, seed: int) -> DemoDataset:
    """Roll the expert and flatten its (state, action) pairs.

    ``expert`` has ``reset(rng)`` and ``act(state, rng)``. Actions are stored
    as the expert emits them; the env clips before stepping.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    env = Env(spec, seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[2])
    S, A = [], []
    for _ in range(episodes):
        obs = env.reset()
        expert.reset(rng)
        while True:
            a = np.asarray(expert.act(obs, rng), dtype=np.float64)
            S.append(obs)
            A.append(a)
            obs, _, terminal, truncated = env.step(a)
            if terminal or truncated:
                break
    meta = {"expert": type(expert).__name__, "env": spec.kind, "seed": seed, "episodes": episodes}
    return DemoDataset(np.array(S), np.array(A), meta)


# ---------------------------------------------------------------------------
# Maximum-likelihood cloning


def augment_actions(policy, actions: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Pad actions to the policy's flow width with independent N(0, 1) draws.

    A one-dimensional action lives in a two-dimensional flow; fitting the
    padded joint puts the auxiliary coordinate's marginal at N(0, 1) and
    leaves the action marginal as the cloned distribution.
    """
    extra = policy.flow_dim - actions.shape[1]
    if extra <= 0:
        return actions
    return np.concatenate([actions, rng.standard_normal((len(actions), extra))], axis=1)


def bc_nll(policy, states: np.ndarray, actions: np.ndarray, graph: Graph, bound):
    return -policy.log_prob(graph, bound, graph.constant(states), graph.constant(actions)).mean()


def bc_mle_update(policy, states: np.ndarray, actions: np.ndarray, opt: Adam, rng: np.random.Generator) -> float:
    """One Adam step on the mean negative log-likelihood; returns it."""
    if len(states) == 0:
        raise ValueError("empty batch")
    g = Graph()
    b = policy.bind(g)
    loss = bc_nll(policy, np.atleast_2d(states), augment_actions(policy, np.atleast_2d(actions), rng), g, b)
    value = loss.item()
    if not math.isfinite(value):
        raise FloatingPointError("non-finite negative log-likelihood")
    opt.step(policy.params, backward(g, loss).collect(b))
    return value


def train_bc(policy, data: DemoDataset, steps: int, batch: int, lr: float, seed: int, log: Callable[[dict], None] | None = None) -> list[float]:
    rng = np.random.default_rng(seed)
    opt = Adam(lr)
    losses = []
    for i in range(steps):
        s, a = data.batch(batch, rng)
        losses.append(bc_mle_update(policy, s, a, opt, rng))
        if log is not None:
            log({"step": i + 1, "nll": losses[-1]})
    return losses


# ---------------------------------------------------------------------------
# Adversarial cloning


def gan_imitation_update(
    policy: NoisyMlpPolicy,
    disc: DensityClassifier,
    expert_states: np.ndarray,
    expert_actions: np.ndarray,
    opt_d: Adam,
    opt_g: Adam,
    rng: np.random.Generator,
) -> dict:
    """One discriminator step then one generator step.

    The discriminator labels expert pairs 1 and policy pairs 0. The generator
    minimizes -log sigmoid(D(s, f(s, eps))) through the sample path.
    Returned losses are those evaluated before each step.
    """
    if len(expert_states) == 0:
        raise ValueError("empty expert batch")
    fake = policy.act_batch(expert_states, rng)
    g = Graph()
    db = disc.bind(g)
    d_loss = classifier_loss(disc, expert_states, expert_actions, expert_states, fake, g, db)
    d_val = d_loss.item()
    opt_d.step(disc.params, backward(g, d_loss).collect(db))

    g2 = Graph()
    pb = policy.bind(g2)
    st = g2.constant(expert_states)
    a = policy.sample(g2, pb, st, rng)
    g_loss = (-disc.logits(disc.bind(g2, False), st, a)).softplus().mean()
    g_val = g_loss.item()
    if not (math.isfinite(d_val) and math.isfinite(g_val)):
        raise FloatingPointError("non-finite adversarial losses")
    params = policy.params
    opt_g.step(params, backward(g2, g_loss).collect(pb))
    policy.set_params(params)
    return {"d_loss": d_val, "g_loss": g_val}


def train_gan(
    policy: NoisyMlpPolicy,
    disc: DensityClassifier,
    data: DemoDataset,
    steps: int,
    batch: int,
    lr_d: float,
    lr_g: float,
    seed: int,
    log: Callable[[dict], None] | None = None,
) -> list[dict]:
    rng = np.random.default_rng(seed)
    opt_d, opt_g = Adam(lr_d), Adam(lr_g)
    out = []
    for i in range(steps):
        s, a = data.batch(batch, rng)
        a = np.clip(a, disc.low, disc.high)
        rep = gan_imitation_update(policy, disc, s, a, opt_d, opt_g, rng)
        out.append(rep)
        if log is not None:
            log({"step": i + 1, **rep})
    return out


# ---------------------------------------------------------------------------
# Mode coverage


def axis_mode_descriptors() -> dict[str, Callable[[np.ndarray], bool]]:
    return {
        "+10": lambda s: float(np.asarray(s).reshape(-1)[0]) >= AXIS_LIMIT,
        "-10": lambda s: float(np.asarray(s).reshape(-1)[0]) <= -AXIS_LIMIT,
    }


def mode_coverage(final_states, descriptors: Mapping[str, Callable[[np.ndarray], bool]]) -> dict[str, float]:
    """Fraction of trajectories whose final state satisfies each descriptor.

    Accepts final states or :class:`Trajectory` objects. Unmatched
    trajectories are counted under ``"other"``; a trajectory matching more
    than one descriptor is an error since descriptors must be disjoint.
    """
    finals = [t.final_state if isinstance(t, Trajectory) else t for t in final_states]
    if not finals:
        raise ValueError("no trajectories")
    counts = {name: 0 for name in descriptors}
    other = 0
    for s in finals:
        hits = [name for name, pred in descriptors.items() if pred(s)]
        if len(hits) > 1:
            raise ValueError(f"mode descriptors overlap at {s}: {hits}")
        if hits:
            counts[hits[0]] += 1
        else:
            other += 1
    n = len(finals)
    out = {name: c / n for name, c in counts.items()}
    out["other"] = other / n
    return out


def rollout_finals(spec: EnvSpec, act: Callable[[np.ndarray, np.random.Generator], np.ndarray], episodes: int, seed: int) -> list[np.ndarray]:
    """Final true states of ``episodes`` rollouts of ``act(obs, rng)``."""
    env = Env(spec, seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[2])
    finals = []
    for _ in range(episodes):
        obs = env.reset()
        while True:
            obs, _, terminal, truncated = env.step(clip_action(spec, act(obs, rng)))
            if terminal or truncated:
                break
        finals.append(env.state.copy())
    return finals


def sign_mass(actions: np.ndarray) -> dict[str, float]:
    """Mass on each sign of a 1-D action sample and its mean magnitude."""
    a = np.asarray(actions, dtype=np.float64).reshape(-1)
    return {"positive": float(np.mean(a > 0)), "negative": float(np.mean(a < 0)), "mean_abs": float(np.mean(np.abs(a)))}
