"""Desk-scale environments: Gaussian bandit, 2D multi-goal, bimodal axis walk.

``env_reset``/``env_step`` are pure functions of their inputs plus the rng
they are handed. ``env_step`` reports only real termination; the episode
horizon is enforced by :class:`Env`, which also adds observation noise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

KINDS = ("gaussian-bandit", "multi-goal-2d", "bimodal-axis", "tabular-random")

AXIS_LIMIT = 10.0


@dataclass(frozen=True)
class BanditParams:
    sigma: tuple[tuple[float, float], tuple[float, float]] = ((1.0, 0.95), (0.95, 1.0))
    beta_opt: float = 0.1

    def __post_init__(self):
        s = np.asarray(self.sigma, dtype=np.float64)
        if s.shape != (2, 2) or not np.allclose(s, s.T):
            raise ValueError("bandit covariance must be a symmetric 2x2 matrix")
        if np.linalg.eigvalsh(s).min() <= 0:
            raise ValueError("bandit covariance must be positive definite")
        if self.beta_opt <= 0:
            raise ValueError("beta_opt must be positive")

    @property
    def precision(self) -> np.ndarray:
        return np.linalg.inv(np.asarray(self.sigma, dtype=np.float64))

    @property
    def target_correlation(self) -> float:
        s = np.asarray(self.sigma)
        return float(s[0, 1] / np.sqrt(s[0, 0] * s[1, 1]))


@dataclass(frozen=True)
class MultiGoalParams:
    goals: tuple[tuple[float, float], ...] = ((5.0, 0.0), (0.0, 5.0), (-5.0, 0.0), (0.0, -5.0))
    step_scale: float = 0.3
    dynamics_sigma: float = 0.01
    goal_radius: float = 0.5
    init_sigma: float = 0.1

    def __post_init__(self):
        g = np.asarray(self.goals, dtype=np.float64)
        if g.shape != (4, 2) or len({tuple(x) for x in g.tolist()}) != 4:
            raise ValueError("multi-goal needs 4 distinct 2D goals")


@dataclass(frozen=True)
class EnvSpec:
    kind: str
    state_dim: int
    action_dim: int
    low: tuple[float, ...]
    high: tuple[float, ...]
    horizon: int
    bandit: BanditParams | None = None
    multigoal: MultiGoalParams | None = None
    obs_noise: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown env kind {self.kind!r}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not (np.all(np.isfinite(self.low)) and np.all(np.isfinite(self.high))):
            raise ValueError("action bounds must be finite")

    @property
    def action_volume(self) -> float:
        return float(np.prod(np.asarray(self.high) - np.asarray(self.low)))


def gaussian_bandit(sigma=((1.0, 0.95), (0.95, 1.0)), beta_opt: float = 0.1) -> EnvSpec:
    sigma = tuple(tuple(float(v) for v in row) for row in sigma)
    return EnvSpec("gaussian-bandit", 1, 2, (-1.0, -1.0), (1.0, 1.0), 1, bandit=BanditParams(sigma, beta_opt))


def multi_goal(horizon: int = 50, **params) -> EnvSpec:
    return EnvSpec("multi-goal-2d", 2, 2, (-1.0, -1.0), (1.0, 1.0), horizon, multigoal=MultiGoalParams(**params))


def bimodal_axis(horizon: int = 50) -> EnvSpec:
    return EnvSpec("bimodal-axis", 1, 1, (-1.0,), (1.0,), horizon)


def make_env_spec(kind: str, **kwargs) -> EnvSpec:
    if kind == "gaussian-bandit":
        return gaussian_bandit(**kwargs)
    if kind == "multi-goal-2d":
        return multi_goal(**kwargs)
    if kind == "bimodal-axis":
        return bimodal_axis(**kwargs)
    raise ValueError(f"env kind {kind!r} has no continuous-control constructor")


def env_reset(spec: EnvSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.kind == "gaussian-bandit":
        return np.zeros(1)
    if spec.kind == "multi-goal-2d":
        return rng.normal(0.0, spec.multigoal.init_sigma, size=2)
    if spec.kind == "bimodal-axis":
        return np.zeros(1)
    raise ValueError(f"env kind {spec.kind!r} is not steppable")


def clip_action(spec: EnvSpec, action) -> np.ndarray:
    return np.clip(np.asarray(action, dtype=np.float64)[: spec.action_dim], spec.low, spec.high)


def bandit_reward(params: BanditParams, action) -> float:
    a = np.asarray(action, dtype=np.float64)
    return float(-a @ params.precision @ a)


def multigoal_reward(params: MultiGoalParams, position) -> float:
    d = np.linalg.norm(np.asarray(params.goals) - np.asarray(position), axis=1)
    return float(-d.min())


def nearest_goal(params: MultiGoalParams, position) -> tuple[int, float]:
    d = np.linalg.norm(np.asarray(params.goals) - np.asarray(position), axis=1)
    i = int(np.argmin(d))
    return i, float(d[i])


def env_step(spec: EnvSpec, state, action, rng: np.random.Generator) -> tuple[np.ndarray, float, bool]:
    """One transition; ``done`` means a terminal state, not a time limit."""
    a = clip_action(spec, action)
    s = np.asarray(state, dtype=np.float64)
    if spec.kind == "gaussian-bandit":
        return s.copy(), bandit_reward(spec.bandit, a), True
    if spec.kind == "multi-goal-2d":
        p = spec.multigoal
        nxt = s + p.step_scale * a + rng.normal(0.0, p.dynamics_sigma, size=2)
        _, dist = nearest_goal(p, nxt)
        return nxt, -dist, dist <= p.goal_radius
    if spec.kind == "bimodal-axis":
        nxt = np.clip(s + a, -AXIS_LIMIT, AXIS_LIMIT)
        return nxt, 0.0, bool(abs(nxt[0]) >= AXIS_LIMIT)
    raise ValueError(f"env kind {spec.kind!r} is not steppable")


def noisy_wrap(spec: EnvSpec, sigma: float) -> EnvSpec:
    if sigma < 0:
        raise ValueError("observation noise must be non-negative")
    return replace(spec, obs_noise=float(sigma))


class Env:
    """Episode bookkeeping around the pure step function.

    Dynamics and observation noise use separate rng streams so that
    ``obs_noise = 0`` reproduces the unwrapped trajectory exactly.
    """

    def __init__(self, spec: EnvSpec, seed: int = 0):
        self.spec = spec
        ss = np.random.SeedSequence(seed)
        dyn, obs = ss.spawn(2)
        self.rng = np.random.default_rng(dyn)
        self.obs_rng = np.random.default_rng(obs)
        self.state: np.ndarray | None = None
        self.t = 0

    def _observe(self, state: np.ndarray) -> np.ndarray:
        if self.spec.obs_noise == 0.0:
            return state.copy()
        return state + self.obs_rng.normal(0.0, self.spec.obs_noise, size=state.shape)

    def reset(self) -> np.ndarray:
        self.state = env_reset(self.spec, self.rng)
        self.t = 0
        return self._observe(self.state)

    def step(self, action) -> tuple[np.ndarray, float, bool, bool]:
        """Returns ``(obs, reward, terminal, truncated)``."""
        if self.state is None:
            raise RuntimeError("call reset() first")
        self.state, reward, terminal = env_step(self.spec, self.state, action, self.rng)
        self.t += 1
        truncated = not terminal and self.t >= self.spec.horizon
        return self._observe(self.state), reward, terminal, truncated


def bandit_optimal_logdensity(params: BanditParams, action, grid: int = 400, unnormalized: bool = False) -> float:
    """log pi*(a) for pi* proportional to exp(-a' Sigma^-1 a / beta) on [-1, 1]^2."""
    a = np.asarray(action, dtype=np.float64)
    logu = -(a @ params.precision @ a) / params.beta_opt
    if unnormalized:
        return float(logu)
    return float(logu - bandit_log_normalizer(params, grid))


def bandit_log_normalizer(params: BanditParams, grid: int = 400) -> float:
    """Midpoint-rule log integral of the unnormalized density over the box."""
    h = 2.0 / grid
    centers = -1.0 + h * (np.arange(grid) + 0.5)
    x, y = np.meshgrid(centers, centers, indexing="ij")
    pts = np.stack([x.ravel(), y.ravel()], axis=1)
    logu = -np.einsum("ni,ij,nj->n", pts, params.precision, pts) / params.beta_opt
    top = logu.max()
    return float(top + np.log(np.exp(logu - top).sum() * h * h))


# ---------------------------------------------------------------------------
# Trajectory export: CSV with columns episode, t, s0.., a0.., r, done


@dataclass
class Trajectory:
    states: list[np.ndarray] = field(default_factory=list)
    actions: list[np.ndarray] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    dones: list[bool] = field(default_factory=list)
    final_state: np.ndarray | None = None

    @property
    def total_reward(self) -> float:
        return float(sum(self.rewards))

    def __len__(self) -> int:
        return len(self.rewards)


def rollout(spec: EnvSpec, act, env_seed: int, episodes: int) -> list[Trajectory]:
    """Roll ``act(obs) -> action`` for whole episodes."""
    env = Env(spec, env_seed)
    out = []
    for _ in range(episodes):
        obs = env.reset()
        traj = Trajectory()
        while True:
            a = np.asarray(act(obs), dtype=np.float64)
            nxt, r, terminal, truncated = env.step(a)
            traj.states.append(obs)
            traj.actions.append(clip_action(spec, a))
            traj.rewards.append(r)
            traj.dones.append(terminal or truncated)
            obs = nxt
            if terminal or truncated:
                break
        traj.final_state = env.state.copy()
        out.append(traj)
    return out


def write_trajectories_csv(path, trajectories: Iterable[Trajectory], state_dim: int, action_dim: int) -> None:
    path = Path(path)
    header = ["episode", "t"] + [f"s{i}" for i in range(state_dim)] + [f"a{i}" for i in range(action_dim)] + ["r", "done"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for ep, traj in enumerate(trajectories):
            for t in range(len(traj)):
                row = [ep, t] + [repr(float(v)) for v in traj.states[t]] + [repr(float(v)) for v in traj.actions[t]]
                row += [repr(float(traj.rewards[t])), int(traj.dones[t])]
                w.writerow(row)


def read_trajectories_csv(path, state_dim: int, action_dim: int) -> list[Trajectory]:
    trajs: dict[int, Trajectory] = {}
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            tr = trajs.setdefault(int(row["episode"]), Trajectory())
            tr.states.append(np.array([float(row[f"s{i}"]) for i in range(state_dim)]))
            tr.actions.append(np.array([float(row[f"a{i}"]) for i in range(action_dim)]))
            tr.rewards.append(float(row["r"]))
            tr.dones.append(bool(int(row["done"])))
    return [trajs[k] for k in sorted(trajs)]


# ---------------------------------------------------------------------------
# Scripted expert for the axis walk


class BimodalAxisExpert:
    """Commits to +10 or -10 at episode start, then heads there at full speed."""

    def __init__(self, noise_sigma: float = 0.05):
        self.noise_sigma = noise_sigma
        self.target = AXIS_LIMIT

    def reset(self, rng: np.random.Generator) -> None:
        self.target = AXIS_LIMIT if rng.random() < 0.5 else -AXIS_LIMIT

    def act(self, state, rng: np.random.Generator) -> np.ndarray:
        s = float(np.asarray(state).reshape(-1)[0])
        return np.array([np.clip(self.target - s, -1.0, 1.0) + rng.normal(0.0, self.noise_sigma)])
