"""Training procedures.

* On-policy: clipped-surrogate updates with an entropy bonus, for the flow
  policy (or the factorized Gaussian baseline through the same loop).
* Off-policy: the pathwise algorithm for the parameter-noise policy, with a
  replay buffer, Q critic, density-ratio classifier and hard-synced targets.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from .approximators import Adam, MlpSpec, ParamSet, init_params, mlp_forward, save_checkpoint
from .autodiff import AutodiffError, Graph, Tensor, backward, clip, concat, minimum
from .blackbox import NoisyMlpPolicy
from .entropy import CLASSIFIER_LOSS_ALERT, DensityClassifier, classifier_loss
from .envs import Env, EnvSpec, clip_action, nearest_goal


log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """A loss or gradient went non-finite; training stopped."""

    def __init__(self, message: str, step: int, checkpoint: str | None = None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool

    def __post_init__(self):
        if not math.isfinite(self.r):
            raise ValueError("reward must be finite")


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity)
        self.size = 0
        self._next = 0

    def __len__(self) -> int:
        return self.size

    def add(self, tr: Transition) -> None:
        s = np.asarray(tr.s, dtype=np.float64)
        a = np.asarray(tr.a, dtype=np.float64)
        if s.shape != (self.state_dim,) or a.shape != (self.action_dim,):
            raise ValueError(f"transition shapes {s.shape}, {a.shape} do not match the buffer")
        i = self._next
        self.s[i], self.a[i], self.r[i] = s, a, tr.r
        self.s_next[i], self.done[i] = tr.s_next, float(tr.done)
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(self.size, size=n)

    def sample(self, n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        idx = self.sample_indices(n, rng)
        return {"s": self.s[idx], "a": self.a[idx], "r": self.r[idx], "s_next": self.s_next[idx], "done": self.done[idx]}


@dataclass
class TrainConfig:
    beta: float = 0.01
    gamma: float = 0.99
    lr_policy: float = 3e-4
    lr_critic: float = 1e-3
    lr_classifier: float = 1e-3
    target_period: int = 500
    batch_size: int = 64
    buffer_capacity: int = 100_000
    total_steps: int = 10_000
    warmup: int | None = None
    updates_per_step: int = 1
    clip_eps: float = 0.2
    gae_lambda: float = 0.95
    rollout_length: int = 2048
    num_envs: int = 1
    epochs: int = 10
    minibatch: int = 64
    value_coef: float = 0.5
    log_interval: int = 1000
    record_wall_ms: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must lie in [0, 1]")
        for name in ("lr_policy", "lr_critic", "lr_classifier", "clip_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("target_period", "batch_size", "buffer_capacity", "rollout_length", "num_envs", "epochs", "minibatch", "log_interval", "updates_per_step"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")

    @property
    def warmup_steps(self) -> int:
        return max(self.batch_size, 1000) if self.warmup is None else self.warmup

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        return asdict(self)


class MetricSink:
    """Append-only JSON-lines log; also keeps the records in memory."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def _mean_or_none(xs) -> float | None:
    return float(np.mean(xs)) if len(xs) else None


# ---------------------------------------------------------------------------
# Value and Q networks


class ValueNet:
    def __init__(self, in_dim: int, hidden=(64, 64), seed: int = 0):
        self.spec = MlpSpec((in_dim,) + tuple(hidden) + (1,), hidden_activation="tanh")
        self.params = init_params(self.spec, seed)
        self.params.spec["kind"] = "value-net"

    def bind(self, graph: Graph, trainable: bool = True, params: ParamSet | None = None):
        return graph.bind((params or self.params).values, trainable)

    def __call__(self, bound, x: Tensor) -> Tensor:
        return mlp_forward(bound, self.spec, x).reshape(x.shape[0])

    def predict(self, x) -> np.ndarray:
        g = Graph()
        return self(self.bind(g, False), g.constant(np.atleast_2d(x))).numpy()


class QNet(ValueNet):
    """Q(s, a) on the concatenated input."""

    def __init__(self, state_dim: int, action_dim: int, hidden=(64, 64), seed: int = 0):
        self.spec = MlpSpec((state_dim + action_dim,) + tuple(hidden) + (1,), hidden_activation="relu")
        self.params = init_params(self.spec, seed)
        self.params.spec["kind"] = "q-net"

    def q(self, bound, states: Tensor, actions: Tensor) -> Tensor:
        return self(bound, concat([states, actions], axis=1))

    def q_array(self, states, actions, params: ParamSet | None = None) -> np.ndarray:
        g = Graph()
        b = self.bind(g, False, params)
        return self.q(b, g.constant(np.atleast_2d(states)), g.constant(np.atleast_2d(actions))).numpy()


# ---------------------------------------------------------------------------
# On-policy


def compute_advantages(rewards, values, dones, gamma: float, lam: float, last_value: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and return targets (advantage + value).

    ``values[t]`` is V(s_t); ``last_value`` bootstraps the state after the
    final step unless that step is done.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    T = len(rewards)
    adv = np.zeros(T)
    gae = 0.0
    next_value = last_value
    for t in range(T - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        gae = delta + gamma * lam * live * gae
        adv[t] = gae
        next_value = values[t]
    return adv, adv + values


@dataclass
class Rollout:
    """Flattened (time-major) batch from ``num_envs`` parallel environments."""

    states: np.ndarray
    actions: np.ndarray  # full policy-space vectors (the flow may carry an extra latent)
    log_probs: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    values: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    episode_returns: list[float] = field(default_factory=list)


def _policy_batch(policy, states: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    g = Graph()
    a, logp = policy.sample(g, policy.bind(g, trainable=False), states, rng)
    return a.numpy(), logp.numpy()


class VecEnv:
    """Parallel copies of one env, each with its own seed; auto-resets."""

    def __init__(self, spec: EnvSpec, num_envs: int, seed: int):
        seeds = np.random.SeedSequence(seed).generate_state(num_envs)
        self.spec = spec
        self.envs = [Env(spec, int(s)) for s in seeds]
        self.obs = np.array([e.reset() for e in self.envs])
        self.ep_ret = np.zeros(num_envs)

    def step(self, actions: np.ndarray):
        rewards, dones, finished = [], [], []
        for i, env in enumerate(self.envs):
            nxt, r, terminal, truncated = env.step(actions[i])
            self.ep_ret[i] += r
            if terminal or truncated:
                finished.append(float(self.ep_ret[i]))
                self.ep_ret[i] = 0.0
                nxt = env.reset()
            self.obs[i] = nxt
            rewards.append(r)
            dones.append(terminal or truncated)
        return np.array(rewards), np.array(dones, dtype=np.float64), finished


def collect_rollout(policy, value: ValueNet, venv: VecEnv, n_steps: int, config: "TrainConfig", rng: np.random.Generator) -> Rollout:
    """Step every env ``n_steps // num_envs`` times with the current policy.

    Time-limit truncation is treated like termination when computing
    advantages; unfinished episodes bootstrap from V at the cut.
    """
    n_envs = len(venv.envs)
    T = max(1, n_steps // n_envs)
    S, A, LP, R, D, V = [], [], [], [], [], []
    returns: list[float] = []
    for _ in range(T):
        obs = venv.obs.copy()
        a, logp = _policy_batch(policy, obs, rng)
        r, d, fin = venv.step(policy.env_action(a))
        S.append(obs)
        A.append(a)
        LP.append(logp)
        R.append(r)
        D.append(d)
        V.append(value.predict(obs))
        returns.extend(fin)
    last = value.predict(venv.obs)
    adv = np.zeros((T, n_envs))
    ret = np.zeros((T, n_envs))
    R, D, V = np.array(R), np.array(D), np.array(V)
    for i in range(n_envs):
        adv[:, i], ret[:, i] = compute_advantages(R[:, i], V[:, i], D[:, i], config.gamma, config.gae_lambda, float(last[i]))
    flat = lambda x: np.asarray(x).reshape(T * n_envs, *np.asarray(x).shape[2:])
    return Rollout(flat(S), flat(A), flat(LP), flat(R), flat(D), flat(V), flat(adv), flat(ret), returns)


def onpolicy_update(policy, value: ValueNet, rollout: Rollout, config: TrainConfig, opt_policy: Adam, opt_value: Adam, rng: np.random.Generator) -> dict:
    """Epochs of minibatch clipped-surrogate steps with an entropy bonus.

    Advantages are used unnormalized so that the entropy coefficient keeps
    its meaning as a temperature. Policy and value networks have separate
    optimizers but share one backward pass.
    """
    adv, ret = rollout.advantages, rollout.returns
    n = len(adv)
    report = {"policy_loss": [], "value_loss": [], "entropy": [], "ratio_first": None}
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch):
            idx = order[start : start + config.minibatch]
            g = Graph()
            pb = policy.bind(g)
            vb = value.bind(g)
            st = g.constant(rollout.states[idx])
            logp = policy.log_prob(g, pb, st, g.constant(rollout.actions[idx]))
            ratio = (logp - g.constant(rollout.log_probs[idx])).exp()
            A = g.constant(adv[idx])
            surr = minimum(ratio * A, clip(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps) * A).mean()
            ent = policy.entropy(g, pb, st, rng)
            v_err = value(vb, st) - g.constant(ret[idx])
            v_loss = v_err.square().mean()
            pi_loss = -surr - config.beta * ent
            total = pi_loss + config.value_coef * v_loss
            if not np.isfinite(total.item()):
                raise FloatingPointError(f"non-finite on-policy loss (policy {pi_loss.item()}, value {v_loss.item()})")
            if report["ratio_first"] is None:
                report["ratio_first"] = ratio.numpy().copy()
            grads = backward(g, total)
            opt_policy.step(policy.params, grads.collect(pb))
            opt_value.step(value.params, grads.collect(vb))
            report["policy_loss"].append(pi_loss.item())
            report["value_loss"].append(v_loss.item())
            report["entropy"].append(ent.item())
    return report


@dataclass
class TrainResult:
    policy: object
    metrics: list[dict]
    critic: object = None
    classifier: object = None
    steps: int = 0


def _crash(out_dir, params: ParamSet, step: int, exc: Exception) -> DivergenceError:
    path = None
    if out_dir is not None:
        p = Path(out_dir) / "crash-checkpoint.json"
        p.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(params, p)
        path = str(p)
    return DivergenceError(f"training diverged at step {step}: {exc}", step, path)


def train_onpolicy(spec: EnvSpec, config: TrainConfig, policy, value: ValueNet | None = None, iterations: int | None = None, metrics_path=None, out_dir=None) -> TrainResult:
    """Collect rollouts and apply :func:`onpolicy_update` until ``total_steps``.

    ``iterations`` overrides the count derived from ``total_steps``.
    """
    ss = np.random.SeedSequence(config.seed)
    env_seed, act_seed, upd_seed = (int(x.generate_state(1)[0]) for x in ss.spawn(3))
    act_rng = np.random.default_rng(act_seed)
    upd_rng = np.random.default_rng(upd_seed)
    venv = VecEnv(spec, config.num_envs, env_seed)
    value = value or ValueNet(spec.state_dim, seed=config.seed + 1)
    opt_p, opt_v = Adam(config.lr_policy), Adam(config.lr_critic)
    sink = MetricSink(metrics_path)
    n_iter = iterations if iterations is not None else config.total_steps // config.rollout_length
    step = 0
    t0 = time.perf_counter()
    for _ in range(n_iter):
        try:
            ro = collect_rollout(policy, value, venv, config.rollout_length, config, act_rng)
            rep = onpolicy_update(policy, value, ro, config, opt_p, opt_v, upd_rng)
        except (AutodiffError, FloatingPointError) as exc:
            raise _crash(out_dir, policy.params, step, exc) from exc
        step += len(ro.rewards)
        rec = {
            "step": step,
            "episode_return_mean": _mean_or_none(ro.episode_returns),
            "critic_loss": _mean_or_none(rep["value_loss"]),
            "classifier_loss": None,
            "entropy_estimate": _mean_or_none(rep["entropy"]),
            "policy_loss": _mean_or_none(rep["policy_loss"]),
        }
        if config.record_wall_ms:
            rec["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
        sink.write(rec)
    return TrainResult(policy, sink.records, critic=value, steps=step)


# ---------------------------------------------------------------------------
# Off-policy


def td_targets(rewards, dones, next_q, gamma: float) -> np.ndarray:
    targets = np.asarray(rewards, dtype=np.float64) + gamma * (1.0 - np.asarray(dones, dtype=np.float64)) * np.asarray(next_q, dtype=np.float64)
    if not np.all(np.isfinite(targets)):
        raise FloatingPointError("non-finite TD targets")
    return targets


def td_loss(q_sa: Tensor, targets: np.ndarray) -> Tensor:
    return (q_sa - q_sa.graph.constant(targets)).square().mean()


def td_critic_update(
    critic: QNet,
    target_policy: NoisyMlpPolicy,
    target_policy_params: ParamSet,
    target_critic_params: ParamSet,
    batch: Mapping[str, np.ndarray],
    gamma: float,
    opt: Adam,
    rng: np.random.Generator,
) -> float:
    """One Adam step on the mean squared TD error.

    The next action comes from the target policy with fresh parameter noise
    and a fresh dropout mask; done transitions drop the bootstrap term.
    """
    a_next = target_policy.act_batch(batch["s_next"], rng, params=target_policy_params)
    next_q = critic.q_array(batch["s_next"], a_next, target_critic_params)
    targets = td_targets(batch["r"], batch["done"], next_q, gamma)
    g = Graph()
    b = critic.bind(g)
    loss = td_loss(critic.q(b, g.constant(batch["s"]), g.constant(batch["a"])), targets)
    opt.step(critic.params, backward(g, loss).collect(b))
    return loss.item()


def classifier_update(clf: DensityClassifier, policy: NoisyMlpPolicy, states: np.ndarray, opt: Adam, rng: np.random.Generator) -> float:
    """Policy actions vs uniform actions at the same replay states."""
    pos = policy.act_batch(states, rng)
    neg = clf.uniform_actions(rng, states.shape[0])
    g = Graph()
    b = clf.bind(g)
    loss = classifier_loss(clf, states, pos, states, neg, g, b)
    opt.step(clf.params, backward(g, loss).collect(b))
    return loss.item()


def pathwise_policy_update(policy: NoisyMlpPolicy, critic: QNet, clf: DensityClassifier | None, states: np.ndarray, beta: float, opt: Adam, rng: np.random.Generator) -> dict:
    """Ascend E[Q(s, f(s, eps))] + beta * H along the sample path.

    The entropy term is -E[c(s, f(s, eps))] with the classifier frozen; the
    critic is frozen too, so only (mu, rho) receive gradients.
    """
    g = Graph()
    pb = policy.bind(g)
    st = g.constant(states)
    a = policy.sample(g, pb, st, rng)
    q = critic.q(critic.bind(g, False), st, a).mean()
    objective = q
    ent = None
    if clf is not None and beta > 0:
        c = clf.logits(clf.bind(g, False), st, a).mean()
        ent = -c.item() + clf.log_volume
        objective = q - beta * c
    grads = backward(g, objective).collect(pb)
    params = policy.params
    opt.step(params, grads, ascent=True)
    policy.set_params(params)
    return {"q": q.item(), "entropy": ent, "grads": grads}


def train_offpolicy(
    spec: EnvSpec,
    config: TrainConfig,
    policy: NoisyMlpPolicy | None = None,
    metrics_path=None,
    out_dir=None,
    policy_kwargs: dict | None = None,
) -> TrainResult:
    """Act, store, then per step: critic TD step, classifier step, policy step;
    targets are hard-synced every ``target_period`` steps."""
    ss = np.random.SeedSequence(config.seed)
    env_seed, act_seed, upd_seed, init_seed = (int(x.generate_state(1)[0]) for x in ss.spawn(4))
    act_rng = np.random.default_rng(act_seed)
    rng = np.random.default_rng(upd_seed)
    init = np.random.default_rng(init_seed)
    if policy is None:
        policy = NoisyMlpPolicy(spec.state_dim, spec.action_dim, spec.low, spec.high, seed=int(init.integers(2**31)), **(policy_kwargs or {}))
    critic = QNet(spec.state_dim, spec.action_dim, seed=int(init.integers(2**31)))
    clf = DensityClassifier(spec.state_dim, spec.action_dim, spec.low, spec.high, seed=int(init.integers(2**31)))
    target_pi = policy.params.copy()
    target_q = critic.params.copy()
    opt_pi, opt_q, opt_c = Adam(config.lr_policy), Adam(config.lr_critic), Adam(config.lr_classifier)
    buffer = ReplayBuffer(config.buffer_capacity, spec.state_dim, spec.action_dim)
    env = Env(spec, env_seed)
    sink = MetricSink(metrics_path)
    use_clf = config.beta > 0

    obs = env.reset()
    ep_ret = 0.0
    window = {"ret": [], "critic": [], "clf": [], "ent": []}
    t0 = time.perf_counter()
    for step in range(1, config.total_steps + 1):
        a = clip_action(spec, policy.act(obs, act_rng))
        nxt, r, terminal, truncated = env.step(a)
        buffer.add(Transition(obs, a, r, nxt, terminal))
        ep_ret += r
        obs = nxt
        if terminal or truncated:
            window["ret"].append(ep_ret)
            ep_ret = 0.0
            obs = env.reset()

        if len(buffer) >= config.warmup_steps:
            try:
                for _ in range(config.updates_per_step):
                    batch = buffer.sample(config.batch_size, rng)
                    window["critic"].append(td_critic_update(critic, policy, target_pi, target_q, batch, config.gamma, opt_q, rng))
                    if use_clf:
                        window["clf"].append(classifier_update(clf, policy, batch["s"], opt_c, rng))
                    rep = pathwise_policy_update(policy, critic, clf if use_clf else None, batch["s"], config.beta, opt_pi, rng)
                    if rep["entropy"] is not None:
                        window["ent"].append(rep["entropy"])
            except (AutodiffError, FloatingPointError) as exc:
                raise _crash(out_dir, policy.params, step, exc) from exc
        elif use_clf:
            # the policy is frozen during warmup, so the classifier can catch up to it
            batch = buffer.sample(config.batch_size, rng)
            window["clf"].append(classifier_update(clf, policy, batch["s"], opt_c, rng))
        if step % config.target_period == 0:
            target_pi = policy.params.copy()
            target_q = critic.params.copy()
        if step % config.log_interval == 0 or step == config.total_steps:
            rec = {
                "step": step,
                "episode_return_mean": _mean_or_none(window["ret"]),
                "critic_loss": _mean_or_none(window["critic"]),
                "classifier_loss": _mean_or_none(window["clf"]),
                "entropy_estimate": _mean_or_none(window["ent"]),
            }
            if config.record_wall_ms:
                rec["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
            if rec["classifier_loss"] is not None and rec["classifier_loss"] >= CLASSIFIER_LOSS_ALERT:
                log.warning("step %d: classifier loss %.4f is at the uninformed level, entropy estimates are unreliable", step, rec["classifier_loss"])
            sink.write(rec)
            window = {k: [] for k in window}
    result = TrainResult(policy, sink.records, critic=critic, classifier=clf, steps=config.total_steps)
    result.targets = (target_pi, target_q)
    return result


# ---------------------------------------------------------------------------
# Evaluation helpers


def goal_coverage(spec: EnvSpec, act, episodes: int, seed: int) -> dict:
    """Which multi-goal targets are reached by ``act(obs) -> action``."""
    env = Env(spec, seed)
    counts = np.zeros(len(spec.multigoal.goals), dtype=int)
    for _ in range(episodes):
        obs = env.reset()
        while True:
            obs, _, terminal, truncated = env.step(act(obs))
            if terminal:
                counts[nearest_goal(spec.multigoal, env.state)[0]] += 1
            if terminal or truncated:
                break
    return {"counts": counts.tolist(), "goals_reached": int(np.sum(counts > 0)), "success_rate": float(counts.sum() / episodes)}


def quadratic_bandit_gradients(theta, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample gradient estimates of E[-||a||^2] for a = theta + eps.

    Returns ``(pathwise, score_function)``, each of shape (n, dim). Both are
    computed through the autodiff tape: the pathwise one differentiates
    Q(theta + eps), the score one weights grad log N(a; theta, I) by Q(a).
    """
    theta = np.asarray(theta, dtype=np.float64)
    eps = rng.standard_normal((n, theta.size))
    g = Graph()
    th = g.leaf(np.tile(theta, (n, 1)))
    a = th + g.constant(eps)
    q = -(a.square().sum(axis=1))
    pathwise = backward(g, q.sum())[th]

    g2 = Graph()
    th2 = g2.leaf(np.tile(theta, (n, 1)))
    a_fixed = theta + eps
    logp = -0.5 * (g2.constant(a_fixed) - th2).square().sum(axis=1)
    weights = -(a_fixed**2).sum(axis=1)
    score = backward(g2, (logp * g2.constant(weights)).sum())[th2]
    return pathwise, score
