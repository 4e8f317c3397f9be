"""Exact finite-MDP computations: backup operators, policy evaluation,
maximum-entropy and surrogate objectives, and the lower-bound check.

Everything is matrix algebra over (state, action) pairs; nothing is sampled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

PROB_TOL = 1e-12


@dataclass(frozen=True)
class TabularMdp:
    P: np.ndarray  # (nS, nA, nS)
    R: np.ndarray  # (nS, nA)
    gamma: float
    p1: np.ndarray  # (nS,)

    def __post_init__(self):
        P = np.asarray(self.P, dtype=np.float64)
        R = np.asarray(self.R, dtype=np.float64)
        p1 = np.asarray(self.p1, dtype=np.float64)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "p1", p1)
        nS, nA = R.shape
        if P.shape != (nS, nA, nS):
            raise ValueError(f"P has shape {P.shape}, expected {(nS, nA, nS)}")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > PROB_TOL:
            raise ValueError("each P[s, a, :] must be a probability vector")
        if p1.shape != (nS,) or np.any(p1 < 0) or abs(p1.sum() - 1.0) > PROB_TOL:
            raise ValueError("p1 must be a probability vector over states")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")

    @property
    def nS(self) -> int:
        return self.R.shape[0]

    @property
    def nA(self) -> int:
        return self.R.shape[1]


def check_policy(pi: np.ndarray, mdp: TabularMdp) -> np.ndarray:
    pi = np.asarray(pi, dtype=np.float64)
    if pi.shape != (mdp.nS, mdp.nA):
        raise ValueError(f"policy shape {pi.shape} != {(mdp.nS, mdp.nA)}")
    if np.any(pi < 0) or np.max(np.abs(pi.sum(axis=1) - 1.0)) > PROB_TOL:
        raise ValueError("policy rows must be probability vectors")
    return pi


def random_mdp(rng: np.random.Generator, nS: int, nA: int, gamma: float, deterministic: bool = False) -> TabularMdp:
    if deterministic:
        P = np.zeros((nS, nA, nS))
        nxt = rng.integers(nS, size=(nS, nA))
        P[np.arange(nS)[:, None], np.arange(nA)[None, :], nxt] = 1.0
    else:
        P = rng.dirichlet(np.ones(nS), size=(nS, nA))
    R = rng.normal(size=(nS, nA))
    p1 = rng.dirichlet(np.ones(nS))
    return TabularMdp(P, R, gamma, p1)


def random_policy(rng: np.random.Generator, nS: int, nA: int, temperature: float = 1.0) -> np.ndarray:
    return softmax(rng.normal(size=(nS, nA)) / temperature, axis=1)


# ---------------------------------------------------------------------------
# Backups. Each reduces the next-state Q row to a scalar, then backs it up.


def _backup(mdp: TabularMdp, next_values: np.ndarray) -> np.ndarray:
    return mdp.R + mdp.gamma * mdp.P @ next_values


def _check_beta(beta: float) -> None:
    if not beta > 0:
        raise ValueError("beta must be positive")


def greedy_value(Q: np.ndarray) -> np.ndarray:
    return Q.max(axis=1)


def boltzmann_value(Q: np.ndarray, beta: float) -> np.ndarray:
    _check_beta(beta)
    return (softmax(Q / beta, axis=1) * Q).sum(axis=1)


def mellowmax_value(Q: np.ndarray, beta: float) -> np.ndarray:
    _check_beta(beta)
    n = Q.shape[1]
    return beta * (logsumexp(Q / beta, axis=1) - np.log(n))


def bellman_opt(Q: np.ndarray, mdp: TabularMdp) -> np.ndarray:
    return _backup(mdp, greedy_value(np.asarray(Q, dtype=np.float64)))


def boltzmann_op(Q: np.ndarray, mdp: TabularMdp, beta: float) -> np.ndarray:
    return _backup(mdp, boltzmann_value(np.asarray(Q, dtype=np.float64), beta))


def mellowmax_op(Q: np.ndarray, mdp: TabularMdp, beta: float) -> np.ndarray:
    return _backup(mdp, mellowmax_value(np.asarray(Q, dtype=np.float64), beta))


@dataclass
class InequalityReport:
    holds: bool
    max_violation: float
    equality_sites: list[tuple[int, int]]
    constant_row_sites: list[tuple[int, int]]
    equality_matches_constancy: bool


def operator_inequality_check(Q: np.ndarray, mdp: TabularMdp, beta: float, tol: float = 1e-9) -> InequalityReport:
    """Checks bellman >= boltzmann >= mellowmax elementwise.

    A site (s, a) is an equality site when all three backups agree within
    ``tol``; that must happen exactly when every reachable next state has a
    constant Q row.
    """
    Q = np.asarray(Q, dtype=np.float64)
    t_star = bellman_opt(Q, mdp)
    t_b = boltzmann_op(Q, mdp, beta)
    t_s = mellowmax_op(Q, mdp, beta)
    violation = max(float(np.max(t_b - t_star)), float(np.max(t_s - t_b)), 0.0)
    equal = (np.abs(t_star - t_b) <= tol) & (np.abs(t_b - t_s) <= tol)
    row_const = np.ptp(Q, axis=1) == 0.0
    reachable = mdp.P > 0
    all_const = ~np.any(reachable & ~row_const[None, None, :], axis=2)
    eq_sites = [tuple(map(int, x)) for x in np.argwhere(equal)]
    const_sites = [tuple(map(int, x)) for x in np.argwhere(all_const)]
    return InequalityReport(violation <= tol, violation, eq_sites, const_sites, bool(np.array_equal(equal, all_const)))


# ---------------------------------------------------------------------------
# Policy evaluation


def _policy_transition(mdp: TabularMdp, pi: np.ndarray) -> np.ndarray:
    """(nS*nA, nS*nA) matrix M[(s,a),(s',a')] = P(s'|s,a) pi(a'|s')."""
    nS, nA = mdp.nS, mdp.nA
    return (mdp.P[:, :, :, None] * pi[None, None, :, :]).reshape(nS * nA, nS * nA)


def q_from_rewards(mdp: TabularMdp, pi: np.ndarray, rewards: np.ndarray) -> np.ndarray:
    n = mdp.nS * mdp.nA
    M = _policy_transition(mdp, pi)
    q = np.linalg.solve(np.eye(n) - mdp.gamma * M, rewards.reshape(n))
    return q.reshape(mdp.nS, mdp.nA)


def objective(mdp: TabularMdp, pi: np.ndarray, Q: np.ndarray) -> float:
    return float(mdp.p1 @ (pi * Q).sum(axis=1))


def policy_eval_exact(mdp: TabularMdp, pi: np.ndarray) -> tuple[np.ndarray, float]:
    """Q^pi from the linear Bellman equation, and J = E_{p1, pi}[Q^pi]."""
    pi = check_policy(pi, mdp)
    Q = q_from_rewards(mdp, pi, mdp.R)
    return Q, objective(mdp, pi, Q)


def policy_entropy(pi: np.ndarray) -> np.ndarray:
    """Per-state entropy in nats, with 0 log 0 = 0."""
    pi = np.asarray(pi, dtype=np.float64)
    logs = np.log(np.where(pi > 0, pi, 1.0))
    return -(pi * logs).sum(axis=1)


def maxent_eval_exact(mdp: TabularMdp, pi: np.ndarray, beta: float) -> float:
    """E[sum_t gamma^t (r_t + beta H[pi(.|s_t)])] via entropy-augmented rewards."""
    pi = check_policy(pi, mdp)
    aug = mdp.R + beta * policy_entropy(pi)[:, None]
    return objective(mdp, pi, q_from_rewards(mdp, pi, aug))


def discounted_visitation(mdp: TabularMdp, pi: np.ndarray) -> np.ndarray:
    """d(s) = sum_t gamma^t P(s_t = s) under pi from p1 (unnormalized)."""
    P_pi = np.einsum("sa,sat->st", pi, mdp.P)
    return np.linalg.solve((np.eye(mdp.nS) - mdp.gamma * P_pi).T, mdp.p1)


def surrogate_eval(mdp: TabularMdp, pi: np.ndarray, pi_old: np.ndarray, beta: float) -> float:
    """J(pi) + beta * E_{pi_old}[sum_t gamma^t H[pi(.|s_t)]]."""
    pi = check_policy(pi, mdp)
    pi_old = check_policy(pi_old, mdp)
    _, J = policy_eval_exact(mdp, pi)
    return J + beta * float(discounted_visitation(mdp, pi_old) @ policy_entropy(pi))


def truncated_rollout_eval(mdp: TabularMdp, pi: np.ndarray, pi_old: np.ndarray, beta: float, horizon: int = 200) -> float:
    """Surrogate objective by forward-propagating state marginals for ``horizon`` steps."""
    H = policy_entropy(pi)
    r_pi = (pi * mdp.R).sum(axis=1)
    P_new = np.einsum("sa,sat->st", pi, mdp.P)
    P_old = np.einsum("sa,sat->st", pi_old, mdp.P)
    d_new = mdp.p1.copy()
    d_old = mdp.p1.copy()
    total = 0.0
    disc = 1.0
    for _ in range(horizon):
        total += disc * (d_new @ r_pi + beta * (d_old @ H))
        d_new = d_new @ P_new
        d_old = d_old @ P_old
        disc *= mdp.gamma
    return float(total)


def kl_per_state(pi: np.ndarray, pi_old: np.ndarray) -> np.ndarray:
    """KL(pi(.|s) || pi_old(.|s)) for every state."""
    pi = np.asarray(pi, dtype=np.float64)
    pi_old = np.asarray(pi_old, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pi > 0, pi * (np.log(np.where(pi > 0, pi, 1.0)) - np.log(pi_old)), 0.0)
    return terms.sum(axis=1)


@dataclass
class LowerBoundReport:
    lhs: float
    rhs: float
    slack: float
    kl_max: float
    penalty: float
    applicable: bool
    holds: bool


def lower_bound_check(mdp: TabularMdp, pi: np.ndarray, pi_old: np.ndarray, beta: float, kl_radius: float, tol: float = 1e-10) -> LowerBoundReport:
    """J_MaxEnt(pi) >= J_surr(pi) - beta*gamma*sqrt(alpha)*eps/(1-gamma)^2 with eps = max_s |H|.

    The precondition is read as max over states of KL(pi || pi_old) <= alpha.
    """
    lhs = maxent_eval_exact(mdp, pi, beta)
    surr = surrogate_eval(mdp, pi, pi_old, beta)
    eps = float(np.max(np.abs(policy_entropy(pi))))
    g = mdp.gamma
    penalty = beta * g * np.sqrt(kl_radius) * eps / (1.0 - g) ** 2
    rhs = surr - penalty
    kl_max = float(kl_per_state(pi, pi_old).max())
    applicable = kl_max <= kl_radius
    return LowerBoundReport(float(lhs), float(rhs), float(lhs - rhs), kl_max, float(penalty), bool(applicable), bool(applicable and lhs >= rhs - tol))


def perturb_within_kl(rng: np.random.Generator, pi_old: np.ndarray, kl_radius: float, scale: float = 1.0) -> np.ndarray:
    """A random policy whose max-state KL to ``pi_old`` is at most ``kl_radius``."""
    logits = np.log(pi_old) + scale * rng.normal(size=pi_old.shape)
    lo, hi = 0.0, 1.0
    target = softmax(logits, axis=1)
    if kl_per_state(target, pi_old).max() <= kl_radius:
        return target
    # bisect on the interpolation weight between pi_old and the random target
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        cand = softmax((1 - mid) * np.log(pi_old) + mid * logits, axis=1)
        if kl_per_state(cand, pi_old).max() <= kl_radius:
            lo = mid
        else:
            hi = mid
    return softmax((1 - lo) * np.log(pi_old) + lo * logits, axis=1)


# ---------------------------------------------------------------------------
# Fixed points


@dataclass
class StationaryResult:
    pi: np.ndarray
    Q: np.ndarray
    residual: float
    policy_gap: float
    converged: bool
    iterations: int
    history: list[float] = field(default_factory=list)


def boltzmann_stationary(
    mdp: TabularMdp,
    beta: float,
    tol: float = 1e-11,
    max_iters: int = 20000,
    damping: float = 0.1,
    pi0: np.ndarray | None = None,
) -> StationaryResult:
    """Damped search for pi = softmax(Q^pi / beta).

    Non-convergence is reported through ``converged``; it is not an error.
    """
    _check_beta(beta)
    pi = np.full((mdp.nS, mdp.nA), 1.0 / mdp.nA) if pi0 is None else check_policy(pi0, mdp)
    gap = np.inf
    Q = None
    it = 0
    for it in range(1, max_iters + 1):
        Q, _ = policy_eval_exact(mdp, pi)
        target = softmax(Q / beta, axis=1)
        gap = float(np.max(np.abs(target - pi)))
        if gap <= tol:
            break
        pi = (1.0 - damping) * pi + damping * target
        pi /= pi.sum(axis=1, keepdims=True)
    Q, _ = policy_eval_exact(mdp, pi)
    gap = float(np.max(np.abs(softmax(Q / beta, axis=1) - pi)))
    residual = float(np.max(np.abs(boltzmann_op(Q, mdp, beta) - Q)))
    return StationaryResult(pi, Q, residual, gap, gap <= tol, it)


def value_iteration(mdp: TabularMdp, tol: float = 1e-12, max_iters: int = 100000) -> np.ndarray:
    Q = np.zeros((mdp.nS, mdp.nA))
    for _ in range(max_iters):
        nxt = bellman_opt(Q, mdp)
        if np.max(np.abs(nxt - Q)) <= tol:
            return nxt
        Q = nxt
    raise RuntimeError("value iteration did not converge within the iteration budget")


def mellowmax_fixed_point(mdp: TabularMdp, beta: float, tol: float = 1e-12, max_iters: int = 100000, history: list | None = None) -> np.ndarray:
    """Unique fixed point of the log-mean-exp backup (a gamma-contraction)."""
    _check_beta(beta)
    Q = np.zeros((mdp.nS, mdp.nA))
    for _ in range(max_iters):
        nxt = mellowmax_op(Q, mdp, beta)
        diff = float(np.max(np.abs(nxt - Q)))
        if history is not None:
            history.append(diff)
        Q = nxt
        if diff <= tol:
            return Q
    raise RuntimeError("mellowmax iteration exceeded its budget")


# ---------------------------------------------------------------------------
# Verification suites: randomized instances, machine-readable reports

BETAS = (0.1, 1.0, 10.0)


def _instance_mdp(rng: np.random.Generator, max_states: int = 6, max_actions: int = 4) -> TabularMdp:
    nS = int(rng.integers(2, max_states + 1))
    nA = int(rng.integers(2, max_actions + 1))
    gamma = float(rng.uniform(0.5, 0.95))
    return random_mdp(rng, nS, nA, gamma, deterministic=bool(rng.random() < 0.2))


def _instance_q(rng: np.random.Generator, mdp: TabularMdp) -> np.ndarray:
    Q = rng.normal(scale=float(rng.choice([0.1, 1.0, 10.0])), size=(mdp.nS, mdp.nA))
    # make some rows constant so the equality case is exercised
    const = rng.random(mdp.nS) < 0.3
    Q[const] = rng.normal(size=(int(const.sum()), 1))
    return Q


def verify_operators(instances: int = 1000, seed: int = 0, tol: float = 1e-9) -> dict:
    rng = np.random.default_rng(seed)
    worst = 0.0
    failures = []
    equality_sites = 0
    for i in range(instances):
        mdp = _instance_mdp(rng)
        Q = _instance_q(rng, mdp)
        beta = BETAS[i % len(BETAS)]
        rep = operator_inequality_check(Q, mdp, beta, tol)
        worst = max(worst, rep.max_violation)
        equality_sites += len(rep.equality_sites)
        if not (rep.holds and rep.equality_matches_constancy):
            failures.append({"instance": i, "beta": beta, "max_violation": rep.max_violation, "equality_matches_constancy": rep.equality_matches_constancy})
    return {
        "suite": "operators",
        "seed": seed,
        "instances": instances,
        "betas": list(BETAS),
        "tolerance": tol,
        "max_violation": worst,
        "equality_sites": equality_sites,
        "failures": failures,
        "passed": not failures,
    }


def verify_fixed_points(instances: int = 20, seed: int = 0, tol: float = 1e-8) -> dict:
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(instances):
        mdp = random_mdp(rng, int(rng.integers(2, 5)), int(rng.integers(2, 4)), float(rng.uniform(0.5, 0.9)))
        beta = float(rng.choice([0.5, 1.0, 2.0]))
        res = boltzmann_stationary(mdp, beta, tol=1e-11)
        rows.append({"instance": i, "beta": beta, "converged": res.converged, "iterations": res.iterations, "residual": res.residual, "policy_gap": res.policy_gap})
    conv = [r for r in rows if r["converged"]]
    bad = [r for r in conv if r["residual"] > tol or r["policy_gap"] > tol]
    return {
        "suite": "fixed-points",
        "seed": seed,
        "instances": instances,
        "tolerance": tol,
        "converged": len(conv),
        "non_converged": [r["instance"] for r in rows if not r["converged"]],
        "max_residual": max((r["residual"] for r in conv), default=None),
        "max_policy_gap": max((r["policy_gap"] for r in conv), default=None),
        "failures": bad,
        "rows": rows,
        "passed": bool(conv) and not bad,
    }


def verify_lower_bound(instances: int = 200, seed: int = 0, kl_radius: float = 0.01) -> dict:
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(instances):
        mdp = _instance_mdp(rng)
        beta = BETAS[i % len(BETAS)]
        pi_old = random_policy(rng, mdp.nS, mdp.nA, temperature=float(rng.choice([0.3, 1.0, 3.0])))
        pi = perturb_within_kl(rng, pi_old, kl_radius)
        rep = lower_bound_check(mdp, pi, pi_old, beta, kl_radius)
        rows.append({"instance": i, "beta": beta, "applicable": rep.applicable, "holds": rep.holds, "slack": rep.slack, "kl_max": rep.kl_max})
    applicable = [r for r in rows if r["applicable"]]
    return {
        "suite": "lower-bound",
        "seed": seed,
        "instances": instances,
        "kl_radius": kl_radius,
        "applicable": len(applicable),
        "held": sum(r["holds"] for r in applicable),
        "min_slack": min((r["slack"] for r in applicable), default=None),
        "failures": [r for r in applicable if not r["holds"]],
        "passed": len(applicable) == instances and all(r["holds"] for r in applicable),
    }


SUITES = {"operators": verify_operators, "fixed-points": verify_fixed_points, "lower-bound": verify_lower_bound}
