"""The eleven acceptance criteria, each at its stated tolerance.

Every test records one verdict line, printed in the pytest terminal summary.
Stochastic criteria run seeds 0, 1 and 2 and pass on at least two.
"""

import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from implicit_policy import cli, envs, gradcheck, rl, tabular
from implicit_policy.autodiff import Graph
from implicit_policy.blackbox import NoisyMlpPolicy
from implicit_policy.entropy import DensityClassifier
from implicit_policy.flow import FlowPolicy, GaussianPolicy, coupling_inverse, nfp_log_prob_array
from implicit_policy import imitation as im

from oracles import (
    fit_truncated_classifier,
    gaussian_entropy_gradient_samples,
    truncated_entropy_quadrature,
    truncated_gaussian,
    within_se,
)
from test_flow import forward_np, random_layer

SEEDS = (0, 1, 2)


def verdict(number, name, passed, detail):
    ACCEPTANCE_LINES.append(f"[acceptance] {number} {name}: {'PASS' if passed else 'FAIL'} ({detail})")
    assert passed, detail


def majority(flags):
    return sum(bool(f) for f in flags) >= 2


def test_1_operator_interpolation():
    t0 = time.perf_counter()
    rep = tabular.verify_operators(instances=1000, seed=0, tol=1e-9)
    dt = time.perf_counter() - t0
    ok = rep["passed"] and rep["max_violation"] <= 1e-9 and dt < 10.0
    verdict(1, "operator-interpolation", ok, f"1000 instances, max violation {rep['max_violation']:.2e}, {len(rep['failures'])} failures, {dt:.1f} s")


def test_2_boltzmann_fixed_points():
    rep = tabular.verify_fixed_points(instances=20, seed=0, tol=1e-8)
    detail = f"{rep['converged']}/20 converged, non-converged {rep['non_converged']}, max residual {rep['max_residual']:.1e}, max policy gap {rep['max_policy_gap']:.1e}"
    verdict(2, "boltzmann-fixed-points", rep["passed"], detail)


def test_3_lower_bound():
    t0 = time.perf_counter()
    rep = tabular.verify_lower_bound(instances=200, seed=0, kl_radius=0.01)
    dt = time.perf_counter() - t0
    ok = rep["applicable"] == 200 and rep["held"] == 200 and dt < 30.0
    verdict(3, "lower-bound", ok, f"held {rep['held']}/{rep['applicable']} (of 200), min slack {rep['min_slack']:.2e}, {dt:.1f} s")


def test_4_flow_correctness():
    worst_rt = 0.0
    for i in range(1000):
        m = 2 + i % 3
        layer, params = random_layer(m, i)
        x = np.random.default_rng(10_000 + i).normal(scale=2.0, size=(1, m))
        y, _ = forward_np(layer, params, x)
        g = Graph()
        back, _ = coupling_inverse(layer, y, g, g.bind(params, False))
        worst_rt = max(worst_rt, float(np.abs(back.numpy() - x).max()))

    worst_ld = 0.0
    h = 1e-6
    for m in (2, 3, 4):
        for seed in range(10):
            layer, params = random_layer(m, 100 * m + seed)
            x = np.random.default_rng(seed).normal(size=m)
            _, ld = forward_np(layer, params, x)
            J = np.zeros((m, m))
            for j in range(m):
                e = np.zeros(m)
                e[j] = h
                J[:, j] = (forward_np(layer, params, x + e)[0] - forward_np(layer, params, x - e)[0]) / (2 * h)
            numeric = np.linalg.slogdet(J)[1]
            worst_ld = max(worst_ld, abs(float(ld) - numeric) / max(abs(float(ld)), abs(numeric), 1e-8))

    pol = FlowPolicy(1, 2, embed_hidden=(8,), seed=3)
    n = 401
    grid = np.linspace(-10, 10, n)
    X, Y = np.meshgrid(grid, grid, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    dens = np.exp(nfp_log_prob_array(pol, np.full((len(pts), 1), 0.4), pts))
    mass = float(np.trapezoid(np.trapezoid(dens.reshape(n, n), grid, axis=1), grid))

    ok = worst_rt <= 1e-8 and worst_ld <= 1e-5 and abs(mass - 1.0) <= 1e-2
    verdict(4, "flow-correctness", ok, f"round trip {worst_rt:.1e}, log-det rel err {worst_ld:.1e}, density mass {mass:.5f}")


def test_5_gradient_checks():
    rows = gradcheck.run_target("all", seed=0)
    ops = [r for r in rows if r.target == "ops"]
    models = [r for r in rows if r.target != "ops"]
    ok = all(r.passed for r in rows) and all(r.report.tol <= 1e-5 for r in ops) and all(r.report.tol <= 1e-4 for r in models)
    worst_op = max(r.report.max_rel_error for r in ops)
    worst_model = max(r.report.max_rel_error for r in models)
    verdict(5, "gradient-checks", ok, f"{len(ops)} ops worst {worst_op:.1e}, {len(models)} policy checks worst {worst_model:.1e}")


def test_6_entropy_estimator():
    exact = truncated_entropy_quadrature()
    clf = fit_truncated_classifier(seed=0)
    xs = truncated_gaussian(np.random.default_rng(99), 100_000)
    est = float(-clf.logits_array(np.zeros((len(xs), 1)), xs).mean() + clf.log_volume)
    trained_ok = abs(est - exact) <= 0.05

    L = np.array([[1.2, 0.0], [0.4, 0.7]])
    gm, gL = gaussian_entropy_gradient_samples([0.3, -0.2], L, 100_000, 3)
    grad_ok = within_se(gm, np.zeros(2))[0] and within_se(gL, np.linalg.inv(L).T)[0]
    _, mean_L, se_L = within_se(gL, np.linalg.inv(L).T)
    worst_z = float(np.max(np.abs(mean_L - np.linalg.inv(L).T) / np.where(se_L > 0, se_L, 1.0)))
    verdict(6, "entropy-estimator", trained_ok and grad_ok, f"estimate {est:.4f} vs quadrature {exact:.4f}; closed-form gradient worst |z| {worst_z:.2f}")


def test_7_pathwise_gradient():
    theta = np.array([0.5, -1.0])
    pw, sf = rl.quadratic_bandit_gradients(theta, 100_000, np.random.default_rng(0))
    pw_ok = within_se(pw, -2 * theta)[0]
    diff_se = np.sqrt(pw.var(axis=0, ddof=1) / len(pw) + sf.var(axis=0, ddof=1) / len(sf))
    match_ok = bool(np.all(np.abs(pw.mean(axis=0) - sf.mean(axis=0)) <= 3 * diff_se))
    verdict(7, "pathwise-gradient", pw_ok and match_ok, f"pathwise {np.round(pw.mean(axis=0), 4).tolist()}, score {np.round(sf.mean(axis=0), 3).tolist()}, analytic {(-2 * theta).tolist()}")


# ---------------------------------------------------------------------------
# desk-scale training experiments


def bandit_config(seed):
    return rl.TrainConfig(beta=0.1, gamma=0.99, lr_policy=3e-3, lr_critic=1e-2, rollout_length=1024, num_envs=1024, epochs=5, minibatch=256, gae_lambda=0.0, seed=seed)


def bandit_correlation(policy, seed):
    res = rl.train_onpolicy(envs.gaussian_bandit(), bandit_config(seed), policy, iterations=40)
    return float(np.corrcoef(cli.bandit_samples(res.policy, 10_000, seed + 11).T)[0, 1])


@pytest.mark.slow
def test_8_gaussian_bandit():
    target = envs.BanditParams().target_correlation
    rows, flags = [], []
    for seed in SEEDS:
        t0 = time.perf_counter()
        c_flow = bandit_correlation(FlowPolicy(1, 2, squash=True, seed=seed), seed)
        c_gauss = bandit_correlation(GaussianPolicy(1, 2, squash=True, seed=seed), seed)
        dt = time.perf_counter() - t0
        flags.append(abs(c_flow - target) <= 0.1 and abs(c_gauss) <= 0.2 and dt <= 600)
        rows.append(f"seed {seed}: flow {c_flow:.3f}, gaussian {c_gauss:.3f}, {dt:.0f} s")
    verdict(8, "gaussian-bandit", majority(flags), f"seeds passing {sum(flags)}/3; " + "; ".join(rows))


def multigoal_run(seed, beta, rho_init):
    spec = envs.multi_goal()
    cfg = rl.TrainConfig(beta=beta, lr_policy=1e-3, total_steps=15_000, seed=seed)
    res = rl.train_offpolicy(spec, cfg, policy_kwargs={"rho_init": rho_init})
    # one fixed evaluation protocol for every training seed
    rng = np.random.default_rng(5)
    return rl.goal_coverage(spec, lambda o: res.policy.act(o, rng), 100, 99)


@pytest.mark.slow
def test_9_multigoal():
    rows, flags = [], []
    for seed in SEEDS:
        t0 = time.perf_counter()
        with_entropy = multigoal_run(seed, 0.3, -1.0)
        dt = time.perf_counter() - t0
        without = multigoal_run(seed, 0.0, -9.0)
        flags.append(with_entropy["goals_reached"] >= 3 and without["goals_reached"] <= 2 and dt <= 1200)
        rows.append(f"seed {seed}: beta>0 {with_entropy['counts']}, beta=0 {without['counts']}, {dt:.0f} s")
    verdict(9, "multi-goal", majority(flags), f"seeds passing {sum(flags)}/3; " + "; ".join(rows))


def imitation_run(algo, seed):
    spec = envs.bimodal_axis()
    data = im.generate_expert_dataset(spec, envs.BimodalAxisExpert(), 10_000, seed)
    if algo == "flow":
        policy = FlowPolicy(1, 1, squash=True, seed=seed)
        im.train_bc(policy, data, 4000, 256, 3e-4, seed)
    elif algo == "gaussian":
        policy = GaussianPolicy(1, 1, squash=True, seed=seed)
        im.train_bc(policy, data, 4000, 256, 3e-4, seed)
    else:
        policy = NoisyMlpPolicy(1, 1, spec.low, spec.high, rho_init=-1.0, seed=seed)
        disc = DensityClassifier(1, 1, spec.low, spec.high, seed=seed + 1)
        im.train_gan(policy, disc, data, 2000, 256, 1e-3, 1e-3, seed)
    act = cli.actor(policy)
    rng = np.random.default_rng(seed + 2)
    at_origin = np.array([act(np.zeros(1), rng) for _ in range(2000)]).reshape(-1)
    coverage = im.mode_coverage(im.rollout_finals(spec, act, 200, seed + 3), im.axis_mode_descriptors())
    return at_origin, coverage


# a clone centred between the modes trivially puts half its mass on each sign,
# so sign mass is counted only outside this band around zero
BETWEEN_MODES = 0.3


@pytest.mark.slow
def test_10_bimodal_imitation():
    rows, flags = [], []
    for seed in SEEDS:
        flow_a, flow_cov = imitation_run("flow", seed)
        gauss_a, _ = imitation_run("gaussian", seed)
        _, gan_cov = imitation_run("gan", seed)
        flow_pos, flow_neg = np.mean(flow_a > BETWEEN_MODES), np.mean(flow_a < -BETWEEN_MODES)
        gauss = im.sign_mass(gauss_a)
        flow_ok = min(flow_pos, flow_neg) >= 0.3 and min(flow_cov["+10"], flow_cov["-10"]) >= 0.25
        gauss_ok = max(gauss["positive"], gauss["negative"]) >= 0.8 or gauss["mean_abs"] <= 0.2
        gan_ok = min(gan_cov["+10"], gan_cov["-10"]) >= 0.25
        flags.append(flow_ok and gauss_ok and gan_ok)
        rows.append(
            f"seed {seed}: flow a>{BETWEEN_MODES} {flow_pos:.2f} a<-{BETWEEN_MODES} {flow_neg:.2f} (plain sign {np.mean(flow_a > 0):.2f}/{np.mean(flow_a < 0):.2f}) "
            f"cover {flow_cov['+10']:.2f}/{flow_cov['-10']:.2f} [{'ok' if flow_ok else 'fail'}], "
            f"gaussian sign {gauss['positive']:.2f}/{gauss['negative']:.2f} |a| {gauss['mean_abs']:.3f} [{'ok' if gauss_ok else 'fail'}], "
            f"gan cover {gan_cov['+10']:.2f}/{gan_cov['-10']:.2f} [{'ok' if gan_ok else 'fail'}]"
        )
    verdict(10, "bimodal-imitation", majority(flags), f"seeds passing {sum(flags)}/3; " + "; ".join(rows))


def test_11_determinism(tmp_path):
    runs = {
        "on-policy": ["train.total_steps=128", "train.rollout_length=32", "train.num_envs=2", "train.epochs=2", "train.minibatch=32", "train.log_interval=1", "model.embed_hidden=[8]"],
        "off-policy": ["algo=nbp-offpolicy", "env.kind=multi-goal-2d", "train.total_steps=300", "train.warmup=100", "train.beta=0.1", "train.log_interval=50", "model.hidden=[16,16]"],
        "imitation": ["imitate", "env.kind=bimodal-axis", "imitation.episodes=20", "imitation.steps=20", "imitation.log_interval=5", "imitation.eval_episodes=5", "model.embed_hidden=[8]"],
    }
    same = {}
    for name, args in runs.items():
        command = "imitate" if args[0] == "imitate" else "train"
        overrides = args[1:] if command == "imitate" else args
        blobs = []
        for rep in ("a", "b"):
            out = tmp_path / f"{name}-{rep}"
            assert cli.run([command, "--seed", "5", "--out", str(out), "eval.episodes=1", *overrides]) == cli.EXIT_OK
            blobs.append((out / "metrics.jsonl").read_bytes())
        same[name] = blobs[0] == blobs[1] and len(blobs[0]) > 0
    verdict(11, "determinism", all(same.values()), ", ".join(f"{k} {'identical' if v else 'DIFFERENT'}" for k, v in same.items()))
