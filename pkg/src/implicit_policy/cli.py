"""``ipl`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 training divergence,
4 verification or gradient-check failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import gradcheck, tabular
from .approximators import HashMismatchError, CheckpointError, load_checkpoint, save_checkpoint
from .autodiff import Graph
from .blackbox import NoisyMlpPolicy
from .config import COMMANDS, ConfigError, RunConfig, parse_config, save_effective
from .entropy import DensityClassifier
from .envs import BimodalAxisExpert, EnvSpec, Trajectory, rollout, write_trajectories_csv
from .flow import FlowPolicy, GaussianPolicy
from .imitation import (
    axis_mode_descriptors,
    generate_expert_dataset,
    mode_coverage,
    rollout_finals,
    sign_mass,
    train_bc,
    train_gan,
)
from .rl import DivergenceError, MetricSink, goal_coverage, train_offpolicy, train_onpolicy

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_VERIFY_FAILED = 4

DEFAULT_INSTANCES = {"operators": 1000, "fixed-points": 20, "lower-bound": 200}


def build_policy(cfg: RunConfig, spec: EnvSpec, seed: int | None = None):
    m = cfg.model
    seed = cfg.seed if seed is None else seed
    if cfg.algo == "nfp-onpolicy":
        return FlowPolicy(
            spec.state_dim,
            spec.action_dim,
            n_layers=m.flow_layers,
            hidden=m.coupling_hidden,
            coupling_hidden_layers=m.coupling_depth,
            embed_hidden=tuple(m.embed_hidden),
            scale_bound=m.scale_bound,
            squash=m.squash,
            seed=seed,
        )
    if cfg.algo == "gaussian-baseline":
        return GaussianPolicy(spec.state_dim, spec.action_dim, hidden=tuple(m.hidden), squash=m.squash, seed=seed)
    return NoisyMlpPolicy(
        spec.state_dim,
        spec.action_dim,
        spec.low,
        spec.high,
        hidden=tuple(m.hidden),
        dropout_p=m.dropout_p,
        rho_init=m.rho_init,
        layer_norm=m.layer_norm,
        seed=seed,
    )


def actor(policy):
    """``act(obs, rng) -> env action`` for any policy kind."""
    if isinstance(policy, NoisyMlpPolicy):
        return lambda obs, rng: policy.act(obs, rng)
    return lambda obs, rng: policy.act(obs, rng)[0]


def set_policy_params(policy, params) -> None:
    if isinstance(policy, NoisyMlpPolicy):
        policy.set_params(params)
    else:
        policy.params = params


def eval_rollouts(spec: EnvSpec, policy, episodes: int, seed: int) -> list[Trajectory]:
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(5)[4])
    act = actor(policy)
    return rollout(spec, lambda obs: act(obs, rng), seed + 1, episodes)


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=float) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: RunConfig, out: Path) -> int:
    spec = cfg.env.build()
    policy = build_policy(cfg, spec)
    metrics = out / "metrics.jsonl"
    try:
        if cfg.algo == "nbp-offpolicy":
            res = train_offpolicy(spec, cfg.train, policy=policy, metrics_path=metrics, out_dir=out)
        else:
            res = train_onpolicy(spec, cfg.train, policy, metrics_path=metrics, out_dir=out)
    except DivergenceError as exc:
        print(f"diverged: {exc} (crash checkpoint: {exc.checkpoint})", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(res.policy.params, out / "checkpoint.json")
    trajs = eval_rollouts(spec, res.policy, cfg.eval.episodes, cfg.seed)
    write_trajectories_csv(out / "trajectories.csv", trajs, spec.state_dim, spec.action_dim)
    print(f"trained {res.steps} steps; artifacts in {out}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, out: Path, checkpoint: str | None) -> int:
    spec = cfg.env.build()
    policy = build_policy(cfg, spec)
    path = Path(checkpoint or cfg.eval.checkpoint or out / "checkpoint.json")
    params = load_checkpoint(path, expected_hash=policy.params.spec_hash)
    set_policy_params(policy, params)
    trajs = eval_rollouts(spec, policy, cfg.eval.episodes, cfg.seed)
    write_trajectories_csv(out / "trajectories.csv", trajs, spec.state_dim, spec.action_dim)
    report = {"episodes": len(trajs), "return_mean": float(np.mean([t.total_reward for t in trajs])), "checkpoint": str(path)}
    if spec.kind == "multi-goal-2d":
        rng = np.random.default_rng(cfg.seed)
        act = actor(policy)
        report["goals"] = goal_coverage(spec, lambda o: act(o, rng), cfg.eval.episodes, cfg.seed + 1)
    if spec.kind == "bimodal-axis":
        report["modes"] = mode_coverage(trajs, axis_mode_descriptors())
    _write_json(out / "eval-report.json", report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_imitate(cfg: RunConfig, out: Path) -> int:
    spec = cfg.env.build()
    if spec.kind != "bimodal-axis":
        raise ConfigError("imitate supports env.kind = bimodal-axis")
    im = cfg.imitation
    data = generate_expert_dataset(spec, BimodalAxisExpert(), im.episodes, cfg.seed)
    data.save(out / "demos.csv")
    policy = build_policy(cfg, spec)
    sink = MetricSink(out / "metrics.jsonl")

    def log(rec):
        if rec["step"] % im.log_interval == 0:
            sink.write(rec)

    try:
        if cfg.algo == "nbp-offpolicy":
            disc = DensityClassifier(spec.state_dim, spec.action_dim, spec.low, spec.high, seed=cfg.seed + 1)
            train_gan(policy, disc, data, im.gan_steps, im.batch, im.lr_d, im.lr_g, cfg.seed, log)
        else:
            train_bc(policy, data, im.steps, im.batch, im.lr, cfg.seed, log)
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        save_checkpoint(policy.params, out / "crash-checkpoint.json")
        return EXIT_DIVERGED
    save_checkpoint(policy.params, out / "checkpoint.json")
    act = actor(policy)
    rng = np.random.default_rng(cfg.seed + 2)
    at_origin = np.array([act(np.zeros(spec.state_dim), rng) for _ in range(2000)])
    finals = rollout_finals(spec, act, im.eval_episodes, cfg.seed + 3)
    trajs = eval_rollouts(spec, policy, cfg.eval.episodes, cfg.seed)
    write_trajectories_csv(out / "trajectories.csv", trajs, spec.state_dim, spec.action_dim)
    report = {"actions_at_origin": sign_mass(at_origin), "mode_coverage": mode_coverage(finals, axis_mode_descriptors()), "demos": len(data)}
    _write_json(out / "imitate-report.json", report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_verify(cfg: RunConfig, out: Path) -> int:
    suite = cfg.verify.suite
    if suite not in tabular.SUITES:
        raise ConfigError(f"unknown suite {suite!r}; choose from {sorted(tabular.SUITES)}")
    n = cfg.verify.instances or DEFAULT_INSTANCES[suite]
    report = tabular.SUITES[suite](instances=n, seed=cfg.seed)
    _write_json(out / "verify-report.json", report)
    summary = {k: v for k, v in report.items() if k not in ("rows", "failures")}
    summary["failures"] = len(report["failures"])
    print(json.dumps(summary, sort_keys=True, default=float))
    return EXIT_OK if report["passed"] else EXIT_VERIFY_FAILED


def cmd_grad_check(cfg: RunConfig, out: Path) -> int:
    target = cfg.grad_check.target
    if target not in gradcheck.TARGETS + ("all",):
        raise ConfigError(f"unknown grad-check target {target!r}")
    rows = gradcheck.run_target(target, cfg.seed)
    print(gradcheck.format_table(rows))
    doc = {"target": target, "seed": cfg.seed, "rows": [{"target": r.target, "name": r.name, "max_rel_error": r.report.max_rel_error, "tol": r.report.tol, "passed": r.passed} for r in rows]}
    doc["passed"] = all(r.passed for r in rows)
    _write_json(out / "grad-check-report.json", doc)
    return EXIT_OK if doc["passed"] else EXIT_VERIFY_FAILED


def bandit_samples(policy, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if isinstance(policy, NoisyMlpPolicy):
        return policy.act_batch(np.zeros((n, 1)), rng)
    g = Graph()
    a, _ = policy.sample(g, policy.bind(g, False), np.zeros((n, 1)), rng)
    return policy.env_action(a.numpy())


def cmd_bandit_report(cfg: RunConfig, out: Path, checkpoint: str | None) -> int:
    spec = cfg.env.build()
    if spec.kind != "gaussian-bandit":
        raise ConfigError("bandit-report needs env.kind = gaussian-bandit")
    if checkpoint:
        policy = build_policy(cfg, spec)
        set_policy_params(policy, load_checkpoint(checkpoint, expected_hash=policy.params.spec_hash))
    else:
        rc = cmd_train(cfg, out)
        if rc != EXIT_OK:
            return rc
        policy = build_policy(cfg, spec)
        set_policy_params(policy, load_checkpoint(out / "checkpoint.json"))
    a = bandit_samples(policy, 10_000, cfg.seed + 11)
    corr = float(np.corrcoef(a.T)[0, 1])
    target = spec.bandit.target_correlation
    report = {
        "algo": cfg.algo,
        "samples": len(a),
        "correlation": corr,
        "target_correlation": target,
        "abs_error": abs(corr - target),
        "sample_covariance": np.cov(a.T).tolist(),
        "optimal_covariance": (spec.bandit.beta_opt * np.asarray(spec.bandit.sigma) / 2.0).tolist(),
        "mean_reward": float(np.mean([-(x @ spec.bandit.precision @ x) for x in a])),
    }
    _write_json(out / "bandit-report.json", report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ipl", description="Implicit-policy experiments and verification suites.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="YAML or JSON run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--suite", help="verify: operators | fixed-points | lower-bound")
    p.add_argument("--instances", type=int, help="verify: number of random instances")
    p.add_argument("--target", help="grad-check: ops | nfp-logprob | nfp-entropy | nbp-sample | all")
    p.add_argument("--checkpoint", help="eval / bandit-report: checkpoint to load")
    p.add_argument("overrides", nargs="*", help="dotted key=value overrides, e.g. train.beta=0.1")
    return p


def run(argv: list[str] | None = None) -> int:
    args = make_parser().parse_intermixed_args(argv)
    overrides = list(args.overrides)
    overrides.append(f"command={args.command}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"output_dir={args.out}")
    if args.suite is not None:
        overrides.append(f"verify.suite={args.suite}")
    if args.instances is not None:
        overrides.append(f"verify.instances={args.instances}")
    if args.target is not None:
        overrides.append(f"grad_check.target={args.target}")
    try:
        cfg = parse_config(args.config, overrides)
        out = Path(cfg.output_dir)
        save_effective(cfg, out)
        if cfg.command == "train":
            return cmd_train(cfg, out)
        if cfg.command == "eval":
            return cmd_eval(cfg, out, args.checkpoint)
        if cfg.command == "imitate":
            return cmd_imitate(cfg, out)
        if cfg.command == "verify":
            return cmd_verify(cfg, out)
        if cfg.command == "grad-check":
            return cmd_grad_check(cfg, out)
        return cmd_bandit_report(cfg, out, args.checkpoint)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (HashMismatchError, CheckpointError) as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
