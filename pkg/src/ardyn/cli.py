"""Command line interface.

Subcommands cover the full pipeline: gen-data, train, sweep, ope,
plan-eval, augment, study. Every run writes a resolved-config snapshot
(resolved.cfg) into its output directory; CSV outputs echo the snapshot's
digest in a header comment. Exit codes: 0 success, 2 configuration
problems, 3 malformed files, 4 numeric failures, 5 planning failures.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import io as io_module
import json
import os
import sys

import numpy as np

from . import io as ardio
from .config import RunConfig
from .data import TransitionDataset
from .envs import (
    CorrelatedChainEnv,
    GaussianLinearPolicy,
    LinearGaussianEnv,
    PendulumEnv,
    PolicySet,
    analytic_value_linear_gaussian,
    collect_dataset,
    make_policy_set,
    true_policy_value_mc,
)
from .errors import ArdynError, ConfigError
from .ope import compute_metrics, ensemble_mb_ope, mb_ope, nll_vs_ope_study
from .planning import (
    LinearQuadraticCritic,
    MppiConfig,
    ZeroCritic,
    augment_dataset,
    evaluate_planner,
)
from .training import TrainConfig, hyperparameter_sweep, split_dataset, train_model

TOOL_VERSION = "1"


def mix_seeds(*parts) -> int:
    """Stable 63-bit seed derived from heterogeneous parts."""
    text = "|".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _prepare_out_dir(path: str, force: bool) -> str:
    os.makedirs(path, exist_ok=True)
    if os.listdir(path) and not force:
        raise ConfigError(f"output directory {path!r} is not empty (pass --force to reuse)")
    return path


def _write_text(path: str, text: str) -> None:
    ardio.atomic_write(path, text.encode("utf-8"))


def _write_csv(path: str, comments: list[str], fieldnames: list[str], rows: list[dict]) -> None:
    buf = io_module.StringIO()
    for comment in comments:
        buf.write(f"# {comment}\n")
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    _write_text(path, buf.getvalue())


def _write_jsonl(path: str, meta: dict, records: list[dict]) -> None:
    buf = io_module.StringIO()
    buf.write(json.dumps({"type": "meta", **meta}, sort_keys=True) + "\n")
    for record in records:
        buf.write(json.dumps(record, sort_keys=True) + "\n")
    _write_text(path, buf.getvalue())


def _csv_comments(cfg: RunConfig, command: str) -> list[str]:
    return [
        f"command = {command}",
        f"config_digest = {cfg.digest()}",
        f"tool_version = {TOOL_VERSION}",
    ]


def build_env(cfg: RunConfig):
    kind = cfg.get("env.kind")
    if kind == "pendulum":
        noise = cfg.get("env.noise_std")
        return PendulumEnv(
            dt=cfg.get("env.dt"),
            gravity=cfg.get("env.gravity"),
            damping=cfg.get("env.damping"),
            noise_std=tuple(noise),
            horizon=cfg.get("env.horizon"),
        )
    if cfg.get("env.transition") is not None:
        keys = [
            "env.state_dim", "env.action_dim", "env.horizon", "env.transition", "env.control",
            "env.noise_cov", "env.state_cost", "env.action_cost", "env.init_mean", "env.init_cov",
        ]
        return LinearGaussianEnv.from_config({k: cfg.raw(k) for k in keys})
    if kind == "correlated_chain":
        return CorrelatedChainEnv(
            state_dim=cfg.get("env.state_dim"),
            action_dim=cfg.get("env.action_dim"),
            rho=cfg.get("env.rho"),
            noise_scale=cfg.get("env.noise_scale"),
            horizon=cfg.get("env.horizon"),
            seed=cfg.get("env.seed"),
        )
    return LinearGaussianEnv.random_instance(
        state_dim=cfg.get("env.state_dim"),
        action_dim=cfg.get("env.action_dim"),
        seed=cfg.get("env.seed"),
        horizon=cfg.get("env.horizon"),
        noise_scale=cfg.get("env.noise_scale"),
    )


def build_policy_set(env, cfg: RunConfig) -> PolicySet:
    count = cfg.get("policies.count")
    spread = cfg.get("policies.spread")
    seed = mix_seeds(cfg.get("seed"), cfg.get("policies.seed"), "policies")
    if isinstance(env, LinearGaussianEnv):
        return make_policy_set(
            env, count, spread, seed,
            gamma=cfg.get("ope.gamma"), horizon=cfg.get("ope.horizon"),
        )
    # pendulum: a ladder of PD controllers widening in noise and weakening in gain
    rng = np.random.default_rng(seed)
    policies, names = [], []
    for i in range(count):
        u = spread * (i / (count - 1)) if count > 1 else 0.0
        gain = np.array([[-(6.0 * (1.0 - 0.8 * u)), -(1.5 * (1.0 - 0.8 * u))]])
        gain += 0.05 * u * rng.normal(size=gain.shape)
        noise_std = np.array([0.1 + 0.4 * u])
        policies.append(GaussianLinearPolicy(gain, np.zeros(1), noise_std))
        names.append(f"policy_{i:02d}")
    return PolicySet(names=names, policies=policies)


def _pick_policy_index(index: int, count: int) -> int:
    if index == -1:
        return count // 2
    if not 0 <= index < count:
        raise ConfigError(f"policy index {index} out of range for {count} policies")
    return index


def _truth_oracle(env, cfg: RunConfig):
    gamma = cfg.get("ope.gamma")
    horizon = cfg.get("ope.horizon")
    if cfg.get("ope.truth") == "analytic":
        if not isinstance(env, LinearGaussianEnv):
            raise ConfigError("analytic ground truth requires a linear-Gaussian environment")
        return lambda policy: analytic_value_linear_gaussian(env, policy, gamma, horizon)
    rollouts = cfg.get("ope.truth_rollouts")
    base = mix_seeds(cfg.get("seed"), cfg.get("ope.seed"), "truth")

    def oracle(policy):
        return true_policy_value_mc(env, policy, gamma, horizon, rollouts, base)[0]

    return oracle


def _load_config(args) -> RunConfig:
    file_text = None
    if args.config is not None:
        with open(args.config, "r", encoding="utf-8") as handle:
            file_text = handle.read()
    overrides: dict[str, str] = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return RunConfig.from_sources(file_text, overrides)


def _emit_snapshot(cfg: RunConfig, out_dir: str) -> None:
    _write_text(os.path.join(out_dir, "resolved.cfg"), cfg.resolved_text())


def _train_config_from(cfg: RunConfig, model_kind: str | None = None) -> TrainConfig:
    order = cfg.get("train.dimension_order")
    return TrainConfig(
        model_kind=model_kind or cfg.get("train.model_kind"),
        layers=cfg.get("train.layers"),
        width=cfg.get("train.width"),
        input_noise=cfg.get("train.input_noise"),
        weight_decay=cfg.get("train.weight_decay"),
        learning_rate=cfg.get("train.learning_rate"),
        epochs=cfg.get("train.epochs"),
        batch_size=cfg.get("train.batch_size"),
        optimizer=cfg.get("train.optimizer"),
        activation=cfg.get("train.activation"),
        seed=mix_seeds(cfg.get("seed"), cfg.get("train.seed"), "train"),
        dimension_order=tuple(order) if order else None,
    )


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out_dir(args.out, args.force)
    env = build_env(cfg)
    policy_set = build_policy_set(env, cfg)
    behavior = policy_set.policies[_pick_policy_index(cfg.get("data.behavior_index"), len(policy_set))]
    dataset, initial_states = collect_dataset(
        env, behavior, cfg.get("data.transitions"), mix_seeds(cfg.get("seed"), "gen-data")
    )
    data_path = os.path.join(out, "data.bin")
    s0_path = os.path.join(out, "data.s0.bin")
    ardio.save_dataset(dataset, data_path)
    ardio.save_initial_states(initial_states, s0_path)
    env_lines = [f"{k} = {v}" for k, v in env.to_config().items()]
    _write_text(os.path.join(out, "env.cfg"), "\n".join(env_lines) + "\n")
    _emit_snapshot(cfg, out)
    print(
        f"gen-data: wrote {len(dataset)} transitions ({os.path.getsize(data_path)} bytes), "
        f"{initial_states.shape[0]} initial states, config digest {cfg.digest()}"
    )
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out_dir(args.out, args.force)
    dataset = ardio.load_dataset(args.data)
    train, val = split_dataset(
        dataset,
        cfg.get("train.train_fraction"),
        mix_seeds(cfg.get("seed"), cfg.get("train.split_seed"), "split"),
    )
    train_cfg = _train_config_from(cfg)
    model, report = train_model(train_cfg, train, val)
    ckpt_path = os.path.join(out, "model.ardm")
    ardio.save_checkpoint(
        model,
        ckpt_path,
        metadata={
            "validation_nll": repr(report.best_val_nll),
            "config_digest": cfg.digest(),
            "train_config_digest": train_cfg.digest(),
            "seed": str(train_cfg.seed),
        },
    )
    report.checkpoint_path = ckpt_path
    rows = [{"epoch": 0, "train_nll": "", "val_nll": repr(report.val_nll[0])}]
    for epoch in range(1, len(report.val_nll)):
        rows.append({
            "epoch": epoch,
            "train_nll": repr(report.train_nll[epoch - 1]),
            "val_nll": repr(report.val_nll[epoch]),
        })
    _write_csv(
        os.path.join(out, "train_report.csv"),
        _csv_comments(cfg, "train"),
        ["epoch", "train_nll", "val_nll"],
        rows,
    )
    _write_jsonl(
        os.path.join(out, "train_report.jsonl"),
        {"command": "train", "config_digest": cfg.digest(),
         "train_config_digest": train_cfg.digest()},
        [{"type": "epoch", **row} for row in rows]
        + [{"type": "result", "best_val_nll": report.best_val_nll,
            "best_epoch": report.best_epoch, "checkpoint": os.path.basename(ckpt_path)}],
    )
    _emit_snapshot(cfg, out)
    print(
        f"train: best validation NLL {report.best_val_nll:.4f} at epoch {report.best_epoch}, "
        f"checkpoint {ckpt_path}"
    )
    return 0


def _sweep_grid(cfg: RunConfig) -> list[TrainConfig]:
    families = cfg.get("sweep.families")
    kinds = ["feedforward", "autoregressive"] if families == "both" else [families]
    seed = mix_seeds(cfg.get("seed"), cfg.get("sweep.seed"), "sweep")
    configs = []
    for kind in kinds:
        for layers in cfg.get("sweep.layers"):
            for width in cfg.get("sweep.widths"):
                for noise in cfg.get("sweep.input_noise"):
                    for decay in cfg.get("sweep.weight_decay"):
                        for lr in cfg.get("sweep.learning_rates"):
                            configs.append(TrainConfig(
                                model_kind=kind,
                                layers=layers,
                                width=width,
                                input_noise=noise,
                                weight_decay=decay,
                                learning_rate=lr,
                                epochs=cfg.get("sweep.epochs"),
                                batch_size=cfg.get("sweep.batch_size"),
                                optimizer=cfg.get("sweep.optimizer"),
                                seed=seed,
                            ))
    return configs


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out_dir(args.out, args.force)
    dataset = ardio.load_dataset(args.data)
    configs = _sweep_grid(cfg)

    def progress(run):
        status = f"val NLL {run.val_nll:.4f}" if run.val_nll is not None else f"failed: {run.error}"
        print(f"sweep: {run.config.model_kind} {run.digest} {status}", flush=True)

    report = hyperparameter_sweep(
        configs,
        dataset,
        split_seed=mix_seeds(cfg.get("seed"), cfg.get("sweep.split_seed"), "split"),
        train_fraction=cfg.get("sweep.train_fraction"),
        grid_strict=cfg.get("sweep.grid_strict"),
        progress=progress,
    )
    rows = []
    for run in report.runs:
        if run.model is not None:
            ardio.save_checkpoint(
                run.model,
                os.path.join(out, f"ckpt_{run.digest}.ardm"),
                metadata={
                    "validation_nll": repr(run.val_nll),
                    "config_digest": cfg.digest(),
                    "train_config_digest": run.digest,
                    "seed": str(run.config.seed),
                },
            )
        c = run.config
        rows.append({
            "family": c.model_kind, "digest": run.digest, "layers": c.layers, "width": c.width,
            "input_noise": repr(c.input_noise), "weight_decay": repr(c.weight_decay),
            "learning_rate": repr(c.learning_rate), "epochs": c.epochs,
            "val_nll": repr(run.val_nll) if run.val_nll is not None else "",
            "error": run.error or "",
        })
    summary_lines = []
    summary_rows = []
    for family in sorted(report.top1):
        summary_lines.append(
            f"summary family={family} top1={report.top1[family]!r} "
            f"top5_mean={report.top5_mean[family]!r}"
        )
        summary_rows.append({
            "family": family,
            "top1_val_nll": repr(report.top1[family]),
            "top5_mean_val_nll": repr(report.top5_mean[family]),
        })
    fieldnames = ["family", "digest", "layers", "width", "input_noise", "weight_decay",
                  "learning_rate", "epochs", "val_nll", "error"]
    buf = io_module.StringIO()
    for comment in _csv_comments(cfg, "sweep"):
        buf.write(f"# {comment}\n")
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    for line in summary_lines:
        buf.write(f"# {line}\n")
    _write_text(os.path.join(out, "sweep.csv"), buf.getvalue())
    _write_csv(
        os.path.join(out, "summary.csv"),
        _csv_comments(cfg, "sweep"),
        ["family", "top1_val_nll", "top5_mean_val_nll"],
        summary_rows,
    )
    _write_jsonl(
        os.path.join(out, "sweep.jsonl"),
        {"command": "sweep", "config_digest": cfg.digest(),
         "train_size": report.train_size, "val_size": report.val_size},
        [{"type": "run", **row} for row in rows]
        + [{"type": "summary", **row} for row in summary_rows],
    )
    _emit_snapshot(cfg, out)
    for line in summary_lines:
        print(f"sweep: {line}")
    return 0


def cmd_ope(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out_dir(args.out, args.force)
    checkpoints = args.checkpoint or []
    if not checkpoints:
        raise ConfigError("ope requires at least one --checkpoint")
    models = [ardio.load_checkpoint(path)[0] for path in checkpoints]
    env = build_env(cfg)
    policy_set = build_policy_set(env, cfg)
    initial_states = ardio.load_initial_states(args.s0)
    gamma, horizon = cfg.get("ope.gamma"), cfg.get("ope.horizon")
    rollouts = cfg.get("ope.rollouts")
    oracle = _truth_oracle(env, cfg)
    base = mix_seeds(cfg.get("seed"), cfg.get("ope.seed"), "ope")
    rows = []
    estimates, truths = [], []
    for j, policy in enumerate(policy_set.policies):
        pair_seed = mix_seeds(base, j)
        if len(models) == 1:
            report = mb_ope(models[0], policy, initial_states, rollouts, gamma, horizon, pair_seed)
        else:
            report = ensemble_mb_ope(models, policy, initial_states, rollouts, gamma, horizon, pair_seed)
        truth = float(oracle(policy))
        estimates.append(report.value)
        truths.append(truth)
        rows.append({
            "policy_id": policy_set.names[j],
            "estimate": repr(report.value),
            "stderr": repr(report.stderr),
            "n_rollouts": report.n_rollouts,
            "n_diverged": report.n_diverged,
            "truth": repr(truth),
        })
    comments = _csv_comments(cfg, "ope") + [
        f"gamma = {gamma!r}", f"horizon = {horizon}", f"ensemble_size = {len(models)}",
    ]
    _write_csv(
        os.path.join(out, "ope.csv"),
        comments,
        ["policy_id", "estimate", "stderr", "n_rollouts", "n_diverged", "truth"],
        rows,
    )
    records = [{"type": "estimate", **row} for row in rows]
    metrics_rows = []
    if len(policy_set) >= 2:
        metrics = compute_metrics(
            np.array(estimates), np.array(truths),
            k=cfg.get("ope.regret_k"),
            num_resamples=cfg.get("ope.bootstrap"),
            seed=mix_seeds(cfg.get("seed"), cfg.get("ope.bootstrap_seed"), "bootstrap"),
        )
        for name, mv in [
            ("spearman_rho", metrics.spearman), ("pearson_r", metrics.pearson),
            ("absolute_error", metrics.abs_error), ("regret_raw", metrics.regret_raw),
            ("regret_normalized", metrics.regret_normalized),
        ]:
            metrics_rows.append({
                "metric": name, "value": repr(mv.value),
                "boot_mean": repr(mv.boot_mean), "boot_std": repr(mv.boot_std),
                "k": metrics.k,
            })
        _write_csv(
            os.path.join(out, "metrics.csv"),
            comments,
            ["metric", "value", "boot_mean", "boot_std", "k"],
            metrics_rows,
        )
        records += [{"type": "metric", **row} for row in metrics_rows]
    _write_jsonl(
        os.path.join(out, "ope.jsonl"),
        {"command": "ope", "config_digest": cfg.digest(), "ensemble_size": len(models)},
        records,
    )
    _emit_snapshot(cfg, out)
    print(f"ope: evaluated {len(policy_set)} policies with {len(models)} model(s)")
    return 0


def cmd_plan_eval(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out_dir(args.out, args.force)
    model, _ = ardio.load_checkpoint(args.checkpoint)
    env = build_env(cfg)
    policy_set = build_policy_set(env, cfg)
    policy = policy_set.policies[_pick_policy_index(cfg.get("plan.policy_index"), len(policy_set))]
    mppi = MppiConfig(
        iterations=cfg.get("plan.iterations"),
        candidates=cfg.get("plan.candidates"),
        horizon=cfg.get("plan.horizon"),
        beta=cfg.get("plan.beta"),
        sigma_sq=cfg.get("plan.sigma_sq"),
        gamma=cfg.get("plan.gamma"),
    )
    if cfg.get("plan.critic") == "linear_quadratic":
        if not isinstance(env, LinearGaussianEnv):
            raise ConfigError("linear_quadratic critic requires a linear-Gaussian environment")
        critic = LinearQuadraticCritic(env, policy, mppi.gamma)
    else:
        critic = ZeroCritic()
    report = evaluate_planner(
        env, policy, model, critic, mppi,
        cfg.get("plan.episodes"),
        mix_seeds(cfg.get("seed"), cfg.get("plan.seed"), "plan"),
    )
    rows = []
    for arm, values in (("raw", report.raw_returns), ("planned", report.planned_returns)):
        for episode, value in enumerate(values):
            rows.append({"arm": arm, "episode": episode, "return": repr(float(value))})
    comments = _csv_comments(cfg, "plan-eval") + [
        f"iterations = {mppi.iterations}", f"candidates = {mppi.candidates}",
        f"plan_horizon = {mppi.horizon}", f"beta = {mppi.beta!r}",
        f"sigma_sq = {mppi.sigma_sq!r}", f"gamma = {mppi.gamma!r}",
        f"paired diff_mean = {report.diff_mean!r} diff_stderr = {report.diff_stderr!r} "
        f"z = {report.z_score!r}",
    ]
    _write_csv(os.path.join(out, "planner.csv"), comments, ["arm", "episode", "return"], rows)
    _write_jsonl(
        os.path.join(out, "planner.jsonl"),
        {"command": "plan-eval", "config_digest": cfg.digest()},
        [{"type": "summary",
          "raw_mean": report.raw_mean, "raw_stderr": report.raw_stderr,
          "planned_mean": report.planned_mean, "planned_stderr": report.planned_stderr,
          "diff_mean": report.diff_mean, "diff_stderr": report.diff_stderr,
          "z_score": report.z_score, "n_episodes": report.n_episodes}],
    )
    _emit_snapshot(cfg, out)
    print(
        f"plan-eval: raw {report.raw_mean:.3f} vs planned {report.planned_mean:.3f}, "
        f"paired z = {report.z_score:.2f} over {report.n_episodes} episodes"
    )
    return 0


def cmd_augment(args) -> int:
    cfg = _load_config(args)
    ratio = cfg.get("augment.ratio")
    if ratio <= 0:
        raise ConfigError(f"augment.ratio must be > 0, got {ratio}")
    out = _prepare_out_dir(args.out, args.force)
    dataset = ardio.load_dataset(args.data)
    model, _ = ardio.load_checkpoint(args.checkpoint)
    env = build_env(cfg)
    policy_set = build_policy_set(env, cfg)
    policy = policy_set.policies[
        _pick_policy_index(cfg.get("augment.policy_index"), len(policy_set))
    ]
    synthetic = augment_dataset(
        dataset, policy, model, ratio, mix_seeds(cfg.get("seed"), cfg.get("augment.seed"), "augment")
    )
    merged = TransitionDataset.concat(dataset, synthetic)
    data_path = os.path.join(out, "augmented.bin")
    flags_path = os.path.join(out, "augmented.flags.bin")
    ardio.save_dataset(merged, data_path)
    ardio.save_synthetic_flags(merged.synthetic, flags_path)
    _write_jsonl(
        os.path.join(out, "augment.jsonl"),
        {"command": "augment", "config_digest": cfg.digest()},
        [{"type": "summary", "real": int(len(dataset)), "synthetic": int(len(synthetic)),
          "merged": int(len(merged)), "ratio": ratio}],
    )
    _emit_snapshot(cfg, out)
    print(
        f"augment: {len(dataset)} real + {len(synthetic)} synthetic -> {len(merged)} rows "
        f"({os.path.getsize(data_path)} bytes)"
    )
    return 0


def cmd_study(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out_dir(args.out, args.force)
    dataset = ardio.load_dataset(args.data)
    initial_states = ardio.load_initial_states(args.s0)
    env = build_env(cfg)
    policy_set = build_policy_set(env, cfg)
    oracle = _truth_oracle(env, cfg)
    configs = _sweep_grid(cfg)
    sweep = hyperparameter_sweep(
        configs,
        dataset,
        split_seed=mix_seeds(cfg.get("seed"), cfg.get("sweep.split_seed"), "split"),
        train_fraction=cfg.get("sweep.train_fraction"),
        grid_strict=cfg.get("sweep.grid_strict"),
    )
    triples = [
        (run.digest, run.val_nll, run.model) for run in sweep.runs if run.model is not None
    ]
    if not triples:
        raise ConfigError("study: every sweep run failed; nothing to evaluate")
    family_of = {run.digest: run.config.model_kind for run in sweep.runs}
    report = nll_vs_ope_study(
        triples, policy_set, oracle, initial_states,
        cfg.get("study.rollouts"), cfg.get("ope.gamma"), cfg.get("ope.horizon"),
        mix_seeds(cfg.get("seed"), cfg.get("study.seed"), "study"),
    )
    rows = [{
        "model_id": e.model_id,
        "family": family_of[e.model_id],
        "validation_nll": repr(e.validation_nll),
        "policy_id": e.policy_id,
        "estimate": repr(e.estimate),
        "stderr": repr(e.stderr),
        "truth": repr(e.truth),
    } for e in report.entries]
    _write_csv(
        os.path.join(out, "study.csv"),
        _csv_comments(cfg, "study"),
        ["model_id", "family", "validation_nll", "policy_id", "estimate", "stderr", "truth"],
        rows,
    )
    summary_rows = [{
        "model_id": s.model_id,
        "family": family_of[s.model_id],
        "validation_nll": repr(s.validation_nll),
        "pearson_r": repr(s.pearson) if s.pearson is not None else "",
    } for s in report.model_summaries]
    trend_text = repr(report.trend_rank_corr) if report.trend_rank_corr is not None else ""
    _write_csv(
        os.path.join(out, "study_summary.csv"),
        _csv_comments(cfg, "study") + [f"trend_rank_corr = {trend_text}"],
        ["model_id", "family", "validation_nll", "pearson_r"],
        summary_rows,
    )
    _write_jsonl(
        os.path.join(out, "study.jsonl"),
        {"command": "study", "config_digest": cfg.digest(),
         "trend_rank_corr": report.trend_rank_corr},
        [{"type": "pair", **row} for row in rows]
        + [{"type": "model", **row} for row in summary_rows],
    )
    _emit_snapshot(cfg, out)
    print(
        f"study: {len(triples)} models x {len(policy_set)} policies, "
        f"NLL-vs-correlation trend rank corr = {trend_text or 'undefined'}"
    )
    return 0


@contextlib.contextmanager
def _thread_limit(threads: int):
    if threads and threads > 0:
        try:
            from threadpoolctl import threadpool_limits
        except ImportError:
            yield
            return
        with threadpool_limits(limits=threads):
            yield
    else:
        yield


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ardyn",
        description="Dynamics-model training, off-policy evaluation, and planning toolkit",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path to a key = value config file")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, default=0,
                        help="cap BLAS threads (1 for bit-reproducible runs)")
    common.add_argument("--force", action="store_true",
                        help="write into a non-empty output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a single config key")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="collect a dataset from the environment")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train one dynamics model")
    p.add_argument("--data", required=True, help="dataset file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", parents=[common], help="train a hyperparameter grid")
    p.add_argument("--data", required=True, help="dataset file")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ope", parents=[common], help="estimate policy values through a model")
    p.add_argument("--checkpoint", action="append", help="model checkpoint (repeat for an ensemble)")
    p.add_argument("--s0", required=True, help="initial-state sidecar file")
    p.set_defaults(func=cmd_ope)

    p = sub.add_parser("plan-eval", parents=[common], help="compare planner vs raw policy on the true env")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.set_defaults(func=cmd_plan_eval)

    p = sub.add_parser("augment", parents=[common], help="extend a dataset with model-generated transitions")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("study", parents=[common], help="sweep models and relate NLL to OPE quality")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--s0", required=True, help="initial-state sidecar file")
    p.set_defaults(func=cmd_study)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except ArdynError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
