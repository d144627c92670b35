"""Maximum-likelihood training and the hyperparameter sweep protocol.

The protocol grid is 48 combinations per model family: layers {3, 4} x
width {512, 1024} x input noise {0, 1e-6, 1e-7} x weight decay {0, 1e-6}
x learning rate {1e-3, 3e-4}, trained with Adam (or SGD + momentum 0.9)
under a linear learning-rate decay to zero, selecting on held-out NLL.
Desk-scale runs may use off-grid widths/epochs; a sweep only enforces
grid membership when asked to.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .data import TransitionDataset
from .dynamics import (
    LOG_VARIANCE_MAX,
    LOG_VARIANCE_MIN,
    AutoregressiveDynamics,
    FeedforwardDynamics,
    _ar_masked_inputs,
    _gaussian_nll_terms,
    _normalized_targets,
    clamp_log_variance,
    fit_normalization,
    model_nll_per_dim,
)
from .errors import ConfigError, DivergenceError, EmptyBatchError
from .nn import LrSchedule, OptimizerState, lr_at, mlp_backward, mlp_forward, optimizer_step

GRID_LAYERS = (3, 4)
GRID_WIDTHS = (512, 1024)
GRID_INPUT_NOISE = (0.0, 1e-6, 1e-7)
GRID_WEIGHT_DECAY = (0.0, 1e-6)
GRID_LEARNING_RATES = (1e-3, 3e-4)

MODEL_KINDS = ("feedforward", "autoregressive")
OPTIMIZERS = ("adam", "sgd_momentum")


@dataclass(frozen=True)
class TrainConfig:
    """One training run's hyperparameters."""

    model_kind: str
    layers: int = 3
    width: int = 512
    input_noise: float = 0.0
    weight_decay: float = 0.0
    learning_rate: float = 1e-3
    epochs: int = 500
    batch_size: int = 256
    optimizer: str = "adam"
    activation: str = "relu"
    seed: int = 0
    dimension_order: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}")
        if self.layers < 1 or self.width < 1:
            raise ConfigError("layers and width must be >= 1")
        if self.input_noise < 0 or self.weight_decay < 0:
            raise ConfigError("input_noise and weight_decay must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.dimension_order is not None:
            object.__setattr__(self, "dimension_order", tuple(int(i) for i in self.dimension_order))

    @property
    def hidden_layers(self) -> tuple[int, ...]:
        return (self.width,) * self.layers

    def is_on_protocol_grid(self) -> bool:
        return (
            self.layers in GRID_LAYERS
            and self.width in GRID_WIDTHS
            and self.input_noise in GRID_INPUT_NOISE
            and self.weight_decay in GRID_WEIGHT_DECAY
            and self.learning_rate in GRID_LEARNING_RATES
        )

    def digest(self) -> str:
        payload = asdict(self)
        if payload["dimension_order"] is not None:
            payload["dimension_order"] = list(payload["dimension_order"])
        text = json.dumps(payload, sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:12]


def full_grid(
    model_kind: str,
    epochs: int = 500,
    batch_size: int = 256,
    optimizer: str = "adam",
    seed: int = 0,
) -> list[TrainConfig]:
    """All 48 protocol combinations for one family, in a fixed order."""
    configs = []
    for layers in GRID_LAYERS:
        for width in GRID_WIDTHS:
            for noise in GRID_INPUT_NOISE:
                for decay in GRID_WEIGHT_DECAY:
                    for lr in GRID_LEARNING_RATES:
                        configs.append(
                            TrainConfig(
                                model_kind=model_kind,
                                layers=layers,
                                width=width,
                                input_noise=noise,
                                weight_decay=decay,
                                learning_rate=lr,
                                epochs=epochs,
                                batch_size=batch_size,
                                optimizer=optimizer,
                                seed=seed,
                            )
                        )
    return configs


def split_dataset(
    dataset: TransitionDataset, train_fraction: float = 0.8, seed=0
) -> tuple[TransitionDataset, TransitionDataset]:
    """Shuffled split; the training side gets floor(fraction * N) rows."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    total = len(dataset)
    if total < 2:
        raise EmptyBatchError("need at least 2 transitions to split")
    n_train = int(math.floor(train_fraction * total))
    if n_train == 0 or n_train == total:
        raise ConfigError(f"split of {total} rows at fraction {train_fraction} leaves a side empty")
    perm = np.random.default_rng(seed).permutation(total)
    return dataset.subset(perm[:n_train]), dataset.subset(perm[n_train:])


@dataclass
class TrainReport:
    """Loss curves and selection info for one run.

    ``val_nll`` has epochs + 1 entries: entry 0 scores the freshly
    initialized model, entry e the model after epoch e. ``train_nll`` has
    one entry per epoch (mean of that epoch's minibatch losses, each
    computed before its update).
    """

    train_nll: list[float] = field(default_factory=list)
    val_nll: list[float] = field(default_factory=list)
    best_val_nll: float = math.inf
    best_epoch: int = 0
    wall_seconds: float = 0.0
    checkpoint_path: str | None = None


def evaluate_nll(model, dataset: TransitionDataset) -> tuple[np.ndarray, float]:
    """Per-dimension NLL vector (reward last) and its total, raw units."""
    per_dim = model_nll_per_dim(model, dataset)
    return per_dim, float(per_dim.sum())


def _build_model(config: TrainConfig, train: TransitionDataset, init_seed):
    stats = fit_normalization(train)
    if config.model_kind == "feedforward":
        return FeedforwardDynamics.create(
            train.state_dim,
            train.action_dim,
            config.hidden_layers,
            init_seed,
            activation=config.activation,
            stats=stats,
        )
    return AutoregressiveDynamics.create(
        train.state_dim,
        train.action_dim,
        config.hidden_layers,
        init_seed,
        activation=config.activation,
        stats=stats,
        dimension_order=config.dimension_order,
    )


def _ff_batch_loss_and_grads(model, x_batch, y_batch):
    out, cache = mlp_forward(model.spec, model.params, x_batch)
    k = model.state_dim + 1
    means = out[:, :k]
    raw_log_vars = out[:, k:]
    log_vars = clamp_log_variance(raw_log_vars)
    diff = means - y_batch
    inv_var = np.exp(-log_vars)
    terms = 0.5 * math.log(2.0 * math.pi) + 0.5 * log_vars + 0.5 * diff * diff * inv_var
    loss = float(terms.sum(axis=1).mean())
    batch = x_batch.shape[0]
    grad_out = np.empty_like(out)
    grad_out[:, :k] = diff * inv_var / batch
    inside = (raw_log_vars > LOG_VARIANCE_MIN) & (raw_log_vars < LOG_VARIANCE_MAX)
    grad_out[:, k:] = (0.5 - 0.5 * diff * diff * inv_var) * inside / batch
    return loss, mlp_backward(model.spec, model.params, cache, grad_out)


def _ar_batch_loss_and_grads(model, rows, step_targets, batch):
    out, cache = mlp_forward(model.spec, model.params, rows)
    means = out[:, 0]
    raw_log_vars = out[:, 1]
    log_vars = clamp_log_variance(raw_log_vars)
    diff = means - step_targets
    inv_var = np.exp(-log_vars)
    terms = 0.5 * math.log(2.0 * math.pi) + 0.5 * log_vars + 0.5 * diff * diff * inv_var
    loss = float(terms.sum() / batch)
    grad_out = np.empty_like(out)
    grad_out[:, 0] = diff * inv_var / batch
    inside = (raw_log_vars > LOG_VARIANCE_MIN) & (raw_log_vars < LOG_VARIANCE_MAX)
    grad_out[:, 1] = (0.5 - 0.5 * diff * diff * inv_var) * inside / batch
    return loss, mlp_backward(model.spec, model.params, cache, grad_out)


def train_model(
    config: TrainConfig, train: TransitionDataset, val: TransitionDataset
) -> tuple[object, TrainReport]:
    """Train one model; returns it rewound to its best validation epoch.

    Input noise (if any) perturbs only the normalized (state, action)
    network inputs, never the regression targets or the teacher-forced
    previously-generated dims.
    """
    train.require_nonempty()
    val.require_nonempty()
    if train.state_dim != val.state_dim or train.action_dim != val.action_dim:
        raise ConfigError("train and validation splits disagree on dimensions")
    started = time.perf_counter()
    seed_seq = np.random.SeedSequence(config.seed)
    init_seq, shuffle_seq, noise_seq = seed_seq.spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    noise_rng = np.random.default_rng(noise_seq)

    model = _build_model(config, train, init_seq)
    stats = model.stats
    n, m = model.state_dim, model.action_dim
    jacobian = stats.target_log_std_sum()

    s_norm = stats.normalize_states(train.states)
    a_norm = stats.normalize_actions(train.actions)
    targets = _normalized_targets(model, train)
    if config.model_kind == "feedforward":
        inputs = np.concatenate([s_norm, a_norm], axis=1)
    else:
        target_cols = np.array([model.target_index_at_step(k) for k in range(n + 1)])

    total = len(train)
    steps_per_epoch = math.ceil(total / config.batch_size)
    report = TrainReport()
    _, val0 = evaluate_nll(model, val)
    report.val_nll.append(val0)
    best_val = val0
    best_epoch = 0
    best_params = model.params.copy()

    if config.epochs > 0:
        schedule = LrSchedule(config.learning_rate, config.epochs * steps_per_epoch)
        if config.optimizer == "adam":
            opt_state = OptimizerState.adam(model.spec.num_params)
        else:
            opt_state = OptimizerState.sgd_momentum(model.spec.num_params)
        global_step = 0
        for epoch in range(1, config.epochs + 1):
            order = shuffle_rng.permutation(total)
            epoch_losses = []
            for step in range(steps_per_epoch):
                idx = order[step * config.batch_size : (step + 1) * config.batch_size]
                batch = idx.shape[0]
                if config.model_kind == "feedforward":
                    x = inputs[idx]
                    if config.input_noise > 0.0:
                        x = x + config.input_noise * noise_rng.standard_normal(x.shape)
                    loss, grads = _ff_batch_loss_and_grads(model, x, targets[idx])
                else:
                    rows = _ar_masked_inputs(model, s_norm[idx], a_norm[idx], targets[idx, :n])
                    rows = rows.reshape(batch * (n + 1), -1)
                    if config.input_noise > 0.0:
                        rows[:, : n + m] += config.input_noise * noise_rng.standard_normal(
                            (rows.shape[0], n + m)
                        )
                    step_targets = targets[idx][:, target_cols].reshape(-1)
                    loss, grads = _ar_batch_loss_and_grads(model, rows, step_targets, batch)
                if not math.isfinite(loss):
                    raise DivergenceError(
                        f"training loss became non-finite at epoch {epoch} step {step}"
                    )
                epoch_losses.append(loss + jacobian)
                lr = lr_at(schedule, global_step)
                try:
                    optimizer_step(model.params, grads, opt_state, lr, config.weight_decay)
                except DivergenceError as err:
                    raise DivergenceError(f"epoch {epoch} step {step}: {err}") from None
                global_step += 1
            report.train_nll.append(float(np.mean(epoch_losses)))
            _, val_now = evaluate_nll(model, val)
            report.val_nll.append(val_now)
            if val_now < best_val:
                best_val = val_now
                best_epoch = epoch
                best_params = model.params.copy()

    model.params.flat[:] = best_params.flat
    report.best_val_nll = best_val
    report.best_epoch = best_epoch
    report.wall_seconds = time.perf_counter() - started
    return model, report


@dataclass
class SweepRun:
    """Outcome for one grid point; failed runs carry the error instead."""

    config: TrainConfig
    digest: str
    val_nll: float | None
    model: object | None
    report: TrainReport | None
    error: str | None = None


@dataclass
class SweepReport:
    runs: list[SweepRun]
    ranking: list[int]
    top1: dict[str, float]
    top5_mean: dict[str, float]
    train_size: int
    val_size: int

    def best_run(self, model_kind: str | None = None) -> SweepRun:
        for index in self.ranking:
            run = self.runs[index]
            if model_kind is None or run.config.model_kind == model_kind:
                return run
        raise ConfigError(f"no successful run for model_kind {model_kind!r}")


def hyperparameter_sweep(
    configs: list[TrainConfig],
    dataset: TransitionDataset,
    split_seed=0,
    train_fraction: float = 0.8,
    grid_strict: bool = False,
    progress=None,
) -> SweepReport:
    """Train every config on one shared split and rank by held-out NLL.

    Runs that diverge are recorded with their error and excluded from the
    ranking and summaries. Top-5 means fall back to however many runs a
    family has when fewer than five succeeded.
    """
    if not configs:
        raise ConfigError("sweep needs at least one configuration")
    if grid_strict:
        for cfg in configs:
            if not cfg.is_on_protocol_grid():
                raise ConfigError(f"config {cfg.digest()} is off the protocol grid")
    train, val = split_dataset(dataset, train_fraction, split_seed)
    runs: list[SweepRun] = []
    for cfg in configs:
        try:
            model, report = train_model(cfg, train, val)
            runs.append(SweepRun(cfg, cfg.digest(), report.best_val_nll, model, report))
        except DivergenceError as err:
            runs.append(SweepRun(cfg, cfg.digest(), None, None, None, error=str(err)))
        if progress is not None:
            progress(runs[-1])
    scored = [i for i, run in enumerate(runs) if run.val_nll is not None]
    ranking = sorted(scored, key=lambda i: (runs[i].val_nll, i))
    top1: dict[str, float] = {}
    top5_mean: dict[str, float] = {}
    for kind in MODEL_KINDS:
        vals = sorted(
            run.val_nll for run in runs if run.val_nll is not None and run.config.model_kind == kind
        )
        if vals:
            top1[kind] = vals[0]
            top5_mean[kind] = float(np.mean(vals[:5]))
    return SweepReport(
        runs=runs,
        ranking=ranking,
        top1=top1,
        top5_mean=top5_mean,
        train_size=len(train),
        val_size=len(val),
    )
