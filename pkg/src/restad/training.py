"""Reconstruction training with ADAM.

The objective is the mean over the batch of the squared Frobenius norm of
the reconstruction residual per window.  The two-phase K-means pipeline
first trains a base model without the RBF layer, initializes centers and
gamma from its latents, then trains the full model with every parameter
(centers and gamma included) trainable.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, TrainingError
from .initialization import kmeans_init
from .model import ModelConfig, RestadModel
from .tensor import Tape, Tensor

TRAINLOG_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True
    grad_clip: float | None = None

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError(f"batch_size must be a positive integer, got {self.batch_size}")
        if not isinstance(self.epochs, int) or self.epochs < 0:
            raise ConfigError(f"epochs must be a non-negative integer, got {self.epochs}")
        for name in ("adam_beta1", "adam_beta2"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be positive when set, got {self.grad_clip}")


@dataclass
class TrainLog:
    """One record per epoch.  Wall-clock time lives in its own field so
    every other field is deterministic for a given (seed, data, config)."""

    records: list = field(default_factory=list)

    @property
    def final_checksum(self) -> str | None:
        return self.records[-1]["param_checksum"] if self.records else None

    @property
    def losses(self) -> list:
        return [r["mean_loss"] for r in self.records]

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="ascii") as f:
            for record in self.records:
                f.write(json.dumps(record, sort_keys=True) + "\n")


def param_checksum(model: RestadModel) -> str:
    """sha256 over parameter names and raw little-endian float64 bytes."""
    digest = hashlib.sha256()
    for name in sorted(model.params):
        digest.update(name.encode("ascii"))
        digest.update(np.ascontiguousarray(model.params[name].data, dtype="<f8").tobytes())
    return digest.hexdigest()


def mse_loss(x: Tensor, xhat: Tensor) -> Tensor:
    """Mean over the batch of the squared Frobenius reconstruction norm."""
    if x.data.shape != xhat.data.shape:
        raise DimensionError(
            f"mse_loss: shapes {tuple(x.data.shape)} and {tuple(xhat.data.shape)} differ"
        )
    b = x.data.shape[0]
    return T.scale_by_scalar(T.tensor_sum(T.square(T.sub(xhat, x))), 1.0 / b)


class AdamState:
    def __init__(self, params: dict):
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.t = 0


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig) -> None:
    """Standard ADAM update with bias correction; t increments once per call."""
    state.t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)


def _clip_grads(params: dict, max_norm: float) -> None:
    total = 0.0
    for p in params.values():
        total += float((p.grad * p.grad).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            p.grad *= scale


def fit(model: RestadModel, windows: np.ndarray, config: TrainConfig) -> TrainLog:
    """Epochs of forward / loss / backward / ADAM over shuffled batches.

    Deterministic per config.seed: the shuffle order is derived from the
    seed alone, and the final short batch is used (the loss is already a
    per-window mean, so batch size does not bias it).
    """
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3:
        raise DimensionError(f"windows must be [n, window_len, d], got {windows.shape}")
    if not np.isfinite(windows).all():
        raise TrainingError("training windows contain non-finite values")

    n = windows.shape[0]
    ss = np.random.SeedSequence(config.seed)
    ss_shuffle, ss_dropout = ss.spawn(2)
    shuffle_rng = np.random.default_rng(ss_shuffle)
    dropout_rng = (np.random.default_rng(ss_dropout)
                   if model.config.dropout > 0 else None)

    state = AdamState(model.params)
    log = TrainLog()
    for epoch in range(1, config.epochs + 1):
        started = time.monotonic()
        order = shuffle_rng.permutation(n) if config.shuffle else np.arange(n)
        loss_sum = 0.0
        for batch_index, start in enumerate(range(0, n, config.batch_size)):
            batch = windows[order[start:start + config.batch_size]]
            model.zero_grads()
            with Tape() as tape:
                xhat, _ = model.forward(batch, dropout_rng=dropout_rng)
                loss = mse_loss(Tensor(batch), xhat)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(
                    f"non-finite loss ({value}) at epoch {epoch}, batch {batch_index}"
                )
            tape.backward(loss)
            if config.grad_clip is not None:
                _clip_grads(model.params, config.grad_clip)
            adam_step(model.params, {k: p.grad for k, p in model.params.items()},
                      state, config)
            loss_sum += value * batch.shape[0]
        log.records.append({
            "schema_version": TRAINLOG_SCHEMA_VERSION,
            "epoch": epoch,
            "mean_loss": loss_sum / n,
            "param_checksum": param_checksum(model),
            "wall_clock_s": time.monotonic() - started,
        })
    return log


def train_restad_kmeans(train_windows: np.ndarray, model_config: ModelConfig,
                        train_config: TrainConfig,
                        gamma_init_mode: str = "direct"):
    """Two-phase pipeline: train a base model without the RBF layer, derive
    centers and gamma from its latents, then train the full model.

    The full model starts from every base parameter whose shape survives the
    width change at the RBF position (all of them when n_centers equals
    d_model), so the centers stay coherent with the latent space they were
    clustered in.  Returns (model, {"base": TrainLog, "full": TrainLog}).
    """
    if not model_config.rbf_enabled:
        raise ConfigError("train_restad_kmeans requires rbf_enabled=true")
    base_config = replace(model_config, rbf_enabled=False)
    base = RestadModel(base_config)
    base_log = fit(base, train_windows, train_config)

    rbf = kmeans_init(base, np.asarray(train_windows, dtype=np.float64),
                      model_config, gamma_init_mode=gamma_init_mode,
                      seed=train_config.seed)
    full = RestadModel(model_config, rbf_layer=rbf)
    for name, p in base.params.items():
        q = full.params.get(name)
        if q is not None and q.data.shape == p.data.shape:
            q.data[...] = p.data
    full_log = fit(full, train_windows, train_config)
    return full, {"base": base_log, "full": full_log}
