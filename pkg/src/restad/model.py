"""The RESTAD network.

Input windows are embedded (linear token projection plus a fixed sinusoidal
positional table), run through a stack of post-norm Transformer encoder
layers, passed through an RBF similarity layer at a configurable position,
and reconstructed by a linear output head.

The RBF layer turns each latent vector into similarities against M learnable
centers: z_m = exp(-0.5 * e^gamma * ||h - c_m||^2).  Because similarities
feed the subsequent layers directly, those layers operate at width M.
"""

from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

CHECKPOINT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    window_len: int = 100
    d_model: int = 32
    ffn_dim: int = 128
    n_heads: int = 8
    n_layers: int = 3
    rbf_enabled: bool = True
    rbf_position: int = 2
    n_centers: int = 32
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("input_dim", "window_len", "d_model", "ffn_dim",
                     "n_heads", "n_layers", "n_centers"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if not 1 <= self.rbf_position <= self.n_layers:
            raise ConfigError(
                f"rbf_position ({self.rbf_position}) must lie in [1, n_layers={self.n_layers}]"
            )
        if (self.rbf_enabled and self.rbf_position < self.n_layers
                and self.n_centers % self.n_heads):
            raise ConfigError(
                f"n_centers ({self.n_centers}) must be divisible by n_heads"
                f" ({self.n_heads}) when the RBF output feeds another attention layer"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")


@dataclass
class RbfLayer:
    """Learnable centers (M x d_h) and the log-domain width scalar gamma.

    The effective kernel scale is e^gamma, so it is positive for any real
    gamma; no constraint on gamma is ever needed.
    """

    centers: Tensor
    gamma: Tensor

    def __post_init__(self):
        if self.centers.data.ndim != 2:
            raise ConfigError(
                f"centers must be an M x d_h matrix, got shape {tuple(self.centers.shape)}"
            )
        if self.gamma.data.ndim != 0:
            raise ConfigError(
                f"gamma must be a scalar, got shape {tuple(self.gamma.shape)}"
            )

    @property
    def n_centers(self):
        return self.centers.data.shape[0]

    @property
    def d_h(self):
        return self.centers.data.shape[1]


def rbf_forward(h: Tensor, layer: RbfLayer) -> Tensor:
    """Similarity of every latent point to every center, in (0, 1].

    z equals 1 exactly when a point coincides with a center: the pairwise
    distance op returns an exact zero there, and e^gamma * 0 is an exact
    zero for any finite gamma.
    """
    if h.data.shape[-1] != layer.d_h:
        raise DimensionError(
            f"rbf_forward: latent width {h.data.shape[-1]} does not match"
            f" centers with d_h {layer.d_h}"
        )
    d2 = T.pairwise_sq_dist(h, layer.centers)
    scaled = T.mul(d2, T.exp(layer.gamma))
    return T.exp(T.scale_by_scalar(scaled, -0.5))


def sinusoidal_table(length: int, d_model: int) -> np.ndarray:
    """Fixed positional encodings: even columns sin, odd columns cos."""
    table = np.zeros((length, d_model))
    pos = np.arange(length)[:, None].astype(np.float64)
    for i in range((d_model + 1) // 2):
        angle = pos[:, 0] / (10000.0 ** (2.0 * i / d_model))
        table[:, 2 * i] = np.sin(angle)
        if 2 * i + 1 < d_model:
            table[:, 2 * i + 1] = np.cos(angle)
    return table


def _glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class RestadModel:
    """Parameterized encoder with an optional RBF layer.

    Construction is deterministic per config.seed.  A model is read-only
    during inference; training mutates parameters through the optimizer.
    """

    def __init__(self, config: ModelConfig, rbf_layer: RbfLayer | None = None):
        self.config = config
        if rbf_layer is not None and not config.rbf_enabled:
            raise ConfigError("rbf_layer supplied but rbf_enabled is false")

        ss = np.random.SeedSequence(config.seed)
        ss_weights, ss_rbf = ss.spawn(2)
        rng = np.random.default_rng(ss_weights)

        self.pe = sinusoidal_table(config.window_len, config.d_model)
        self.params: dict[str, Tensor] = {}

        d, dm, ffn = config.input_dim, config.d_model, config.ffn_dim
        self._add("embed.W", _glorot(rng, d, dm, (d, dm)))
        self._add("embed.b", np.zeros(dm))

        for i in range(1, config.n_layers + 1):
            w = self.layer_width(i)
            for piece in ("Wq", "Wk", "Wv", "Wo"):
                self._add(f"layer{i}.attn.{piece}", _glorot(rng, w, w, (w, w)))
                self._add(f"layer{i}.attn.b{piece[1].lower()}", np.zeros(w))
            self._add(f"layer{i}.ln1.gain", np.ones(w))
            self._add(f"layer{i}.ln1.bias", np.zeros(w))
            self._add(f"layer{i}.ffn.W1", _glorot(rng, w, ffn, (w, ffn)))
            self._add(f"layer{i}.ffn.b1", np.zeros(ffn))
            self._add(f"layer{i}.ffn.W2", _glorot(rng, ffn, w, (ffn, w)))
            self._add(f"layer{i}.ffn.b2", np.zeros(w))
            self._add(f"layer{i}.ln2.gain", np.ones(w))
            self._add(f"layer{i}.ln2.bias", np.zeros(w))

        self.rbf: RbfLayer | None = None
        if config.rbf_enabled:
            if rbf_layer is None:
                from .initialization import random_init
                rbf_layer = random_init(config.n_centers, dm, seed=ss_rbf)
            if rbf_layer.d_h != dm or rbf_layer.n_centers != config.n_centers:
                raise ConfigError(
                    f"rbf_layer shape {rbf_layer.n_centers} x {rbf_layer.d_h}"
                    f" does not match config ({config.n_centers} x {dm})"
                )
            self.rbf = rbf_layer
            self.params["rbf.centers"] = rbf_layer.centers
            self.params["rbf.gamma"] = rbf_layer.gamma

        head_in = self.final_width()
        self._add("head.W", _glorot(rng, head_in, d, (head_in, d)))
        self._add("head.b", np.zeros(d))

    def _add(self, name, data):
        self.params[name] = Tensor(data, requires_grad=True)

    def layer_width(self, i: int) -> int:
        """Width at which encoder layer i (1-based) operates."""
        if self.config.rbf_enabled and i > self.config.rbf_position:
            return self.config.n_centers
        return self.config.d_model

    def final_width(self) -> int:
        if self.config.rbf_enabled:
            return self.config.n_centers
        return self.config.d_model

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grads(self):
        for p in self.params.values():
            p.reset_grad()

    def embed(self, x) -> Tensor:
        """Token projection plus positional encoding for x of shape [B, T, d]."""
        xt = x if isinstance(x, Tensor) else Tensor(x)
        b, t, d = xt.data.shape
        if d != self.config.input_dim:
            raise DimensionError(
                f"embed: input has {d} features, model expects {self.config.input_dim}"
            )
        if t > self.config.window_len:
            raise ContractError(
                f"embed: sequence length {t} exceeds the positional table"
                f" length {self.config.window_len}"
            )
        tok = T.add(T.matmul(xt, self.params["embed.W"]), self.params["embed.b"])
        return T.add(tok, Tensor(self.pe[:t]))

    def encoder_layer(self, h: Tensor, i: int, dropout_rng=None) -> Tensor:
        """Post-norm residual layer: LN(h + MHSA(h)) then LN(h' + FFN(h'))."""
        p = self.params
        w = self.layer_width(i)
        heads = self.config.n_heads
        dk = w // heads
        b, t, _ = h.data.shape

        def split(name):
            proj = T.add(T.matmul(h, p[f"layer{i}.attn.W{name}"]),
                         p[f"layer{i}.attn.b{name}"])
            return T.transpose(T.reshape(proj, (b, t, heads, dk)), (0, 2, 1, 3))

        q, k, v = split("q"), split("k"), split("v")
        # scaling q instead of the [b, heads, t, t] score matrix touches
        # heads*dk values per position rather than t
        q = T.scale_by_scalar(q, 1.0 / np.sqrt(dk))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
        attn = T.softmax(scores, axis=-1)
        ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (b, t, w))
        proj = T.add(T.matmul(ctx, p[f"layer{i}.attn.Wo"]), p[f"layer{i}.attn.bo"])
        proj = self._dropout(proj, dropout_rng)
        h1 = T.layer_norm(T.add(h, proj), p[f"layer{i}.ln1.gain"], p[f"layer{i}.ln1.bias"])

        inner = T.relu(T.add(T.matmul(h1, p[f"layer{i}.ffn.W1"]), p[f"layer{i}.ffn.b1"]))
        ffn = T.add(T.matmul(inner, p[f"layer{i}.ffn.W2"]), p[f"layer{i}.ffn.b2"])
        ffn = self._dropout(ffn, dropout_rng)
        return T.layer_norm(T.add(h1, ffn), p[f"layer{i}.ln2.gain"], p[f"layer{i}.ln2.bias"])

    def _dropout(self, h: Tensor, rng):
        p = self.config.dropout
        if p <= 0.0 or rng is None:
            return h
        mask = (rng.random(h.data.shape) >= p) / (1.0 - p)
        return T.mul(h, Tensor(mask))

    def forward(self, x, dropout_rng=None):
        """Reconstruct x of shape [B, T, d]; returns (x_hat, z) with z None
        when the RBF layer is disabled."""
        arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        if arr.ndim != 3:
            raise DimensionError(
                f"forward: expected [batch, time, features], got shape {tuple(arr.shape)}"
            )
        if not np.isfinite(arr).all():
            raise ContractError("forward: input contains non-finite values")
        h = self.embed(x if isinstance(x, Tensor) else Tensor(arr))
        z = None
        for i in range(1, self.config.n_layers + 1):
            h = self.encoder_layer(h, i, dropout_rng)
            if self.config.rbf_enabled and i == self.config.rbf_position:
                z = rbf_forward(h, self.rbf)
                h = z
        xhat = T.add(T.matmul(h, self.params["head.W"]), self.params["head.b"])
        return xhat, z

    def forward_latents(self, x, upto: int) -> np.ndarray:
        """Hidden states after encoder layer `upto` (1-based), for center
        initialization.  Runs without gradient tracking."""
        if not 1 <= upto <= self.config.n_layers:
            raise ContractError(f"upto must be in [1, {self.config.n_layers}], got {upto}")
        if self.config.rbf_enabled and upto > self.config.rbf_position:
            raise ContractError("latents past the RBF position change width")
        h = self.embed(x)
        for i in range(1, upto + 1):
            h = self.encoder_layer(h, i)
        return h.data


def save_checkpoint(model: RestadModel, path) -> None:
    """Write a versioned JSON checkpoint; byte-identical for identical models."""
    params = {}
    for name, p in model.params.items():
        params[name] = {
            "shape": list(p.data.shape),
            "dtype": "<f8",
            "data": base64.b64encode(
                np.ascontiguousarray(p.data, dtype="<f8").tobytes()
            ).decode("ascii"),
        }
    doc = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "model_config": asdict(model.config),
        "params": params,
    }
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"
    with open(path, "wb") as f:
        f.write(blob.encode("ascii"))


def load_checkpoint(path) -> RestadModel:
    try:
        with open(path, "rb") as f:
            doc = json.loads(f.read().decode("ascii"))
    except OSError as e:
        raise ContractError(f"cannot read checkpoint {path}: {e.strerror or e}")
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ContractError(f"checkpoint {path} is not valid JSON: {e}")
    if not isinstance(doc, dict) or "model_config" not in doc or "params" not in doc:
        raise ContractError(f"checkpoint {path} does not look like a checkpoint file")
    if doc.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise ContractError(
            f"checkpoint schema_version {doc.get('schema_version')!r} not supported"
        )
    config = ModelConfig(**doc["model_config"])
    model = RestadModel(config)
    saved = doc["params"]
    if set(saved) != set(model.params):
        missing = sorted(set(model.params) - set(saved))
        extra = sorted(set(saved) - set(model.params))
        raise ContractError(
            f"checkpoint parameters do not match config: missing {missing}, extra {extra}"
        )
    for name, entry in saved.items():
        arr = np.frombuffer(
            base64.b64decode(entry["data"]), dtype="<f8"
        ).reshape(entry["shape"]).astype(np.float64)
        if arr.shape != model.params[name].data.shape:
            raise ContractError(
                f"checkpoint parameter {name} has shape {arr.shape},"
                f" expected {model.params[name].data.shape}"
            )
        model.params[name].data[...] = arr
    return model
