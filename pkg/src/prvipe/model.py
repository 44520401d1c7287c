"""Embedding network: 2D keypoints -> diagonal Gaussian in embedding space.

Architecture (all float64)::

    x (26) -> Linear -> BN -> ReLU -> Dropout                      "stem"
           -> 2 x residual block [Linear -> BN -> ReLU -> Dropout] x 2
           -> mean head (Linear, W -> d)
           -> variance head (Linear, W -> d) -> softplus + 1e-6

Linear layers feeding batch norm carry no bias (batch norm's shift plays
that role). Gradients are written out by hand for this fixed architecture.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import special

from .errors import CorruptCheckpoint, NonFiniteActivation, VersionMismatch

CHECKPOINT_VERSION = 1
VARIANCE_FLOOR = 1e-6
MODES = ("pr-vipe", "vipe", "l2-vipe")

HIDDEN_LAYERS = ("stem", "block0.0", "block0.1", "block1.0", "block1.1")
BLOCKS = (("block0.0", "block0.1"), ("block1.0", "block1.1"))


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 26
    width: int = 1024
    dim: int = 16
    dropout: float = 0.3
    mode: str = "pr-vipe"
    schema: str = "coco13"
    bn_momentum: float = 0.99
    bn_eps: float = 1e-3

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def probabilistic(self) -> bool:
        return self.mode == "pr-vipe"


@dataclass
class EmbeddingDistribution:
    """Batch of diagonal Gaussians; point embeddings carry zero variance."""

    mean: np.ndarray
    variance: np.ndarray

    def __len__(self):
        return len(self.mean)

    def __getitem__(self, idx):
        return EmbeddingDistribution(self.mean[idx], self.variance[idx])

    @classmethod
    def concatenate(cls, dists):
        dists = list(dists)
        return cls(np.concatenate([d.mean for d in dists]), np.concatenate([d.variance for d in dists]))


@dataclass
class ModelParams:
    config: ModelConfig
    weights: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    shadow: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def a(self) -> float:
        return float(np.exp(self.weights["log_a"]))

    @property
    def b(self) -> float:
        return float(self.weights["b"])

    def copy(self) -> "ModelParams":
        dup = lambda d: {k: v.copy() for k, v in d.items()}
        return ModelParams(self.config, dup(self.weights), dup(self.buffers), dup(self.shadow))

    def ema_view(self) -> "ModelParams":
        """Same buffers, shadow weights in place of live ones (for inference)."""
        return ModelParams(self.config, dict(self.shadow or self.weights), self.buffers, self.shadow)


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Fan-in scaled uniform weights, zero biases, a = 1, b = 0."""
    w, d = config.width, config.dim

    def uniform(fan_in, shape):
        limit = np.sqrt(3.0 / fan_in)
        return rng.uniform(-limit, limit, size=shape)

    weights, buffers = {}, {}
    for name in HIDDEN_LAYERS:
        fan_in = config.input_dim if name == "stem" else w
        weights[f"{name}.w"] = uniform(fan_in, (fan_in, w))
        weights[f"{name}.gamma"] = np.ones(w)
        weights[f"{name}.beta"] = np.zeros(w)
        buffers[f"{name}.mean"] = np.zeros(w)
        buffers[f"{name}.var"] = np.ones(w)
    for head in ("mean_head", "var_head"):
        weights[f"{head}.w"] = uniform(w, (w, d))
        weights[f"{head}.b"] = np.zeros(d)
    weights["log_a"] = np.array(0.0)
    weights["b"] = np.array(0.0)
    params = ModelParams(config, weights, buffers)
    params.shadow = {k: v.copy() for k, v in weights.items()}
    return params


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return special.expit(x)


def _flatten_input(x, config):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x.reshape(len(x), -1)
    if x.ndim != 2 or x.shape[1] != config.input_dim:
        raise ValueError(f"expected inputs of size {config.input_dim}, got shape {x.shape}")
    return x


def forward(x, params: ModelParams, mode: str = "eval", rng: np.random.Generator | None = None,
            keep_cache: bool = False):
    """Embed a batch of normalized 2D poses.

    In ``train`` mode batch norm uses batch statistics and dropout is drawn
    from ``rng``; the running statistics are *not* updated here (see
    :func:`update_batch_norm`). Returns ``(EmbeddingDistribution, cache)``;
    the cache is ``None`` unless ``keep_cache``.
    """
    cfg = params.config
    w = params.weights
    train = mode == "train"
    if train and cfg.dropout > 0 and rng is None:
        raise ValueError("train mode needs an rng for dropout")
    h = _flatten_input(x, cfg)
    cache = {"x": h, "layers": {}} if keep_cache else None
    stats = {}
    keep = 1.0 - cfg.dropout

    def hidden(name, inp):
        pre = inp @ w[f"{name}.w"]
        if train:
            mu = pre.sum(axis=0) / len(pre)
            centered = pre - mu
            var = np.einsum("ij,ij->j", centered, centered) / len(pre)
            stats[name] = (mu, var)
        else:
            mu, var = params.buffers[f"{name}.mean"], params.buffers[f"{name}.var"]
            centered = pre - mu
        inv_std = 1.0 / np.sqrt(var + cfg.bn_eps)
        xhat = centered * inv_std
        act = np.maximum(w[f"{name}.gamma"] * xhat + w[f"{name}.beta"], 0.0)
        mask = None
        if train and cfg.dropout > 0:
            mask = (rng.random(act.shape) < keep) / keep
            act = act * mask
        if keep_cache:
            cache["layers"][name] = (inp, xhat, inv_std, act, mask)
        return act

    h = hidden("stem", h)
    for first, second in BLOCKS:
        h = h + hidden(second, hidden(first, h))
    if keep_cache:
        cache["features"] = h

    mean = h @ w["mean_head.w"] + w["mean_head.b"]
    if cfg.mode == "l2-vipe":
        norm = np.linalg.norm(mean, axis=1, keepdims=True)
        if keep_cache:
            cache["raw_mean"], cache["norm"] = mean, norm
        mean = mean / norm
    if cfg.probabilistic:
        raw = h @ w["var_head.w"] + w["var_head.b"]
        variance = softplus(raw) + VARIANCE_FLOOR
        if keep_cache:
            cache["raw_var"] = raw
    else:
        variance = np.zeros_like(mean)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(variance))):
        raise NonFiniteActivation("non-finite embedding output")
    if keep_cache:
        cache["stats"] = stats
    elif train:
        cache = {"stats": stats}
    return EmbeddingDistribution(mean, variance), cache


def update_batch_norm(params: ModelParams, stats: dict) -> None:
    """Fold batch statistics from a train-mode forward into the running averages."""
    m = params.config.bn_momentum
    for name, (mu, var) in stats.items():
        params.buffers[f"{name}.mean"] = m * params.buffers[f"{name}.mean"] + (1 - m) * mu
        params.buffers[f"{name}.var"] = m * params.buffers[f"{name}.var"] + (1 - m) * var


def backward(grad_mean, grad_var, cache, params: ModelParams, grad_log_a=0.0, grad_b=0.0):
    """Gradients of a scalar loss w.r.t. every weight, given output gradients.

    ``grad_mean`` and ``grad_var`` are dL/d(mean) and dL/d(variance) of the
    returned distribution; the calibration gradients are passed through.
    """
    cfg = params.config
    w = params.weights
    grads = {k: np.zeros_like(v) for k, v in w.items()}
    grads["log_a"] = np.array(float(grad_log_a))
    grads["b"] = np.array(float(grad_b))
    feats = cache["features"]

    if cfg.mode == "l2-vipe":
        z, norm = cache["raw_mean"] / cache["norm"], cache["norm"]
        grad_mean = (grad_mean - z * np.sum(grad_mean * z, axis=1, keepdims=True)) / norm
    grads["mean_head.w"] = feats.T @ grad_mean
    grads["mean_head.b"] = grad_mean.sum(axis=0)
    dh = grad_mean @ w["mean_head.w"].T
    if cfg.probabilistic:
        draw = grad_var * sigmoid(cache["raw_var"])
        grads["var_head.w"] = feats.T @ draw
        grads["var_head.b"] = draw.sum(axis=0)
        dh = dh + draw @ w["var_head.w"].T

    def hidden_back(name, dact):
        inp, xhat, inv_std, act, mask = cache["layers"][name]
        if mask is not None:
            dact = dact * mask
        dy = dact * (act > 0)
        grads[f"{name}.beta"] = dy.sum(axis=0)
        grads[f"{name}.gamma"] = np.sum(dy * xhat, axis=0)
        dxhat = dy * w[f"{name}.gamma"]
        n = len(dxhat)
        dpre = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
        grads[f"{name}.w"] = inp.T @ dpre
        return dpre @ w[f"{name}.w"].T

    for first, second in reversed(BLOCKS):
        dh = dh + hidden_back(first, hidden_back(second, dh))
    hidden_back("stem", dh)
    return grads


def embed(x, params: ModelParams, use_ema: bool = True, batch_size: int = 4096) -> EmbeddingDistribution:
    """Eval-mode embedding, by default with the EMA shadow weights."""
    view = params.ema_view() if use_ema and params.shadow else params
    x = _flatten_input(x, params.config)
    parts = [forward(x[s:s + batch_size], view, "eval")[0] for s in range(0, len(x), batch_size)]
    if not parts:
        d = params.config.dim
        return EmbeddingDistribution(np.zeros((0, d)), np.zeros((0, d)))
    return EmbeddingDistribution.concatenate(parts)


def sample_embeddings(dist: EmbeddingDistribution, k: int, rng: np.random.Generator):
    """Reparameterized samples ``mean + sqrt(variance) * eps``.

    Returns ``(samples, eps)`` with shapes ``(n, k, d)``; ``eps`` is needed to
    push gradients back to the variance.
    """
    if k < 1:
        raise ValueError("need at least one sample")
    mean = np.atleast_2d(dist.mean)
    eps = rng.standard_normal((len(mean), k, mean.shape[-1]))
    return samples_from_noise(dist, eps), eps


def samples_from_noise(dist: EmbeddingDistribution, eps: np.ndarray) -> np.ndarray:
    mean, var = np.atleast_2d(dist.mean), np.atleast_2d(dist.variance)
    return mean[:, None, :] + np.sqrt(var)[:, None, :] * eps


def ema_update(params: ModelParams, decay: float) -> None:
    """shadow <- decay * shadow + (1 - decay) * live, for every trainable weight."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError("decay must be in [0, 1]")
    if not params.shadow:
        params.shadow = {k: v.copy() for k, v in params.weights.items()}
        return
    for name, live in params.weights.items():
        params.shadow[name] = decay * params.shadow[name] + (1.0 - decay) * live


def ema_decay_at(step: int, decay: float) -> float:
    """Warm-up schedule: the shadow tracks closely early in training."""
    return min(decay, (1.0 + step) / (10.0 + step))


# ---------------------------------------------------------------------------
# Checkpoints
#
# A checkpoint is an uncompressed .npz archive. Arrays are stored as
# little-endian float64 under "weights/<name>", "buffers/<name>",
# "shadow/<name>" and, when present, "optimizer/<name>". The member "meta"
# holds UTF-8 JSON: format, version, mode, dim, width, schema, the full
# model config, and any caller-supplied extras (e.g. the training step).


def _le(a):
    return np.asarray(a, dtype=np.dtype("<f8"))


def save_checkpoint(params: ModelParams, path, optimizer: dict | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = params.config
    meta = {
        "format": "prvipe-checkpoint",
        "version": CHECKPOINT_VERSION,
        "mode": cfg.mode,
        "dim": cfg.dim,
        "width": cfg.width,
        "schema": cfg.schema,
        "config": asdict(cfg),
        "extra": extra or {},
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for prefix, group in (("weights", params.weights), ("buffers", params.buffers),
                          ("shadow", params.shadow), ("optimizer", optimizer or {})):
        for name, value in group.items():
            arrays[f"{prefix}/{name}"] = _le(value)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path, expect_dim: int | None = None, expect_schema: str | None = None):
    """Load a checkpoint; returns ``(params, optimizer_state, meta)``."""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as npz:
            data = {k: npz[k] for k in npz.files}
        meta = json.loads(bytes(data.pop("meta")).decode())
    except (OSError, ValueError, KeyError, EOFError, zipfile.BadZipFile, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(f"{path}: {exc}") from exc
    if meta.get("format") != "prvipe-checkpoint":
        raise CorruptCheckpoint(f"{path}: not a checkpoint file")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {meta.get('version')}, expected {CHECKPOINT_VERSION}")
    if expect_dim is not None and meta["dim"] != expect_dim:
        raise VersionMismatch(f"{path}: embedding dim {meta['dim']}, expected {expect_dim}")
    if expect_schema is not None and meta["schema"] != expect_schema:
        raise VersionMismatch(f"{path}: schema {meta['schema']!r}, expected {expect_schema!r}")

    groups = {"weights": {}, "buffers": {}, "shadow": {}, "optimizer": {}}
    for key, value in data.items():
        prefix, _, name = key.partition("/")
        if prefix not in groups:
            raise CorruptCheckpoint(f"{path}: unexpected member {key!r}")
        groups[prefix][name] = value.astype(np.float64)
    config = ModelConfig(**meta["config"])
    expected = set(init_params(replace(config, width=1, dim=1), np.random.default_rng(0)).weights)
    if set(groups["weights"]) != expected:
        raise CorruptCheckpoint(f"{path}: weight set does not match a {config.mode} model")
    params = ModelParams(config, groups["weights"], groups["buffers"], groups["shadow"])
    return params, groups["optimizer"], meta
