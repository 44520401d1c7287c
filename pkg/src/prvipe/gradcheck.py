"""Finite-difference check of the hand-written gradients.

Every scalar weight is perturbed by +h and -h and the training loss is
re-evaluated with the same dropout masks, sampling noise and mined
negatives drawn from a fixed seed. To keep this affordable, all
perturbations of one weight tensor are evaluated at once: the network and
the loss are run on a stack of weight copies along a leading axis. Before
any difference is taken, the stacked evaluator is checked to reproduce
:func:`prvipe.losses.total_loss` on the unperturbed weights.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import ProjectionConfig, synth_view_pairs
from .losses import LossConfig, _apply_bounds, loss_and_grads, semi_hard_select, split_rng, total_loss
from .model import BLOCKS, VARIANCE_FLOOR, ModelParams, forward, sigmoid, softplus

DEFAULT_FLOOR = 1e-5


@dataclass
class GradcheckReport:
    seed: int
    mode: str
    max_rel_error: dict[str, float]
    checked: int
    reference_gap: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values())

    def passed(self, tol: float = 1e-4) -> bool:
        return self.worst < tol


def relative_error(analytic, numeric, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), entrywise.

    The floor keeps gradients that are smaller than the finite-difference
    roundoff (about 1e-10 at h = 1e-5) from producing meaningless ratios.
    """
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


@dataclass
class _Batch:
    anchors: np.ndarray
    positives: np.ndarray
    poses3d: np.ndarray

    def nonmatch_mask(self, kappa):
        from .skeleton import pairwise_np_mpjpe

        nonmatch = pairwise_np_mpjpe(self.poses3d) > kappa
        return np.concatenate([nonmatch, nonmatch], axis=1)


def gradcheck_batch(seed: int, n: int = 6) -> _Batch:
    """Small deterministic batch of projected view pairs of random articulated poses."""
    from .data import pose_from_angles, sample_angles

    rng = np.random.default_rng([seed, 7])
    poses = np.array([pose_from_angles(a) for a in sample_angles(rng, n=n)])
    anchors, positives = synth_view_pairs(poses, rng, ProjectionConfig())
    return _Batch(anchors, positives, poses)


def _stacked_weight(w: dict, name: str, copies: np.ndarray | None, target: str):
    """The weight ``name``; if it is the perturbed one, the (P, ...) stack of copies."""
    if name != target:
        return w[name]
    if copies.ndim == 2:  # vectors become (P, 1, n) so they broadcast over the batch
        return copies[:, None, :]
    return copies


def _stacked_forward(x, params: ModelParams, masks: dict, target: str, copies):
    cfg = params.config
    w = params.weights

    def get(name):
        return _stacked_weight(w, name, copies, target)

    def hidden(name, inp):
        pre = inp @ get(f"{name}.w")
        mu = pre.sum(axis=-2, keepdims=True) / pre.shape[-2]
        centered = pre - mu
        var = (centered * centered).sum(axis=-2, keepdims=True) / pre.shape[-2]
        xhat = centered / np.sqrt(var + cfg.bn_eps)
        act = np.maximum(get(f"{name}.gamma") * xhat + get(f"{name}.beta"), 0.0)
        return act if masks[name] is None else act * masks[name]

    h = hidden("stem", x)
    for first, second in BLOCKS:
        h = h + hidden(second, hidden(first, h))
    mean = h @ get("mean_head.w") + get("mean_head.b")
    if cfg.mode == "l2-vipe":
        mean = mean / np.sqrt((mean * mean).sum(axis=-1, keepdims=True))
    if cfg.probabilistic:
        var = softplus(h @ get("var_head.w") + get("var_head.b")) + VARIANCE_FLOOR
    else:
        var = np.zeros_like(mean)
    if copies is not None:
        shape = (len(copies),) + mean.shape[-2:]
        mean, var = np.broadcast_to(mean, shape), np.broadcast_to(var, shape)
    return mean, var


def _pair_prob(zi, zj, a, b, bounds):
    """Bounded K x K MC probability; ``zi``, ``zj``: (P, N, K, d), ``a``, ``b``: (P,)."""
    diff = zi[..., :, None, :] - zj[..., None, :, :]
    r = np.sqrt((diff * diff).sum(axis=-1))
    q, _ = _apply_bounds(sigmoid(-a[:, None, None, None] * r + b[:, None, None, None]), bounds)
    return q.sum(axis=(-1, -2)) / (r.shape[-1] * r.shape[-2])


def _stacked_loss(mean, var, eps, nonmatch, a, b, config: LossConfig, mode: str):
    """Total loss for a (P, 2N, d) stack of embeddings; returns (P,)."""
    p_count = mean.shape[0]
    n = mean.shape[1] // 2
    anchors, positives = np.arange(n), np.arange(n, 2 * n)
    a = np.broadcast_to(np.asarray(a, float), (p_count,))
    b = np.broadcast_to(np.asarray(b, float), (p_count,))
    if mode == "l2-vipe":
        diff = mean[:, :n, None, :] - mean[:, None, :, :]
        d_mine = (diff * diff).sum(axis=-1)
        neg = semi_hard_select(d_mine, d_mine[:, anchors, positives], nonmatch)
        d_pos = d_mine[:, anchors, positives]
        d_neg = np.take_along_axis(d_mine, neg[..., None], axis=-1)[..., 0]
        hinge = d_pos - d_neg + config.margin
        return (config.w_ratio * np.where(hinge > 0, hinge, 0.0).sum(axis=-1)
                + config.w_positive * d_pos.sum(axis=-1))

    z = mean[:, :, None, :] + np.sqrt(var)[:, :, None, :] * eps if mode == "pr-vipe" else mean[:, :, None, :]
    za = z[:, :n]
    if config.mining_estimator == "paired" or z.shape[2] == 1:
        diff = za[:, :, None] - z[:, None]
        r = np.sqrt((diff * diff).sum(axis=-1))
        q, _ = _apply_bounds(sigmoid(-a[:, None, None, None] * r + b[:, None, None, None]), config.bounds)
        p_mine = q.sum(axis=-1) / r.shape[-1]
    else:
        diff = za[:, :, None, :, None, :] - z[:, None, :, None, :, :]
        r = np.sqrt((diff * diff).sum(axis=-1))
        q, _ = _apply_bounds(sigmoid(-a[:, None, None, None, None] * r + b[:, None, None, None, None]),
                             config.bounds)
        p_mine = q.sum(axis=(-1, -2)) / (r.shape[-1] * r.shape[-2])
    with np.errstate(divide="ignore"):
        d_mine = -np.log(p_mine)
    neg = semi_hard_select(d_mine, d_mine[:, anchors, positives], nonmatch)
    z_neg = np.take_along_axis(z, neg[:, :, None, None], axis=1)
    d_pos = -np.log(_pair_prob(za, z[:, positives], a, b, config.bounds))
    d_neg = -np.log(_pair_prob(za, z_neg, a, b, config.bounds))
    hinge = d_pos - d_neg + config.margin
    total = config.w_ratio * np.where(hinge > 0, hinge, 0.0).sum(axis=-1) + config.w_positive * d_pos.sum(axis=-1)
    if mode == "pr-vipe":
        m, v = mean[:, :n], var[:, :n]
        total = total + config.w_prior * 0.5 * (v + m * m - 1.0 - np.log(v)).sum(axis=(-1, -2))
    return total


def _perturbed_losses(x, params, masks, eps, nonmatch, config, name, deltas):
    """Loss for each copy of weight ``name`` shifted entrywise by ``deltas`` (P, *shape)."""
    base = params.weights[name]
    copies = base[None] + deltas
    mode = params.config.mode
    if name in ("log_a", "b"):
        log_a = copies if name == "log_a" else np.full(len(copies), params.weights["log_a"])
        b = copies if name == "b" else np.full(len(copies), params.weights["b"])
        mean, var = _stacked_forward(x, params, masks, "", None)
        mean = np.broadcast_to(mean, (len(copies),) + mean.shape)
        var = np.broadcast_to(var, (len(copies),) + var.shape)
        return _stacked_loss(mean, var, eps, nonmatch, np.exp(log_a), b, config, mode)
    mean, var = _stacked_forward(x, params, masks, name, copies)
    return _stacked_loss(mean, var, eps, nonmatch, params.a, params.b, config, mode)


def gradcheck(seed: int = 0, mode: str = "pr-vipe", width: int = 32, dim: int = 4, n: int = 6,
              samples: int = 4, h: float = 1e-5, floor: float = DEFAULT_FLOOR,
              loss_config: LossConfig | None = None, chunk: int = 512) -> GradcheckReport:
    """Central differences of the training loss for every weight entry of a small model."""
    from .model import ModelConfig, init_params

    loss_config = loss_config or LossConfig(samples=samples)
    params = init_params(ModelConfig(width=width, dim=dim, mode=mode), np.random.default_rng([seed, 3]))
    rng = np.random.default_rng([seed, 11])
    for name in params.weights:
        params.weights[name] = params.weights[name] + 0.1 * rng.standard_normal(np.shape(params.weights[name]))
    batch = gradcheck_batch(seed, n)
    nonmatch = batch.nonmatch_mask(loss_config.kappa)
    loss_seed = [seed, 13]

    reference, _ = total_loss(batch, params, loss_config, np.random.default_rng(loss_seed), nonmatch)
    _, grads, _ = loss_and_grads(batch, params, loss_config, np.random.default_rng(loss_seed), nonmatch)

    # replay the noise that loss_and_grads drew
    dropout_rng, sample_rng = split_rng(np.random.default_rng(loss_seed))
    x = np.concatenate([batch.anchors, batch.positives]).reshape(2 * n, -1)
    _, cache = forward(x, params, "train", dropout_rng, keep_cache=True)
    masks = {name: layer[4] for name, layer in cache["layers"].items()}
    k = loss_config.samples if mode == "pr-vipe" else 1
    eps = sample_rng.standard_normal((2 * n, k, dim))

    zero = np.zeros((1,) + np.shape(params.weights["b"]))
    stacked = float(_perturbed_losses(x, params, masks, eps, nonmatch, loss_config, "b", zero)[0])
    gap = abs(stacked - reference)
    if gap > 1e-10 * max(1.0, abs(reference)):
        raise AssertionError(f"stacked evaluator disagrees with total_loss by {gap:g}")

    report, checked = {}, 0
    for name, w in params.weights.items():
        w = np.asarray(w, dtype=np.float64)
        size = w.size
        numeric = np.empty(size)
        for start in range(0, size, chunk):
            idx = np.arange(start, min(size, start + chunk))
            deltas = np.zeros((len(idx), size))
            deltas[np.arange(len(idx)), idx] = h
            deltas = deltas.reshape((len(idx),) + w.shape)
            up = _perturbed_losses(x, params, masks, eps, nonmatch, loss_config, name, deltas)
            down = _perturbed_losses(x, params, masks, eps, nonmatch, loss_config, name, -deltas)
            numeric[idx] = (up - down) / (2 * h)
        report[name] = float(relative_error(np.reshape(grads[name], -1), numeric, floor).max())
        checked += size
    return GradcheckReport(seed, mode, report, checked, gap)
