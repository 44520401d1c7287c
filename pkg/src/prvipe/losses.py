"""Matching probabilities, triplet ratio / positive / prior losses, semi-hard mining.

Probability bounds. Training keeps matching probabilities inside
``prob_range`` (default [0.05, 0.95]). ``prob_bounds="rescale"`` maps a
sigmoid value ``s`` to ``lo + (hi - lo) * s``, which keeps gradients alive
everywhere; ``"clip"`` hard-clips each sampled pair instead. Either way the
bound is applied per sample pair before the Monte-Carlo average.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import NoValidNegative
from .model import EmbeddingDistribution, ModelParams, backward, forward, sigmoid

PROB_BOUNDS = ("rescale", "clip", "none")


@dataclass(frozen=True)
class LossConfig:
    beta: float = 2.0
    kappa: float = 0.1
    samples: int = 20
    w_ratio: float = 1.0
    w_positive: float = 0.005
    w_prior: float = 0.001
    prob_range: tuple[float, float] = (0.05, 0.95)
    prob_bounds: str = "rescale"
    mining_estimator: str = "paired"

    def __post_init__(self):
        if self.beta < 1.0:
            raise ValueError("beta must be >= 1")
        if min(self.w_ratio, self.w_positive, self.w_prior) < 0:
            raise ValueError("loss weights must be non-negative")
        lo, hi = self.prob_range
        if not 0.0 < lo < hi < 1.0:
            raise ValueError("prob_range must satisfy 0 < lo < hi < 1")
        if self.prob_bounds not in PROB_BOUNDS:
            raise ValueError(f"prob_bounds must be one of {PROB_BOUNDS}")
        if self.mining_estimator not in ("paired", "full"):
            raise ValueError("mining_estimator must be 'paired' or 'full'")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")

    @property
    def margin(self) -> float:
        return float(np.log(self.beta))

    @property
    def bounds(self):
        return None if self.prob_bounds == "none" else (self.prob_bounds, self.prob_range)


def _apply_bounds(s, bounds):
    """Bounded probability and its derivative w.r.t. the raw sigmoid value."""
    if bounds is None:
        return s, 1.0
    kind, (lo, hi) = bounds
    if kind == "rescale":
        return lo + (hi - lo) * s, hi - lo
    inside = (s > lo) & (s < hi)
    return np.clip(s, lo, hi), inside.astype(s.dtype)


def _norm(diff):
    return np.sqrt(np.einsum("...i,...i->...", diff, diff))


def matching_prob_point(z_i, z_j, a: float, b: float, bounds=None):
    """sigma(-a * ||z_i - z_j|| + b), optionally bounded (see module docstring)."""
    r = _norm(np.asarray(z_i, float) - np.asarray(z_j, float))
    p, _ = _apply_bounds(sigmoid(-a * r + b), bounds)
    return p


def _log_sigmoid(u):
    return -np.logaddexp(0.0, -u)


def log_matching_prob_samples(zi, zj, a, b):
    """Unbounded log of the K1 x K2 Monte-Carlo estimate; ``zi``: (..., K1, d)."""
    r = _norm(zi[..., :, None, :] - zj[..., None, :, :])
    ls = _log_sigmoid(-a * r + b)
    k = ls.shape[-1] * ls.shape[-2]
    flat = ls.reshape(ls.shape[:-2] + (k,))
    top = flat.max(axis=-1, keepdims=True)
    return (top[..., 0] + np.log(np.exp(flat - top).sum(axis=-1))) - np.log(k)


def matching_prob_samples(zi, zj, a, b, bounds=None):
    """Average bounded probability over all sample pairs; ``zi``: (..., K1, d)."""
    r = _norm(zi[..., :, None, :] - zj[..., None, :, :])
    p, _ = _apply_bounds(sigmoid(-a * r + b), bounds)
    return p.mean(axis=(-1, -2))


def matching_prob_mc(d_i: EmbeddingDistribution, d_j: EmbeddingDistribution, k: int,
                     rng: np.random.Generator, a: float, b: float, bounds=None):
    """Monte-Carlo matching probability from ``k`` samples of each distribution.

    Accepts single distributions (1-D mean) or aligned batches.
    """
    single = np.ndim(d_i.mean) == 1
    mi, vi = np.atleast_2d(d_i.mean), np.atleast_2d(d_i.variance)
    mj, vj = np.atleast_2d(d_j.mean), np.atleast_2d(d_j.variance)
    zi = mi[:, None] + np.sqrt(vi)[:, None] * rng.standard_normal((len(mi), k, mi.shape[-1]))
    zj = mj[:, None] + np.sqrt(vj)[:, None] * rng.standard_normal((len(mj), k, mj.shape[-1]))
    p = matching_prob_samples(zi, zj, a, b, bounds)
    return float(p[0]) if single else p


def distance_kernel(p_match):
    """D_m = -log p; defined for p in (0, 1]."""
    p = np.asarray(p_match, dtype=np.float64)
    if np.any(p <= 0):
        raise ValueError("matching probability must be positive")
    out = -np.log(p)
    return float(out) if out.ndim == 0 else out


def gaussian_prior_loss(dists: EmbeddingDistribution) -> float:
    """Sum over the batch of KL(N(mean, diag(var)) || N(0, I))."""
    m, v = np.atleast_2d(dists.mean), np.atleast_2d(dists.variance)
    return float(0.5 * np.sum(v + m * m - 1.0 - np.log(v)))


def _mc_pair(anchor, other, config: LossConfig, rng, a, b):
    k = config.samples
    za = samples(anchor, k, rng)
    zo = samples(other, k, rng)
    return matching_prob_samples(za, zo, a, b, config.bounds)


def samples(dist: EmbeddingDistribution, k: int, rng) -> np.ndarray:
    m, v = np.atleast_2d(dist.mean), np.atleast_2d(dist.variance)
    return m[:, None] + np.sqrt(v)[:, None] * rng.standard_normal((len(m), k, m.shape[-1]))


def triplet_ratio_loss(anchor: EmbeddingDistribution, positive: EmbeddingDistribution,
                       negative: EmbeddingDistribution, config: LossConfig,
                       rng: np.random.Generator, a: float = 1.0, b: float = 0.0) -> float:
    """sum_i max(0, D(a_i, p_i) - D(a_i, n_i) + log(beta)), D from Monte-Carlo probabilities."""
    k = config.samples
    za, zp, zn = (samples(d, k, rng) for d in (anchor, positive, negative))
    d_pos = -np.log(matching_prob_samples(za, zp, a, b, config.bounds))
    d_neg = -np.log(matching_prob_samples(za, zn, a, b, config.bounds))
    return ratio_hinge(d_pos, d_neg, config.margin)


def ratio_hinge(d_pos, d_neg, margin) -> float:
    return float(np.sum(np.maximum(0.0, np.asarray(d_pos) - np.asarray(d_neg) + margin)))


def positive_pairwise_loss(anchor: EmbeddingDistribution, positive: EmbeddingDistribution,
                           config: LossConfig, rng: np.random.Generator,
                           a: float = 1.0, b: float = 0.0) -> float:
    """sum_i -log p(match | anchor_i, positive_i)."""
    return float(np.sum(-np.log(_mc_pair(anchor, positive, config, rng, a, b))))


# ---------------------------------------------------------------------------
# Mining


def semi_hard_select(dist_an: np.ndarray, dist_ap: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Per anchor, the closest valid negative that is farther than the positive.

    Works on any leading batch shape; the candidate axis is last.

    Falls back to the farthest valid negative when no candidate is farther
    than the positive. Ties go to the lowest candidate index.
    """
    dist_an = np.asarray(dist_an, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    empty = ~valid.any(axis=-1)
    if np.any(empty):
        raise NoValidNegative(f"anchors {np.flatnonzero(empty).tolist()} have no non-matching candidate")
    semi = valid & (dist_an > np.asarray(dist_ap)[..., None])
    closest = np.argmin(np.where(semi, dist_an, np.inf), axis=-1)
    farthest = np.argmax(np.where(valid, dist_an, -np.inf), axis=-1)
    return np.where(semi.any(axis=-1), closest, farthest)


def mining_distances(z_anchor, z_pool, a, b, config: LossConfig, mode: str):
    """Distance matrix (anchors x pool) used for mining.

    ``z_*`` are sample tensors ``(n, K, d)``. With the ``paired`` estimator,
    sample k of the anchor is compared with sample k of the candidate only.
    """
    if mode == "l2-vipe":
        diff = z_anchor[:, None, 0, :] - z_pool[None, :, 0, :]
        return np.sum(diff * diff, axis=-1)
    out = np.empty((len(z_anchor), len(z_pool)))
    if config.mining_estimator == "paired" or z_anchor.shape[1] == 1:
        # |x - y|^2 = |x|^2 + |y|^2 - 2 x.y, one (n x m) product per sample index
        za = np.ascontiguousarray(z_anchor.transpose(1, 0, 2))
        zp = np.ascontiguousarray(z_pool.transpose(1, 0, 2))
        sq = -2.0 * (za @ zp.transpose(0, 2, 1))
        sq += np.einsum("knd,knd->kn", za, za)[:, :, None]
        sq += np.einsum("kmd,kmd->km", zp, zp)[:, None, :]
        u = np.sqrt(np.maximum(sq, 0.0, out=sq), out=sq)
        # in place: u <- sigmoid(-a * r + b)
        u *= -a
        u += b
        special.expit(u, out=u)
        if config.prob_bounds == "rescale":  # affine, so it commutes with the mean
            s_mean = u.sum(axis=0) / u.shape[0]
            out[:], _ = _apply_bounds(s_mean, config.bounds)
        else:
            q, _ = _apply_bounds(u, config.bounds)
            out[:] = q.sum(axis=0) / u.shape[0]
    else:
        for s in range(len(z_anchor)):
            out[s] = matching_prob_samples(z_anchor[s][None], z_pool, a, b, config.bounds)
    with np.errstate(divide="ignore"):
        return -np.log(out)


# ---------------------------------------------------------------------------
# Differentiable pair kernel used in training


def _pair_kernel(zi, zj, a, b, bounds):
    """Bounded K x K MC probability per pair plus what backward needs."""
    diff = zi[:, :, None, :] - zj[:, None, :, :]
    r = _norm(diff)
    s = sigmoid(-a * r + b)
    q, dq = _apply_bounds(s, bounds)
    return q.sum(axis=(1, 2)) / (r.shape[1] * r.shape[2]), (diff, r, s, dq)


def _pair_kernel_backward(g, saved, a):
    diff, r, s, dq = saved
    kk = r.shape[1] * r.shape[2]
    gu = (g / kk)[:, None, None] * dq * s * (1.0 - s)
    grad_a = float(np.sum(gu * -r))
    grad_b = float(np.sum(gu))
    coef = np.divide(gu * -a, r, out=np.zeros_like(r), where=r > 0)
    gdiff = coef[..., None] * diff
    return gdiff.sum(axis=2), -gdiff.sum(axis=1), grad_a, grad_b


@dataclass
class LossTerms:
    total: float
    ratio: float
    positive: float
    prior: float
    active_triplets: int
    semi_hard_fraction: float

    def as_dict(self):
        return {
            "loss_total": self.total, "loss_ratio": self.ratio,
            "loss_positive": self.positive, "loss_prior": self.prior,
            "active_triplets": self.active_triplets, "semi_hard_fraction": self.semi_hard_fraction,
        }


def embedding_loss(dist: EmbeddingDistribution, eps: np.ndarray, nonmatch: np.ndarray,
                   a: float, b: float, config: LossConfig, mode: str = "pr-vipe",
                   with_grads: bool = True, negatives: np.ndarray | None = None):
    """Mine negatives and evaluate the weighted loss on a batch of 2N embeddings.

    ``dist`` stacks N anchors followed by their N positives; ``eps`` holds
    the reparameterization noise ``(2N, K, d)``; ``nonmatch`` is the
    ``(N, 2N)`` mask of candidates whose 3D pose does not match the anchor.
    Passing ``negatives`` skips mining and evaluates those triplets instead.

    Returns ``(terms, negatives, grads)``; ``grads`` is ``None`` unless
    requested, else a dict with ``mean``, ``variance``, ``log_a`` and ``b``.
    """
    n = len(dist) // 2
    mean, var = dist.mean, dist.variance
    if mode == "pr-vipe":
        z = samples_from(mean, var, eps)
    else:
        z = mean[:, None, :]
    anchors = np.arange(n)
    positives = anchors + n

    d_mine = mining_distances(z[:n], z, a, b, config, mode)
    if negatives is None:
        neg = semi_hard_select(d_mine, d_mine[anchors, positives], nonmatch)
    else:
        neg = np.asarray(negatives, dtype=np.int64)
    semi_frac = float(np.mean(d_mine[anchors, neg] > d_mine[anchors, positives]))

    grad_z = np.zeros_like(z)
    grad_log_a = grad_b = 0.0
    if mode == "l2-vipe":
        dp = z[anchors, 0] - z[positives, 0]
        dn = z[anchors, 0] - z[neg, 0]
        d_pos, d_neg = np.sum(dp * dp, axis=1), np.sum(dn * dn, axis=1)
        hinge = d_pos - d_neg + config.margin
        active = hinge > 0
        l_ratio, l_pos, l_prior = float(np.sum(hinge[active])), float(np.sum(d_pos)), 0.0
        if with_grads:
            c_pos = (config.w_ratio * active + config.w_positive)[:, None] * 2 * dp
            c_neg = (config.w_ratio * active)[:, None] * 2 * dn
            np.add.at(grad_z[:, 0], anchors, c_pos - c_neg)
            np.add.at(grad_z[:, 0], positives, -c_pos)
            np.add.at(grad_z[:, 0], neg, c_neg)
    else:
        bounds = config.bounds
        p_pos, saved_pos = _pair_kernel(z[anchors], z[positives], a, b, bounds)
        p_neg, saved_neg = _pair_kernel(z[anchors], z[neg], a, b, bounds)
        d_pos, d_neg = -np.log(p_pos), -np.log(p_neg)
        hinge = d_pos - d_neg + config.margin
        active = hinge > 0
        l_ratio, l_pos = float(np.sum(hinge[active])), float(np.sum(d_pos))
        l_prior = gaussian_prior_loss(dist[:n]) if mode == "pr-vipe" else 0.0
        if with_grads:
            g_pos = -(config.w_ratio * active + config.w_positive) / p_pos
            g_neg = config.w_ratio * active / p_neg
            gi, gj, ga, gb = _pair_kernel_backward(g_pos, saved_pos, a)
            np.add.at(grad_z, anchors, gi)
            np.add.at(grad_z, positives, gj)
            grad_log_a, grad_b = ga, gb
            gi, gj, ga, gb = _pair_kernel_backward(g_neg, saved_neg, a)
            np.add.at(grad_z, anchors, gi)
            np.add.at(grad_z, neg, gj)
            grad_log_a = (grad_log_a + ga) * a
            grad_b += gb

    total = config.w_ratio * l_ratio + config.w_positive * l_pos + config.w_prior * l_prior
    terms = LossTerms(float(total), l_ratio, l_pos, l_prior, int(active.sum()), semi_frac)
    if not with_grads:
        return terms, neg, None

    grad_mean = grad_z.sum(axis=1)
    grad_var = np.zeros_like(var)
    if mode == "pr-vipe":
        grad_var = np.sum(grad_z * eps, axis=1) / (2.0 * np.sqrt(var))
        grad_mean[:n] += config.w_prior * mean[:n]
        grad_var[:n] += config.w_prior * 0.5 * (1.0 - 1.0 / var[:n])
    grads = {"mean": grad_mean, "variance": grad_var, "log_a": grad_log_a, "b": grad_b}
    return terms, neg, grads


def samples_from(mean, var, eps):
    return mean[:, None, :] + np.sqrt(var)[:, None, :] * eps


def split_rng(rng: np.random.Generator):
    """Independent (dropout, sampling) generators derived from ``rng``."""
    dropout, sampling = rng.spawn(2)
    return dropout, sampling


def loss_and_grads(batch, params: ModelParams, config: LossConfig, rng: np.random.Generator,
                   nonmatch: np.ndarray | None = None, with_grads: bool = True,
                   negatives: np.ndarray | None = None):
    """Full training objective on a :class:`TripletBatch`.

    Train-mode forward of anchors and positives together, reparameterized
    sampling, semi-hard mining, weighted loss and, if requested, gradients
    for every weight. Returns ``(terms, grads, aux)``.
    """
    mode = params.config.mode
    dropout_rng, sample_rng = split_rng(rng)
    x = np.concatenate([batch.anchors, batch.positives])
    dist, cache = forward(x, params, "train", dropout_rng, keep_cache=with_grads)
    k = config.samples if mode == "pr-vipe" else 1
    eps = sample_rng.standard_normal((len(x), k, params.config.dim))
    if nonmatch is None:
        nonmatch = batch.nonmatch_mask(config.kappa)
    terms, neg, g = embedding_loss(dist, eps, nonmatch, params.a, params.b, config, mode, with_grads, negatives)
    if not with_grads:
        return terms, None, {"negatives": neg, "stats": cache["stats"]}
    grads = backward(g["mean"], g["variance"], cache, params, g["log_a"], g["b"])
    if mode == "l2-vipe":
        grads["log_a"][...] = 0.0
        grads["b"][...] = 0.0
    return terms, grads, {"negatives": neg, "stats": cache["stats"], "dist": dist}


def total_loss(batch, params: ModelParams, config: LossConfig, rng: np.random.Generator,
               nonmatch: np.ndarray | None = None, negatives: np.ndarray | None = None):
    """Scalar training loss and its per-term breakdown."""
    terms, _, _ = loss_and_grads(batch, params, config, rng, nonmatch, with_grads=False, negatives=negatives)
    return terms.total, terms.as_dict()
