"""Frame distances, DTW alignment, Kendall's tau and nearest-neighbour action classification."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import EmptyIndex, EmptySequence, SequenceTooShort
from .losses import log_matching_prob_samples
from .model import EmbeddingDistribution, ModelParams, embed
from .skeleton import mirror_pose_2d


@dataclass
class FrameSequence:
    """Ordered 2D frames (``(L, 13, 2)``) with optional labels and groundtruth."""

    frames: np.ndarray
    label: str | None = None
    view: str | None = None
    poses3d: np.ndarray | None = None
    source_times: np.ndarray | None = None
    sequence_id: str | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if len(self.frames) < 1:
            raise EmptySequence("a sequence needs at least one frame")

    def __len__(self):
        return len(self.frames)


@dataclass(frozen=True)
class SequenceConfig:
    samples: int = 20
    kernel_size: int = 7
    rate: int = 3
    seed: int = 0
    mirror: bool = True

    @property
    def offsets(self) -> np.ndarray:
        half = self.kernel_size // 2
        return np.arange(-half, half + 1) * self.rate


@dataclass
class AlignmentPath:
    pairs: list[tuple[int, int]]
    costs: np.ndarray
    total: float

    def __len__(self):
        return len(self.pairs)


def frame_noise(n: int, k: int, d: int, seed: int = 0) -> np.ndarray:
    """Sampling noise keyed by frame position, shared by every sequence.

    Keying the noise to (seed, position) rather than to draw order keeps the
    sampled frame distance symmetric and makes mirrored copies of a frame
    use identical noise.
    """
    return np.stack([np.random.default_rng([seed, t]).standard_normal((k, d)) for t in range(n)])


@dataclass
class SequenceEmbedding:
    dist: EmbeddingDistribution
    samples: np.ndarray

    def __len__(self):
        return len(self.dist)


def embed_sequence(seq: FrameSequence, params: ModelParams, config: SequenceConfig = SequenceConfig(),
                   mirrored: bool = False) -> SequenceEmbedding:
    frames = mirror_pose_2d(seq.frames) if mirrored else seq.frames
    dist = embed(frames, params)
    k = config.samples if params.config.probabilistic else 1
    eps = frame_noise(len(frames), k, params.config.dim, config.seed)
    z = dist.mean[:, None, :] + np.sqrt(dist.variance)[:, None, :] * eps
    return SequenceEmbedding(dist, z)


def frame_distance_matrix(emb_a: SequenceEmbedding, emb_b: SequenceEmbedding, a: float, b: float) -> np.ndarray:
    """-log of the sampled matching probability for every frame pair (no averaging)."""
    out = np.empty((len(emb_a), len(emb_b)))
    for i in range(len(emb_a)):
        out[i] = -log_matching_prob_samples(emb_a.samples[i][None], emb_b.samples, a, b)
    return out


def atrous_average(dist: np.ndarray, offsets) -> np.ndarray:
    """Mean of ``dist[i + o, j + o]`` over offsets, indices clamped to the ends."""
    la, lb = dist.shape
    ia, ib = np.arange(la), np.arange(lb)
    out = np.zeros_like(dist)
    for o in offsets:
        ra = np.clip(ia + o, 0, la - 1)
        rb = np.clip(ib + o, 0, lb - 1)
        out += dist[np.ix_(ra, rb)]
    return out / len(offsets)


def _pair_matrix(seq_a, seq_b, params, config, mirror):
    a, b = params.a, params.b
    ea = [embed_sequence(seq_a, params, config)]
    eb = [embed_sequence(seq_b, params, config)]
    if mirror:
        ea.append(embed_sequence(seq_a, params, config, mirrored=True))
        eb.append(embed_sequence(seq_b, params, config, mirrored=True))
    mats = [frame_distance_matrix(x, y, a, b) for x in ea for y in eb]
    return np.minimum.reduce(mats)


def frame_distance_table(seq_a: FrameSequence, seq_b: FrameSequence, params: ModelParams,
                         config: SequenceConfig = SequenceConfig(), mirror: bool = False) -> np.ndarray:
    """Atrous-averaged frame matching distance for every frame pair."""
    return atrous_average(_pair_matrix(seq_a, seq_b, params, config, mirror), config.offsets)


def frame_distance(seq_a: FrameSequence, i: int, seq_b: FrameSequence, j: int, params: ModelParams,
                   config: SequenceConfig = SequenceConfig(), mirror: bool = False) -> float:
    return float(frame_distance_table(seq_a, seq_b, params, config, mirror)[i, j])


def dtw_align_cost(cost: np.ndarray) -> AlignmentPath:
    """Minimum-cost monotone path through a cost matrix.

    Steps are (1,1), (1,0) and (0,1); ties prefer the diagonal, then (1,0).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or 0 in cost.shape:
        raise EmptySequence("cannot align an empty sequence")
    la, lb = cost.shape
    acc = np.full((la + 1, lb + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, la + 1):
        for j in range(1, lb + 1):
            acc[i, j] = cost[i - 1, j - 1] + min(acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1])
    i, j = la, lb
    pairs = []
    while True:
        pairs.append((i - 1, j - 1))
        if i == 1 and j == 1:
            break
        choices = ((acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j), (acc[i, j - 1], i, j - 1))
        best = min(c[0] for c in choices)
        _, i, j = next(c for c in choices if c[0] == best)
    pairs.reverse()
    steps = np.array([cost[p] for p in pairs])
    return AlignmentPath(pairs, steps, float(acc[la, lb]))


def dtw_align(seq_a, seq_b, distance) -> AlignmentPath:
    """Align two sequences given a frame distance (matrix or ``f(i, j)`` callable)."""
    if len(seq_a) == 0 or len(seq_b) == 0:
        raise EmptySequence("cannot align an empty sequence")
    if callable(distance):
        cost = np.array([[distance(i, j) for j in range(len(seq_b))] for i in range(len(seq_a))])
    else:
        cost = np.asarray(distance)
    return dtw_align_cost(cost)


def sequence_distance(seq_a: FrameSequence, seq_b: FrameSequence, params: ModelParams,
                      config: SequenceConfig = SequenceConfig(), mirror: bool = False) -> float:
    """Average frame matching distance along the DTW alignment."""
    path = dtw_align_cost(frame_distance_table(seq_a, seq_b, params, config, mirror))
    return path.total / len(path)


def kendalls_tau_from_embeddings(mean_a: np.ndarray, mean_b: np.ndarray) -> float:
    """Tau of the nearest-neighbour map from frames of ``a`` into ``b``.

    Each frame of ``a`` is matched to its nearest frame of ``b`` by Euclidean
    distance between embedding means (ties to the lower index).
    """
    n = len(mean_a)
    if n < 2:
        raise SequenceTooShort("Kendall's tau needs at least two frames")
    d = np.linalg.norm(mean_a[:, None, :] - mean_b[None, :, :], axis=-1)
    nn = np.argmin(d, axis=1)
    return tau_of_map(nn)


def tau_of_map(nn: np.ndarray) -> float:
    """Kendall's tau-b between frame order and the matched indices ``nn``.

    A constant map has no defined correlation and scores 0.
    """
    nn = np.asarray(nn)
    n = len(nn)
    if n < 2:
        raise SequenceTooShort("Kendall's tau needs at least two frames")
    if np.all(nn == nn[0]):
        return 0.0
    return float(stats.kendalltau(np.arange(n), nn).statistic)


def kendalls_tau(seq_a: FrameSequence, seq_b: FrameSequence, params: ModelParams, mirror: bool = False) -> float:
    """Alignment quality of ``seq_b`` against ``seq_a``; with ``mirror`` the better of b and mirror(b)."""
    mean_a = embed(seq_a.frames, params).mean
    tau = kendalls_tau_from_embeddings(mean_a, embed(seq_b.frames, params).mean)
    if mirror:
        tau = max(tau, kendalls_tau_from_embeddings(mean_a, embed(mirror_pose_2d(seq_b.frames), params).mean))
    return tau


def distance_table(queries, index, params: ModelParams, config: SequenceConfig = SequenceConfig()) -> np.ndarray:
    """Sequence distances (with chirality handling when ``config.mirror``) for all query/index pairs."""
    cache = {}

    def embs(seq):
        key = id(seq)
        if key not in cache:
            e = [embed_sequence(seq, params, config)]
            if config.mirror:
                e.append(embed_sequence(seq, params, config, mirrored=True))
            cache[key] = e
        return cache[key]

    a, b = params.a, params.b
    out = np.empty((len(queries), len(index)))
    for qi, q in enumerate(queries):
        for ii, s in enumerate(index):
            mats = [frame_distance_matrix(x, y, a, b) for x in embs(q) for y in embs(s)]
            table = atrous_average(np.minimum.reduce(mats), config.offsets)
            path = dtw_align_cost(table)
            out[qi, ii] = path.total / len(path)
    return out


def classify_action(query: FrameSequence, index, params: ModelParams,
                    config: SequenceConfig = SequenceConfig()) -> str:
    """Label of the index sequence nearest to ``query`` (first one on ties)."""
    index = list(index)
    if not index:
        raise EmptyIndex("classification index is empty")
    dist = distance_table([query], index, params, config)[0]
    return index[int(np.argmin(dist))].label


def classify_actions(queries, index, params: ModelParams, config: SequenceConfig = SequenceConfig()):
    index = list(index)
    if not index:
        raise EmptyIndex("classification index is empty")
    table = distance_table(queries, index, params, config)
    return [index[int(i)].label for i in np.argmin(table, axis=1)], table
