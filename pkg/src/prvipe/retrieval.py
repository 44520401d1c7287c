"""Cross-view retrieval, Hit@k, confidence analysis, variance/ambiguity analysis and PCA."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path

import numpy as np
from scipy import stats

from .data import Dataset
from .errors import DegenerateCovariance, EmptyIndex, InsufficientData
from .losses import matching_prob_samples
from .model import EmbeddingDistribution, ModelParams, embed
from .skeleton import distinct_poses, pairwise_np_mpjpe

HIT_KS = (1, 10, 20)
EVAL_SEED = 20200


@dataclass
class EmbeddingIndex:
    """Embedded records of one or more cameras, ready to be searched."""

    ids: np.ndarray
    camera_ids: np.ndarray
    dist: EmbeddingDistribution
    poses3d: np.ndarray
    samples: np.ndarray
    scorer: str = "pr-vipe"
    a: float = 1.0
    b: float = 0.0

    def __post_init__(self):
        self.ids = np.asarray(self.ids)
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("index ids must be unique")

    def __len__(self):
        return len(self.ids)

    def subset(self, mask) -> "EmbeddingIndex":
        mask = np.asarray(mask)
        return EmbeddingIndex(self.ids[mask], self.camera_ids[mask], self.dist[mask], self.poses3d[mask],
                              self.samples[mask], self.scorer, self.a, self.b)


def build_index(dataset: Dataset, params: ModelParams, samples: int = 20, seed: int = EVAL_SEED,
                ids=None, use_ema: bool = True) -> EmbeddingIndex:
    """Embed every record; sampling noise comes from a fixed evaluation seed.

    ``ids`` default to the record positions in the dataset.
    """
    dist = embed(dataset.pose2d, params, use_ema=use_ema)
    mode = params.config.mode
    k = samples if mode == "pr-vipe" else 1
    eps = np.random.default_rng(seed).standard_normal((len(dataset), k, params.config.dim))
    z = dist.mean[:, None, :] + np.sqrt(dist.variance)[:, None, :] * eps
    ids = np.arange(len(dataset)) if ids is None else np.asarray(ids)
    source = params.ema_view() if use_ema else params
    return EmbeddingIndex(ids, dataset.camera_ids, dist, dataset.pose3d, z, mode, source.a, source.b)


def confidence_matrix(queries: EmbeddingIndex, index: EmbeddingIndex, chunk: int = 32) -> np.ndarray:
    """Retrieval confidence for every (query, candidate) pair.

    Probabilistic embeddings use the unbounded sampled matching probability;
    point embeddings use the point probability, and L2-normalized
    embeddings use the negative squared distance (only the order matters).
    """
    out = np.empty((len(queries), len(index)))
    for s in range(0, len(queries), chunk):
        zq = queries.samples[s:s + chunk, None]
        if index.scorer == "l2-vipe":
            diff = zq[:, :, 0, :] - index.samples[None, :, 0, :]
            out[s:s + chunk] = -np.sum(diff * diff, axis=-1)
        else:
            out[s:s + chunk] = matching_prob_samples(zq, index.samples[None], index.a, index.b)
    return out


@dataclass
class RetrievalResult:
    query_id: int
    retrieved_ids: np.ndarray
    confidences: np.ndarray
    np_mpjpe: np.ndarray
    ks: tuple = HIT_KS
    kappa: float = 0.1

    @property
    def hits(self) -> dict[int, bool]:
        return {k: bool(np.any(self.np_mpjpe[:k] <= self.kappa)) for k in self.ks}


def rank_candidates(confidence: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Order by descending confidence; equal confidences by ascending id."""
    return np.lexsort((ids, -confidence))


def retrieve_topk(query: int, queries: EmbeddingIndex, index: EmbeddingIndex, k: int = 20,
                  kappa: float = 0.1, confidence: np.ndarray | None = None) -> RetrievalResult:
    """Top-``k`` candidates for query row ``query``; candidates from its own camera are skipped."""
    keep = index.camera_ids != queries.camera_ids[query]
    if not np.any(keep):
        raise EmptyIndex("no candidate outside the query's camera")
    if confidence is None:
        confidence = confidence_matrix(queries.subset([query]), index)[0]
    conf, ids = confidence[keep], index.ids[keep]
    order = rank_candidates(conf, ids)[:k]
    cand_poses = index.poses3d[keep][order]
    err = pairwise_np_mpjpe(queries.poses3d[query][None], cand_poses)[0]
    return RetrievalResult(int(queries.ids[query]), ids[order], conf[order], err, kappa=kappa)


def hit_at_k(results, kappa: float = 0.1, k: int = 1) -> float:
    """Percentage of queries whose top-k holds at least one 3D match within ``kappa``."""
    results = list(results)
    if not results:
        return 0.0
    return 100.0 * float(np.mean([np.any(r.np_mpjpe[:k] <= kappa) for r in results]))


def _retrieve_all(queries: EmbeddingIndex, index: EmbeddingIndex, k: int, kappa: float):
    conf = confidence_matrix(queries, index)
    results = []
    for q in range(len(queries)):
        results.append(retrieve_topk(q, queries, index, k, kappa, conf[q]))
    return results


@dataclass
class CrossViewReport:
    pairs: dict[tuple[str, str], dict[int, float]]
    average: dict[int, float]
    results: list = field(default_factory=list, repr=False)

    def rows(self):
        for (qc, ic), hits in sorted(self.pairs.items()):
            yield [qc, ic] + [hits[k] for k in sorted(hits)]


def evaluate_cross_view(dataset: Dataset, params: ModelParams | None = None, kappa: float = 0.1,
                        ks=HIT_KS, samples: int = 20, seed: int = EVAL_SEED,
                        keep_results: bool = True, index: EmbeddingIndex | None = None) -> CrossViewReport:
    """Hit@k for every ordered (query camera, index camera) pair and their macro average."""
    cameras = dataset.cameras
    if len(cameras) < 2:
        raise InsufficientData("cross-view evaluation needs at least two cameras")
    if index is None:
        index = build_index(dataset, params, samples, seed)
    depth = max(ks)
    pairs, all_results = {}, []
    for qc, ic in permutations(cameras, 2):
        queries = index.subset(index.camera_ids == qc)
        targets = index.subset(index.camera_ids == ic)
        results = _retrieve_all(queries, targets, depth, kappa)
        pairs[(qc, ic)] = {k: hit_at_k(results, kappa, k) for k in ks}
        all_results.extend(results)
    average = {k: float(np.mean([p[k] for p in pairs.values()])) for k in ks}
    return CrossViewReport(pairs, average, all_results if keep_results else [])


def keypoint_index(dataset: Dataset) -> EmbeddingIndex:
    """Index whose 'embedding' is the raw normalized 2D pose (for the keypoint baseline)."""
    flat = dataset.pose2d.reshape(len(dataset), -1)
    dist = EmbeddingDistribution(flat, np.zeros_like(flat))
    return EmbeddingIndex(np.arange(len(dataset)), dataset.camera_ids, dist, dataset.pose3d,
                          flat[:, None, :], "keypoints")


def evaluate_keypoint_baseline(dataset: Dataset, kappa: float = 0.1, ks=HIT_KS) -> CrossViewReport:
    """Cross-view retrieval by Procrustes-aligned 2D keypoint distance (2D NP-MPJPE)."""
    cameras = dataset.cameras
    if len(cameras) < 2:
        raise InsufficientData("cross-view evaluation needs at least two cameras")
    index = keypoint_index(dataset)
    depth = max(ks)
    pairs, all_results = {}, []
    for qc, ic in permutations(cameras, 2):
        qi, ii = dataset.camera_indices(qc), dataset.camera_indices(ic)
        conf = -pairwise_np_mpjpe(dataset.pose2d[qi], dataset.pose2d[ii], two_d=True)
        queries, targets = index.subset(qi), index.subset(ii)
        results = [retrieve_topk(q, queries, targets, depth, kappa, conf[q]) for q in range(len(qi))]
        pairs[(qc, ic)] = {k: hit_at_k(results, kappa, k) for k in ks}
        all_results.extend(results)
    average = {k: float(np.mean([p[k] for p in pairs.values()])) for k in ks}
    return CrossViewReport(pairs, average, all_results)


# ---------------------------------------------------------------------------
# Confidence and ambiguity


@dataclass
class ConfidenceBins:
    edges: np.ndarray
    counts: np.ndarray
    accuracy: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def nonempty(self) -> np.ndarray:
        return self.counts > 0

    def spearman(self):
        """Rank correlation between bin center and accuracy over nonempty bins."""
        keep = self.nonempty
        return stats.spearmanr(self.centers[keep], self.accuracy[keep])


def confidence_accuracy_bins(results, bins=10, kappa: float | None = None, rank: int = 0) -> ConfidenceBins:
    """Bucket the rank-``rank`` retrieval of every query by confidence and measure accuracy.

    ``bins`` is a count (equal-width bins spanning the observed confidences)
    or an explicit array of edges.
    """
    results = list(results)
    conf = np.array([r.confidences[rank] for r in results])
    correct = np.array([r.np_mpjpe[rank] <= (r.kappa if kappa is None else kappa) for r in results])
    if np.ndim(bins) == 0:
        lo, hi = (conf.min(), conf.max()) if len(conf) else (0.0, 1.0)
        if hi <= lo:
            hi = lo + 1e-12
        edges = np.linspace(lo, hi, int(bins) + 1)
    else:
        edges = np.asarray(bins, dtype=np.float64)
    which = np.clip(np.searchsorted(edges, conf, side="right") - 1, 0, len(edges) - 2)
    counts = np.bincount(which, minlength=len(edges) - 1)
    hits = np.bincount(which, weights=correct.astype(float), minlength=len(edges) - 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        accuracy = np.where(counts > 0, 100.0 * hits / np.maximum(counts, 1), np.nan)
    return ConfidenceBins(edges, counts, accuracy)


@dataclass
class AmbiguityReport:
    indices: np.ndarray
    mean_variance: np.ndarray
    neighbor_np_mpjpe: np.ndarray

    def spearman(self):
        return stats.spearmanr(self.mean_variance, self.neighbor_np_mpjpe)


def ambiguity_variance_report(poses2d: np.ndarray, poses3d: np.ndarray, params: ModelParams,
                              n_neighbors: int = 10, min_gap: float = 0.1) -> AmbiguityReport:
    """Per 2D pose: mean predicted variance and mean 2D NP-MPJPE to its nearest 2D neighbours.

    Poses are first filtered to distinct 3D poses; rows are sorted by mean variance.
    """
    keep = distinct_poses(poses3d, min_gap)
    if len(keep) < 2:
        raise InsufficientData("need at least two distinct 3D poses")
    x = poses2d[keep]
    variance = embed(x, params).variance.mean(axis=1)
    d2 = pairwise_np_mpjpe(x, two_d=True)
    np.fill_diagonal(d2, np.inf)
    n = min(n_neighbors, len(keep) - 1)
    neighbor = np.sort(d2, axis=1)[:, :n].mean(axis=1)
    order = np.argsort(variance, kind="stable")
    return AmbiguityReport(keep[order], variance[order], neighbor[order])


# ---------------------------------------------------------------------------
# PCA


@dataclass
class PcaResult:
    coords: np.ndarray
    components: np.ndarray
    explained: np.ndarray
    center: np.ndarray


def pca_project(embeddings: np.ndarray, dims: int = 2) -> PcaResult:
    """Project centered data onto the top ``dims`` eigenvectors of its covariance."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2 or not 1 <= dims <= x.shape[1]:
        raise DegenerateCovariance("need at least two points and 1 <= dims <= feature size")
    center = x.mean(axis=0)
    xc = x - center
    cov = xc.T @ xc / (len(x) - 1)
    evals, evecs = np.linalg.eigh(cov)
    evals, evecs = evals[::-1], evecs[:, ::-1]
    total = evals.sum()
    if total <= 1e-15 * max(1.0, np.abs(x).max() ** 2):
        raise DegenerateCovariance("embeddings have (near) zero variance")
    comps = evecs[:, :dims]
    # deterministic sign: largest-magnitude entry of each component is positive
    signs = np.sign(comps[np.argmax(np.abs(comps), axis=0), np.arange(dims)])
    comps = comps * np.where(signs == 0, 1.0, signs)
    return PcaResult(xc @ comps, comps.T, np.clip(evals[:dims], 0, None) / total, center)


# ---------------------------------------------------------------------------
# CSV output


def write_results_csv(results, path, ks=HIT_KS) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_id", "rank", "retrieved_id", "confidence", "np_mpjpe"] + [f"hit@{k}" for k in ks])
        for r in results:
            hits = r.hits
            for rank, (rid, conf, err) in enumerate(zip(r.retrieved_ids, r.confidences, r.np_mpjpe), start=1):
                writer.writerow([r.query_id, rank, int(rid), repr(float(conf)), repr(float(err))]
                                + [int(hits.get(k, False)) for k in ks])
    return path


def write_hits_csv(report: CrossViewReport, path, ks=HIT_KS) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_camera", "index_camera"] + [f"hit@{k}" for k in ks])
        for (qc, ic), hits in sorted(report.pairs.items()):
            writer.writerow([qc, ic] + [hits[k] for k in ks])
        writer.writerow(["average", "average"] + [report.average[k] for k in ks])
    return path


def write_pca_csv(result: PcaResult, path, ids=None, labels=None) -> Path:
    path = Path(path)
    n, dims = result.coords.shape
    ids = np.arange(n) if ids is None else ids
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id"] + [f"pc{i + 1}" for i in range(dims)] + (["label"] if labels is not None else []))
        for i in range(n):
            row = [ids[i]] + [repr(float(v)) for v in result.coords[i]]
            if labels is not None:
                row.append(labels[i])
            writer.writerow(row)
    return path
