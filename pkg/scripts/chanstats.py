"""
Channel-similarity matrices, the centred matrix R_bar and the CD ratio
"""
import hashlib
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import yaml
from scipy.spatial.distance import pdist, squareform

from errors import ContractError, NumericError

logger = logging.getLogger(__name__)

METRICS = ("pearson", "cosine", "euclid", "dtw")
DTW_MAX_CHANNELS = 100


@dataclass(frozen=True)
class CorrStats:
    """
    Per-dataset similarity matrices.

    R is the raw metric (signed correlation / cosine, or the distance matrix for
    euclid and dtw); R_abs is the similarity in [0, 1]; R_bar = R_abs - mean(R_abs)
    over all C*C entries.
    """
    metric: str
    R: np.ndarray
    R_abs: np.ndarray
    R_bar: np.ndarray
    channel_count: int
    source_rows: int
    warnings: Tuple[str, ...] = field(default=())

    @property
    def r_abs(self) -> float:
        return cd_ratio(self.R_abs)

    @property
    def r_bar(self) -> float:
        return cd_ratio(self.R_bar)


def _as_matrix(data) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ContractError(f"expected a T x C matrix, got shape {data.shape}")
    if not np.isfinite(data).all():
        raise NumericError("data contains NaN or inf; interpolate gaps first")
    return data


def _finalize(metric: str, R: np.ndarray, R_abs: np.ndarray, rows: int, warnings) -> CorrStats:
    R = (R + R.T) / 2.0
    R_abs = np.clip((R_abs + R_abs.T) / 2.0, 0.0, 1.0)
    np.fill_diagonal(R_abs, 1.0)
    R_bar = R_abs - R_abs.mean()
    for arr in (R, R_abs, R_bar):
        arr.setflags(write=False)
    return CorrStats(metric, R, R_abs, R_bar, R.shape[0], rows, tuple(warnings))


def pearson_corr(data) -> CorrStats:
    """Pearson correlation of every channel pair over all rows"""
    data = _as_matrix(data)
    rows, channels = data.shape
    if rows < 2:
        raise ContractError(f"pearson_corr needs at least 2 rows, got {rows}")

    warnings = []
    constant = np.ptp(data, axis=0) == 0
    centered = data - data.mean(axis=0)
    norms = np.sqrt((centered ** 2).sum(axis=0))
    norms[constant] = 1.0
    R = (centered.T @ centered) / np.outer(norms, norms)
    R = np.clip((R + R.T) / 2.0, -1.0, 1.0)
    for c in np.flatnonzero(constant):
        R[c, :] = 0.0
        R[:, c] = 0.0
        msg = f"channel {c} is constant; its correlations are set to 0"
        logger.warning(msg)
        warnings.append(msg)
    np.fill_diagonal(R, 1.0)
    return _finalize("pearson", R, np.abs(R), rows, warnings)


def cosine_sim(data) -> CorrStats:
    """Absolute cosine similarity between channel vectors"""
    data = _as_matrix(data)
    rows, _ = data.shape
    warnings = []
    norms = np.sqrt((data ** 2).sum(axis=0))
    zero = norms == 0
    norms[zero] = 1.0
    R = (data.T @ data) / np.outer(norms, norms)
    R = np.clip((R + R.T) / 2.0, -1.0, 1.0)
    for c in np.flatnonzero(zero):
        R[c, :] = 0.0
        R[:, c] = 0.0
        msg = f"channel {c} is all zeros; its cosine similarities are set to 0"
        logger.warning(msg)
        warnings.append(msg)
    np.fill_diagonal(R, 1.0)
    return _finalize("cosine", R, np.abs(R), rows, warnings)


def distance_to_similarity(D: np.ndarray) -> Tuple[np.ndarray, Optional[str]]:
    """
    Min-max normalise off-diagonal distances to [0, 1] and flip them into similarities.

    The diagonal is excluded from the min-max and forced to 1.
    """
    D = np.asarray(D, dtype=np.float64)
    channels = D.shape[0]
    off = ~np.eye(channels, dtype=bool)
    lo, hi = D[off].min(), D[off].max()
    warning = None
    if hi == lo:
        S = np.full_like(D, 0.5)
        warning = "all off-diagonal distances are equal; similarities set to 0.5"
        logger.warning(warning)
    else:
        S = 1.0 - (D - lo) / (hi - lo)
    np.fill_diagonal(S, 1.0)
    return S, warning


def _from_distances(metric: str, D: np.ndarray, rows: int) -> CorrStats:
    S, warning = distance_to_similarity(D)
    return _finalize(metric, D, S, rows, [warning] if warning else [])


def euclid_sim(data) -> CorrStats:
    data = _as_matrix(data)
    rows, channels = data.shape
    if channels < 2:
        raise ContractError("euclid_sim needs at least 2 channels for min-max scaling")
    D = squareform(pdist(data.T, metric="euclidean"))
    return _from_distances("euclid", D, rows)


def dtw(x, y) -> float:
    """
    Dynamic time warping cost with squared local cost and steps (i-1, j), (i, j-1), (i-1, j-1).

    The accumulated-cost table is filled one anti-diagonal at a time.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    n, m = len(x), len(y)
    if n == 0 or m == 0:
        raise ContractError("dtw needs two non-empty series")

    cost = (x[:, None] - y[None, :]) ** 2
    D = np.full((n + 1, m + 1), np.inf)
    D[0, 0] = 0.0
    for k in range(2, n + m + 1):
        i = np.arange(max(1, k - m), min(n, k - 1) + 1)
        j = k - i
        best = np.minimum(np.minimum(D[i - 1, j - 1], D[i - 1, j]), D[i, j - 1])
        D[i, j] = cost[i - 1, j - 1] + best
    return float(D[n, m])


def dtw_sim(data) -> CorrStats:
    data = _as_matrix(data)
    rows, channels = data.shape
    if channels < 2:
        raise ContractError("dtw_sim needs at least 2 channels for min-max scaling")
    if channels > DTW_MAX_CHANNELS:
        raise ContractError(
            f"dtw_sim is limited to {DTW_MAX_CHANNELS} channels, got {channels}")
    D = np.zeros((channels, channels))
    for a in range(channels):
        for b in range(a + 1, channels):
            D[a, b] = D[b, a] = dtw(data[:, a], data[:, b])
    return _from_distances("dtw", D, rows)


METRIC_FUNCS: Dict[str, Callable[[np.ndarray], CorrStats]] = {
    "pearson": pearson_corr,
    "cosine": cosine_sim,
    "euclid": euclid_sim,
    "dtw": dtw_sim,
}


def compute_stats(data, metric: str = "pearson") -> CorrStats:
    if metric not in METRIC_FUNCS:
        raise ContractError(f"unknown metric {metric!r}; choose from {', '.join(METRICS)}")
    return METRIC_FUNCS[metric](data)


def stats_from_matrix(metric: str, R, source_rows: int) -> CorrStats:
    """Rebuild CorrStats from a stored raw matrix"""
    R = np.array(R, dtype=np.float64)
    if metric in ("euclid", "dtw"):
        return _from_distances(metric, R, source_rows)
    return _finalize(metric, R, np.abs(R), source_rows, [])


def cd_ratio(M) -> float:
    """Mean of the off-diagonal entries: 0 for the identity, 1 for all-ones"""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ContractError(f"cd_ratio needs a square matrix, got {M.shape}")
    channels = M.shape[0]
    if channels < 2:
        raise ContractError("cd_ratio needs at least 2 channels")
    if not np.isfinite(M).all():
        raise NumericError("cd_ratio: matrix has non-finite entries")
    off = ~np.eye(channels, dtype=bool)
    return float(M[off].mean())


def split_hash(data) -> str:
    """Identity of a training split: shape plus raw float64 bytes"""
    data = np.ascontiguousarray(data, dtype=np.float64)
    digest = hashlib.sha256(str(data.shape).encode())
    digest.update(data.tobytes())
    return digest.hexdigest()[:16]


class CorrCache:
    """
    Sidecar YAML cache of raw similarity matrices, one record per (dataset, metric).

    A record is only reused when its split hash matches the current training split.
    """

    def __init__(self, path: str):
        self.path = os.path.expanduser(path)
        self._records: Dict[str, Dict] = {}
        if os.path.exists(self.path):
            with open(self.path, "r") as f:
                for record in yaml.safe_load(f) or []:
                    self._records[self._key(record["dataset"], record["metric"])] = record

    @staticmethod
    def _key(dataset: str, metric: str) -> str:
        return f"{dataset}/{metric}"

    def get(self, dataset: str, metric: str, digest: str) -> Optional[CorrStats]:
        record = self._records.get(self._key(dataset, metric))
        if record is None or record["split_hash"] != digest:
            return None
        return stats_from_matrix(metric, record["R"], record["source_rows"])

    def put(self, dataset: str, stats: CorrStats, digest: str) -> None:
        self._records[self._key(dataset, stats.metric)] = {
            "dataset": dataset,
            "metric": stats.metric,
            "channels": stats.channel_count,
            "source_rows": stats.source_rows,
            "split_hash": digest,
            "R": np.asarray(stats.R).tolist(),
        }
        self.save()

    def save(self) -> None:
        directory = os.path.dirname(self.path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        records = [self._records[k] for k in sorted(self._records)]
        with open(self.path, "w") as f:
            yaml.safe_dump(records, f, sort_keys=True, default_flow_style=None)


def train_split_stats(
    train_values,
    metric: str = "pearson",
    dataset: Optional[str] = None,
    cache: Optional[CorrCache] = None,
) -> CorrStats:
    """Similarity stats of a training split, reusing the cache when the split is unchanged"""
    digest = split_hash(train_values)
    if cache is not None and dataset:
        hit = cache.get(dataset, metric, digest)
        if hit is not None:
            logger.debug("correlation cache hit for %s/%s", dataset, metric)
            return hit
    stats = compute_stats(train_values, metric)
    if cache is not None and dataset:
        cache.put(dataset, stats, digest)
    return stats
