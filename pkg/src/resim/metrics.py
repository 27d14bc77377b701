"""Reconstruction metrics: truncated Chamfer distance, depth RMSE, score
ranking and object-size histograms."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud

DIMENSIONS = ("length", "width", "height")


def _points(x) -> np.ndarray:
    pts = x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)
    return np.asarray(pts, dtype=np.float64).reshape(-1, 3)


class NearestNeighborIndex:
    """Balanced k-d tree over a point set."""

    def __init__(self, cloud):
        self.points = _points(cloud)
        if len(self.points) == 0:
            raise ValueError("cannot index an empty point set")
        self._tree = cKDTree(self.points, balanced_tree=True)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries):
        """``(distances, indices)`` of the nearest indexed point per query."""
        q = _points(queries)
        d, i = self._tree.query(q, k=1)
        return np.asarray(d, dtype=np.float64), np.asarray(i, dtype=np.int64)


@dataclass(frozen=True)
class CdResult:
    forward_term: float
    backward_term: float
    total: float
    truncation_fraction: float


def truncated_mean(sq: np.ndarray, fraction: float) -> float:
    """Mean after dropping the ``ceil((1 - fraction) * n)`` largest values."""
    n = len(sq)
    drop = int(math.ceil((1.0 - fraction) * n - 1e-9))
    drop = min(max(drop, 0), n - 1)
    if drop == 0:
        return float(sq.mean())
    kept = np.partition(sq, n - drop - 1)[: n - drop]
    return float(np.sort(kept).sum() / len(kept))


def chamfer(g_hat, g, truncation_fraction: float = 0.97) -> CdResult:
    """Symmetric mean squared nearest-neighbour distance, truncated per direction."""
    if not 0.0 < truncation_fraction <= 1.0:
        raise ValueError("truncation_fraction must lie in (0, 1]")
    a, b = _points(g_hat), _points(g)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs two non-empty point sets")
    da, _ = NearestNeighborIndex(b).query(a)
    db, _ = NearestNeighborIndex(a).query(b)
    fwd = truncated_mean(da * da, truncation_fraction)
    bwd = truncated_mean(db * db, truncation_fraction)
    return CdResult(fwd, bwd, fwd + bwd, truncation_fraction)


def _residuals(rendered, measured) -> np.ndarray:
    r = np.asarray(rendered, dtype=np.float64).ravel()
    m = np.asarray(measured, dtype=np.float64).ravel()
    if r.shape != m.shape:
        raise ValueError(f"length mismatch: {r.size} rendered vs {m.size} measured depths")
    if r.size == 0:
        raise ValueError("need at least one depth pair")
    return r - m


def rmse_depth(rendered, measured) -> float:
    d = _residuals(rendered, measured)
    return float(np.sqrt(np.mean(d * d)))


def rmse_depth_unsquared(rendered, measured) -> float:
    """``sqrt(mean(D_hat - D))`` with the residual left unsquared; NaN when the mean is negative."""
    m = float(np.mean(_residuals(rendered, measured)))
    return math.sqrt(m) if m >= 0 else float("nan")


def rank_sequences(scores: Sequence[tuple[str, float, float]]) -> list[tuple[str, float, float]]:
    """Ascending by CD, then RMSE, then id. Entries are ``(id, rmse, cd)``."""
    rows = [(str(i), float(r), float(c)) for i, r, c in scores]
    for i, r, c in rows:
        if not (math.isfinite(r) and math.isfinite(c)):
            raise ValueError(f"non-finite score for {i}")
    return sorted(rows, key=lambda e: (e[2], e[1], e[0]))


# --- size distributions -----------------------------------------------------


@dataclass(frozen=True)
class SizeHistogram:
    # (class, dimension) -> (edges, counts)
    bins: Mapping[tuple[str, str], tuple[np.ndarray, np.ndarray]]
    bin_width: float

    def __post_init__(self):
        for key, (edges, counts) in self.bins.items():
            if len(edges) != len(counts) + 1 or np.any(np.diff(edges) <= 0):
                raise ValueError(f"invalid bins for {key}")

    def keys(self):
        return sorted(self.bins)

    def counts(self, cls: str, dim: str) -> np.ndarray:
        return self.bins[(cls, dim)][1]

    def edges(self, cls: str, dim: str) -> np.ndarray:
        return self.bins[(cls, dim)][0]


def _bin_range(lo: float, hi: float, bw: float) -> tuple[int, int]:
    first = math.floor(lo / bw + 1e-9)
    n = max(1, math.ceil(hi / bw - 1e-9) - first)
    return first, n


def _histogram(x: np.ndarray, bw: float) -> tuple[np.ndarray, np.ndarray]:
    first, n = _bin_range(float(x.min()), float(x.max()), bw)
    edges = (first + np.arange(n + 1)) * bw
    idx = np.floor(x / bw + 1e-9).astype(np.int64) - first
    counts = np.bincount(np.clip(idx, 0, n - 1), minlength=n)
    return edges, counts.astype(np.int64)


def size_distribution(labels: Sequence, bin_width: float) -> SizeHistogram:
    """Per-class, per-dimension histograms on edges at multiples of ``bin_width``.

    Bins are right-open except the last, which also takes the maximum.
    """
    if not bin_width > 0:
        raise ValueError("bin_width must be positive")
    groups: dict[str, list] = {}
    for lab in labels:
        groups.setdefault(lab.class_name, []).append(lab.size)
    bins = {}
    for cls, sizes in groups.items():
        arr = np.asarray(sizes, dtype=np.float64)
        for k, dim in enumerate(DIMENSIONS):
            bins[(cls, dim)] = _histogram(arr[:, k], bin_width)
    return SizeHistogram(bins, float(bin_width))


def _rebin(edges: np.ndarray, counts: np.ndarray, first: int, n: int, bw: float) -> np.ndarray:
    out = np.zeros(n)
    start = int(round(edges[0] / bw)) - first
    out[start:start + len(counts)] = counts
    return out


def distribution_divergence(a: SizeHistogram, b: SizeHistogram) -> float:
    """``1 - intersection`` of normalised counts, averaged over (class, dimension).

    Keys present in only one histogram count as fully disjoint.
    """
    if not math.isclose(a.bin_width, b.bin_width):
        raise ValueError("histograms must share a bin width")
    keys = sorted(set(a.bins) | set(b.bins))
    if not keys:
        return 0.0
    bw = a.bin_width
    total = 0.0
    for key in keys:
        if key not in a.bins or key not in b.bins:
            total += 1.0
            continue
        (ea, ca), (eb, cb) = a.bins[key], b.bins[key]
        first = min(int(round(ea[0] / bw)), int(round(eb[0] / bw)))
        last = max(int(round(ea[-1] / bw)), int(round(eb[-1] / bw)))
        pa = _rebin(ea, ca, first, last - first, bw)
        pb = _rebin(eb, cb, first, last - first, bw)
        pa /= pa.sum()
        pb /= pb.sum()
        total += 1.0 - float(np.minimum(pa, pb).sum())
    return min(max(total / len(keys), 0.0), 1.0)


# --- tables -----------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def score_table(rows: Sequence[tuple[str, float, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sequence_id", "rmse", "cd"])
    for i, r, c in rows:
        w.writerow([i, _fmt(r), _fmt(c)])
    return buf.getvalue()


def histogram_table(hist: SizeHistogram, label: str | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = ["class", "dimension", "bin_lo", "bin_hi", "count"]
    w.writerow(head if label is None else ["source"] + head)
    for cls, dim in hist.keys():
        edges, counts = hist.bins[(cls, dim)]
        for j, c in enumerate(counts):
            row = [cls, dim, _fmt(edges[j]), _fmt(edges[j + 1]), int(c)]
            w.writerow(row if label is None else [label] + row)
    return buf.getvalue()
