"""Reconstruction and set-level generative metrics for point clouds.

Conventions: Chamfer distance sums the two directed means of *squared*
nearest-neighbour distances; EMD is the *mean* Euclidean cost of an optimal
perfect matching; JSD uses natural logs over a voxel occupancy histogram.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .core import Rng
from .errors import DegenerateInputError, ParameterError

log = logging.getLogger(__name__)


@dataclass
class MetricReport:
    cd: float = math.nan
    emd: float = math.nan
    jsd: float = math.nan
    mmd_cd: float = math.nan
    mmd_emd: float = math.nan
    cov_cd: float = math.nan
    cov_emd: float = math.nan
    nna_cd: float = math.nan
    nna_emd: float = math.nan
    f1: float = math.nan

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


# ---------------------------------------------------------------------------
# nearest neighbours


def sqdist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """All pairwise squared distances, computed coordinate-wise (no expansion trick)."""
    d = np.zeros((len(A), len(B)))
    for k in range(A.shape[1]):
        diff = A[:, k][:, None] - B[:, k][None, :]
        d += diff * diff
    return d


def nearest_sq_brute(A: np.ndarray, B: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """For each row of A, squared distance to its nearest row of B."""
    out = np.empty(len(A))
    for s in range(0, len(A), chunk):
        out[s:s + chunk] = sqdist(A[s:s + chunk], B).min(axis=1)
    return out


def nearest_sq(A: np.ndarray, B: np.ndarray, method: str = "auto") -> np.ndarray:
    """Nearest squared distances; the k-d tree path re-evaluates the brute-force formula."""
    if method == "brute" or (method == "auto" and len(A) * len(B) <= 65536):
        return nearest_sq_brute(A, B)
    # query a couple of candidates so ties in float rounding resolve to the true minimum
    k = min(2, len(B))
    _, idx = cKDTree(B).query(A, k=k)
    idx = idx.reshape(len(A), k)
    cand = B[idx]  # (n, k, 3)
    d = np.zeros(idx.shape)
    for c in range(A.shape[1]):
        diff = A[:, c][:, None] - cand[:, :, c]
        d += diff * diff
    return d.min(axis=1)


def chamfer(A: np.ndarray, B: np.ndarray, method: str = "auto") -> float:
    if len(A) == 0 or len(B) == 0:
        raise ParameterError("chamfer needs nonempty clouds")
    return float(nearest_sq(A, B, method).mean() + nearest_sq(B, A, method).mean())


def f1_score(A: np.ndarray, B: np.ndarray, tau: float = 1e-3, method: str = "auto") -> float:
    """F1 of precision (A near B) and recall (B near A); ``tau`` bounds squared distance."""
    if not tau > 0:
        raise ParameterError("tau must be positive")
    precision = float(np.mean(nearest_sq(A, B, method) < tau))
    recall = float(np.mean(nearest_sq(B, A, method) < tau))
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# earth mover's distance


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost perfect matching on a square matrix; returns column per row.

    Shortest augmenting path with row/column potentials, O(n^3); the inner scan
    over columns is vectorized.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise ParameterError(f"cost matrix must be square, got {cost.shape}")
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row (1-based) matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    C = np.zeros((n + 1, n + 1))
    C[1:, 1:] = cost
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = C[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, np.inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assign = np.empty(n, dtype=np.int64)
    assign[p[1:] - 1] = np.arange(n)
    return assign


def auction(cost: np.ndarray, eps_final: float | None = None, scaling: float = 5.0):
    """Epsilon-scaling auction for the minimum-cost assignment.

    Returns ``(assignment, eps_final)``. The matching's total cost exceeds the
    optimum by at most ``n * eps_final``. Bids are placed by all unassigned
    rows at once (Jacobi variant); each phase divides epsilon by ``scaling``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise ParameterError(f"cost matrix must be square, got {cost.shape}")
    if n == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    spread = float(cost.max() - cost.min())
    if eps_final is None:
        eps_final = max(spread, 1e-12) * 1e-4 / n
    benefit = -cost
    prices = np.zeros(n)
    eps = max(spread / 4.0, eps_final)
    while True:
        owner = np.full(n, -1, dtype=np.int64)  # column -> row
        assign = np.full(n, -1, dtype=np.int64)  # row -> column
        while True:
            bidders = np.flatnonzero(assign < 0)
            if len(bidders) == 0:
                break
            values = benefit[bidders] - prices
            if n == 1:
                best = np.zeros(len(bidders), dtype=np.int64)
                gain = np.full(len(bidders), eps)
            else:
                top2 = np.argpartition(-values, 1, axis=1)[:, :2]
                v0 = values[np.arange(len(bidders)), top2[:, 0]]
                v1 = values[np.arange(len(bidders)), top2[:, 1]]
                swap = v1 > v0
                best = np.where(swap, top2[:, 1], top2[:, 0])
                first = np.maximum(v0, v1)
                second = np.minimum(v0, v1)
                gain = first - second + eps
            bids = prices[best] + gain
            # highest bid per column wins; ties go to the lowest bidder index
            order = np.lexsort((bidders, -bids, best))
            cols_sorted = best[order]
            lead = np.ones(len(order), dtype=bool)
            lead[1:] = cols_sorted[1:] != cols_sorted[:-1]
            win_rows = bidders[order][lead]
            win_cols = cols_sorted[lead]
            prev = owner[win_cols]
            evicted = prev[prev >= 0]
            assign[evicted] = -1
            owner[win_cols] = win_rows
            assign[win_rows] = win_cols
            prices[win_cols] = bids[order][lead]
        if eps <= eps_final:
            break
        eps = max(eps / scaling, eps_final)
    return assign, eps_final


def emd(A: np.ndarray, B: np.ndarray, mode: str = "exact") -> float:
    """Mean matched Euclidean distance under an optimal bijection between A and B."""
    if len(A) != len(B):
        raise ParameterError(f"emd needs equal sizes, got {len(A)} and {len(B)}")
    if len(A) == 0:
        raise ParameterError("emd needs nonempty clouds")
    cost = np.sqrt(sqdist(A, B))
    if mode == "exact":
        assign = hungarian(cost)
    elif mode == "approx":
        assign, _ = auction(cost)
    else:
        raise ParameterError(f"unknown emd mode {mode!r}")
    return float(cost[np.arange(len(A)), assign].mean())


def emd_brute(A: np.ndarray, B: np.ndarray) -> float:
    """Enumerate all n! matchings; only for tiny n."""
    n = len(A)
    cost = np.sqrt(sqdist(A, B))
    perms = np.array(list(itertools.permutations(range(n))))
    totals = cost[np.arange(n)[None, :], perms].sum(axis=1)
    return float(totals.min() / n)


# ---------------------------------------------------------------------------
# Jensen-Shannon divergence over voxelized marginals


@dataclass(frozen=True)
class VoxelGrid:
    resolution: int = 28
    lo: float = -0.5
    hi: float = 0.5

    def __post_init__(self):
        if self.resolution < 2:
            raise ParameterError("voxel grid resolution must be >= 2")
        if not self.hi > self.lo:
            raise ParameterError("voxel grid bounds are empty")

    def histogram(self, clouds: Sequence[np.ndarray]) -> np.ndarray:
        """Normalized occupancy counts; out-of-bounds points clamp to boundary cells."""
        pts = np.concatenate([np.asarray(c).reshape(-1, 3) for c in clouds])
        inside = np.all((pts >= self.lo) & (pts <= self.hi), axis=1)
        if not inside.any():
            raise DegenerateInputError("every point lies outside the voxel grid")
        outside = int(len(pts) - inside.sum())
        if outside:
            log.warning("%d points outside the voxel grid were clamped", outside)
        r = self.resolution
        idx = np.floor((pts - self.lo) / (self.hi - self.lo) * r).astype(np.int64)
        idx = np.clip(idx, 0, r - 1)
        flat = (idx[:, 0] * r + idx[:, 1]) * r + idx[:, 2]
        counts = np.bincount(flat, minlength=r ** 3).astype(np.float64)
        return counts / counts.sum()


def jsd_hist(P: np.ndarray, Q: np.ndarray) -> float:
    M = 0.5 * (P + Q)

    def kl(a, b):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / b[nz])))

    return 0.5 * kl(P, M) + 0.5 * kl(Q, M)


def jsd(gen: Sequence[np.ndarray], ref: Sequence[np.ndarray], grid: VoxelGrid | None = None) -> float:
    grid = grid or VoxelGrid()
    return jsd_hist(grid.histogram(gen), grid.histogram(ref))


# ---------------------------------------------------------------------------
# set metrics


def _dist_fn(dist: str, emd_mode: str = "exact"):
    if dist == "cd":
        return chamfer
    if dist == "emd":
        return lambda a, b: emd(a, b, emd_mode)
    raise ParameterError(f"unknown distance {dist!r}")


def distance_matrix(X: Sequence[np.ndarray], Y: Sequence[np.ndarray], dist: str = "cd",
                    emd_mode: str = "exact") -> np.ndarray:
    fn = _dist_fn(dist, emd_mode)
    return np.array([[fn(x, y) for y in Y] for x in X], dtype=np.float64).reshape(len(X), len(Y))


def mmd_cov_from_matrix(d_gen_ref: np.ndarray) -> tuple[float, float]:
    """MMD and coverage from a (|gen| x |ref|) distance matrix."""
    mmd = float(d_gen_ref.min(axis=0).mean())
    matched = np.unique(np.argmin(d_gen_ref, axis=1))
    return mmd, len(matched) / d_gen_ref.shape[1]


def mmd_cov(gen, ref, dist: str = "cd", emd_mode: str = "exact") -> tuple[float, float]:
    if len(gen) == 0 or len(ref) == 0:
        raise ParameterError("mmd/cov need nonempty sets")
    return mmd_cov_from_matrix(distance_matrix(gen, ref, dist, emd_mode))


def one_nna_from_matrices(d_gg: np.ndarray, d_rr: np.ndarray, d_gr: np.ndarray) -> float:
    """Leave-one-out 1-NN accuracy; ties go to the lower pooled index (gen first)."""
    n_g = d_gg.shape[0]
    pooled = np.block([[d_gg, d_gr], [d_gr.T, d_rr]]).astype(np.float64)
    np.fill_diagonal(pooled, np.inf)
    labels = np.r_[np.zeros(n_g, bool), np.ones(d_rr.shape[0], bool)]
    nn = np.argmin(pooled, axis=1)
    return float(np.mean(labels[nn] == labels))


def one_nna(gen, ref, dist: str = "cd", emd_mode: str = "exact") -> float:
    if len(gen) != len(ref):
        raise ParameterError(f"1-NNA needs equal set sizes, got {len(gen)} and {len(ref)}")
    if len(gen) == 0:
        raise ParameterError("1-NNA needs nonempty sets")
    d_gg = distance_matrix(gen, gen, dist, emd_mode)
    d_rr = distance_matrix(ref, ref, dist, emd_mode)
    d_gr = distance_matrix(gen, ref, dist, emd_mode)
    return one_nna_from_matrices(d_gg, d_rr, d_gr)


def evaluate_sets(gen, ref, metrics: Sequence[str] = ("cd", "emd", "jsd", "mmd", "cov", "nna", "f1"),
                  grid: VoxelGrid | None = None, emd_mode: str = "exact",
                  tau: float = 1e-3) -> MetricReport:
    """Compute the requested metrics for one generated set against one reference set.

    ``cd``/``emd``/``f1`` pair gen[i] with ref[i] and average (sets must have
    equal size). ``mmd``/``cov``/``nna`` are computed for each distance among
    ``cd`` and ``emd`` that is also requested.
    """
    rep = MetricReport()
    want = set(metrics)
    unknown = want - {"cd", "emd", "jsd", "mmd", "cov", "nna", "f1"}
    if unknown:
        raise ParameterError(f"unknown metrics {sorted(unknown)}")
    paired = len(gen) == len(ref)
    if "cd" in want and paired:
        rep.cd = float(np.mean([chamfer(a, b) for a, b in zip(gen, ref)]))
    if "emd" in want and paired:
        rep.emd = float(np.mean([emd(a, b, emd_mode) for a, b in zip(gen, ref)
                                 if len(a) == len(b)] or [math.nan]))
    if "f1" in want and paired:
        rep.f1 = float(np.mean([f1_score(a, b, tau) for a, b in zip(gen, ref)]))
    if "jsd" in want:
        rep.jsd = jsd(gen, ref, grid)
    for dist in ("cd", "emd"):
        if dist not in want or not want & {"mmd", "cov", "nna"}:
            continue
        d_gr = distance_matrix(gen, ref, dist, emd_mode)
        mmd, cov = mmd_cov_from_matrix(d_gr)
        if "mmd" in want:
            setattr(rep, f"mmd_{dist}", mmd)
        if "cov" in want:
            setattr(rep, f"cov_{dist}", cov)
        if "nna" in want:
            if not paired:
                raise ParameterError("1-NNA needs equal set sizes")
            d_gg = distance_matrix(gen, gen, dist, emd_mode)
            d_rr = distance_matrix(ref, ref, dist, emd_mode)
            setattr(rep, f"nna_{dist}", one_nna_from_matrices(d_gg, d_rr, d_gr))
    return rep


# ---------------------------------------------------------------------------
# two-sample test


def energy_distance(A: np.ndarray, B: np.ndarray) -> float:
    dab = np.sqrt(sqdist(A, B)).mean()
    daa = np.sqrt(sqdist(A, A)).mean()
    dbb = np.sqrt(sqdist(B, B)).mean()
    return float(2 * dab - daa - dbb)


def energy_test(A: np.ndarray, B: np.ndarray, n_perm: int = 200, rng: Rng | None = None) -> float:
    """Permutation p-value for the energy-distance two-sample statistic."""
    rng = rng or Rng(0)
    pooled = np.concatenate([A, B])
    D = np.sqrt(sqdist(pooled, pooled))
    n = len(A)

    def stat(idx_a, idx_b):
        return (2 * D[np.ix_(idx_a, idx_b)].mean() - D[np.ix_(idx_a, idx_a)].mean()
                - D[np.ix_(idx_b, idx_b)].mean())

    all_idx = np.arange(len(pooled))
    observed = stat(all_idx[:n], all_idx[n:])
    hits = 0
    for _ in range(n_perm):
        p = rng.permutation(len(pooled))
        if stat(p[:n], p[n:]) >= observed:
            hits += 1
    return (hits + 1) / (n_perm + 1)
