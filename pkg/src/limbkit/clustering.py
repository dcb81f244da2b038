"""Grouping trajectories into coherently moving limb candidates.

Pairwise distances combine gap-variance and velocity-direction terms, feed a
locally scaled affinity matrix, and recursive normalized-cut bipartition with
a boundary-variance-modulated stopping rule segments the set.  Statistical
outlier removal and merging of barely articulating cluster pairs clean up the
oversegmented result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from .config import PipelineConfig
from .tracking import Trajectory, TrajectorySet


@dataclass
class TrajectoryDistanceParams:
    alpha: float = 0.01
    velocity_eps: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")


@dataclass
class NcutParams:
    alpha_b: float = 20.0
    beta_b: float = 200.0
    tau_nc: float = 0.35
    min_cluster_size: int = 10
    knn_k: int = 7

    def __post_init__(self):
        if self.beta_b <= 0 or self.tau_nc <= 0 or self.min_cluster_size < 1:
            raise ValueError("invalid NCut parameters")

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> "NcutParams":
        return cls(alpha_b=cfg.ncut_alpha_b, beta_b=cfg.ncut_beta_b,
                   tau_nc=cfg.ncut_tau, min_cluster_size=cfg.min_cluster_size,
                   knn_k=cfg.local_scaling_k)


@dataclass
class FeatureCluster:
    member_ids: np.ndarray        # trajectory indices into the host set
    barycenter: np.ndarray        # (N_L, 2), NaN where no member is valid
    orientation: np.ndarray       # (N_L,), principal-axis angle mod pi, NaN if undefined
    mask_area: Optional[float] = None

    @property
    def size(self) -> int:
        return len(self.member_ids)


def _cluster_stats(tset: TrajectorySet, members: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pos = tset.positions[members]          # (M, T, 2)
    val = tset.valid[members]              # (M, T)
    counts = val.sum(axis=0)
    bary = np.full((tset.n_frames, 2), np.nan)
    orient = np.full(tset.n_frames, np.nan)
    for t in range(tset.n_frames):
        if counts[t] == 0:
            continue
        p = pos[val[:, t], t]
        bary[t] = p.mean(axis=0)
        if len(p) >= 2:
            d = p - bary[t]
            cov = d.T @ d
            if np.abs(cov).max() > 1e-12:
                evals, evecs = np.linalg.eigh(cov)
                v = evecs[:, int(np.argmax(evals))]
                orient[t] = math.atan2(v[1], v[0]) % math.pi
    return bary, orient


def make_cluster(tset: TrajectorySet, members) -> FeatureCluster:
    members = np.asarray(sorted(members), dtype=np.int64)
    bary, orient = _cluster_stats(tset, members)
    return FeatureCluster(member_ids=members, barycenter=bary, orientation=orient)


# ---------------------------------------------------------------------------
# distances

def trajectory_distance(a: Trajectory, b: Trajectory,
                        p: TrajectoryDistanceParams = TrajectoryDistanceParams()) -> float:
    both = a.valid & b.valid
    if both.sum() < 2:
        raise ValueError("need at least 2 co-valid frames")
    gaps = np.linalg.norm(a.positions[both] - b.positions[both], axis=1)
    term1 = p.alpha * float(((gaps - gaps.mean()) ** 2).sum())

    vel_ok = both[:-1] & both[1:]
    va = a.positions[1:] - a.positions[:-1]
    vb = b.positions[1:] - b.positions[:-1]
    term2 = 0.0
    for t in np.nonzero(vel_ok)[0]:
        term2 += 1.0 - _vel_dot(va[t], vb[t], p.velocity_eps)
    return term1 + (1.0 - p.alpha) * term2


def _vel_dot(va: np.ndarray, vb: np.ndarray, eps: float) -> float:
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    still_a, still_b = na < eps, nb < eps
    if still_a and still_b:
        return 1.0
    if still_a or still_b:
        return 0.0
    return float(va @ vb) / (na * nb)


def pairwise_distances(tset: TrajectorySet,
                       p: TrajectoryDistanceParams = TrajectoryDistanceParams()) -> np.ndarray:
    """Full symmetric distance matrix (vectorized over pairs)."""
    pos = np.nan_to_num(tset.positions)
    val = tset.valid
    n, t_n = val.shape
    d = np.zeros((n, n))

    covalid = val[:, None, :] & val[None, :, :]          # (n, n, T)
    diff = pos[:, None, :, :] - pos[None, :, :, :]       # (n, n, T, 2)
    gaps = np.linalg.norm(diff, axis=-1)
    counts = covalid.sum(axis=-1)
    counts_safe = np.maximum(counts, 1)
    mean_gap = (gaps * covalid).sum(axis=-1) / counts_safe
    term1 = ((gaps - mean_gap[..., None]) ** 2 * covalid).sum(axis=-1)

    vel = pos[:, 1:, :] - pos[:, :-1, :]
    speed = np.linalg.norm(vel, axis=-1)
    still = speed < p.velocity_eps
    unit = vel / np.where(still, 1.0, speed)[..., None]
    unit[still] = 0.0
    dots = np.einsum("itc,jtc->ijt", unit, unit)
    both_still = still[:, None, :] & still[None, :, :]
    one_still = still[:, None, :] ^ still[None, :, :]
    dots[both_still] = 1.0
    dots[one_still] = 0.0
    vel_ok = val[:, None, :-1] & val[:, None, 1:] & val[None, :, :-1] & val[None, :, 1:]
    term2 = ((1.0 - dots) * vel_ok).sum(axis=-1)

    d = p.alpha * term1 + (1.0 - p.alpha) * term2
    np.fill_diagonal(d, 0.0)
    return (d + d.T) / 2.0


def affinity_matrix(tset: TrajectorySet, p: TrajectoryDistanceParams = TrajectoryDistanceParams(),
                    k: int = 7, distances: Optional[np.ndarray] = None) -> np.ndarray:
    """Locally scaled affinity exp(-d^2 / (sigma_i sigma_j))."""
    n = tset.n_trajectories
    if n < 2:
        raise ValueError("need at least 2 trajectories")
    d = pairwise_distances(tset, p) if distances is None else distances
    order = np.sort(d + np.diag(np.full(n, np.inf)), axis=1)
    kk = min(k, n - 1)
    sigma = order[:, kk - 1]
    positive = sigma[sigma > 0]
    fallback = positive.min() if len(positive) else 1.0
    sigma = np.where(sigma > 0, sigma, fallback)
    a = np.exp(-(d * d) / np.outer(sigma, sigma))
    np.fill_diagonal(a, 1.0)
    return a


# ---------------------------------------------------------------------------
# normalized cuts

def ncut_value(a: np.ndarray, left_mask: np.ndarray) -> float:
    """Standard NCut of the bipartition given by the boolean mask."""
    right_mask = ~left_mask
    cut = float(a[left_mask][:, right_mask].sum())
    assoc_l = float(a[left_mask].sum())
    assoc_r = float(a[right_mask].sum())
    if assoc_l == 0 or assoc_r == 0:
        return 0.0 if cut == 0 else float("inf")
    return cut / assoc_l + cut / assoc_r


def ncut_bipartition(a: np.ndarray, members: Sequence[int]
                     ) -> Tuple[np.ndarray, np.ndarray, float]:
    """Spectral bipartition of the affinity submatrix over `members`."""
    members = np.asarray(members, dtype=np.int64)
    if len(members) < 2:
        raise ValueError("need at least 2 members")
    sub = a[np.ix_(members, members)]
    off = sub - np.diag(np.diag(sub))
    zero_rows = np.nonzero(off.sum(axis=1) == 0)[0]
    if len(zero_rows):
        lm = np.zeros(len(members), dtype=bool)
        lm[zero_rows[0]] = True
        return members[lm], members[~lm], ncut_value(sub, lm)

    deg = sub.sum(axis=1)
    lap = np.diag(deg) - sub
    _, vecs = scipy.linalg.eigh(lap, np.diag(deg), subset_by_index=[1, 1])
    fiedler = vecs[:, 0]
    lo, hi = fiedler.min(), fiedler.max()
    best_mask, best_val = None, float("inf")
    for tau in np.linspace(lo, hi, 34)[1:-1]:
        lm = fiedler <= tau
        if lm.all() or not lm.any():
            continue
        v = ncut_value(sub, lm)
        if v < best_val:
            best_val, best_mask = v, lm
    if best_mask is None:  # constant eigenvector; fall back to a balanced split
        best_mask = np.zeros(len(members), dtype=bool)
        best_mask[: len(members) // 2] = True
        best_val = ncut_value(sub, best_mask)
    return members[best_mask], members[~best_mask], best_val


def modified_ncut_value(ncut: float, boundary_variance: float, p: NcutParams) -> float:
    return ncut * math.exp(-(boundary_variance - p.alpha_b) / p.beta_b)


def _boundary_variance(d: np.ndarray, left: np.ndarray, right: np.ndarray) -> float:
    vals = d[np.ix_(left, right)].ravel()
    return float(vals.var()) if vals.size else 0.0


def recursive_cluster(tset: TrajectorySet,
                      dist_params: TrajectoryDistanceParams = TrajectoryDistanceParams(),
                      ncut_params: NcutParams = NcutParams()) -> List[FeatureCluster]:
    """Recursive NCut' bipartition down to leaf clusters."""
    if tset.n_trajectories <= ncut_params.min_cluster_size:
        raise ValueError("too few trajectories to cluster")
    d = pairwise_distances(tset, dist_params)
    a = affinity_matrix(tset, dist_params, k=ncut_params.knn_k, distances=d)

    leaves: List[np.ndarray] = []
    stack = [np.arange(tset.n_trajectories, dtype=np.int64)]
    while stack:
        members = stack.pop()
        if len(members) < 2:
            leaves.append(members)
            continue
        left, right, ncut = ncut_bipartition(a, members)
        if min(len(left), len(right)) <= ncut_params.min_cluster_size:
            leaves.append(members)
            continue
        ncut_mod = modified_ncut_value(ncut, _boundary_variance(d, left, right), ncut_params)
        if ncut_mod > ncut_params.tau_nc:
            leaves.append(members)
            continue
        stack.append(left)
        stack.append(right)
    return [make_cluster(tset, m) for m in sorted(leaves, key=lambda m: int(m[0]))]


# ---------------------------------------------------------------------------
# outliers and merging

def remove_outliers(cluster: FeatureCluster, tset: TrajectorySet,
                    dist_params: TrajectoryDistanceParams = TrajectoryDistanceParams()
                    ) -> FeatureCluster:
    """Drop members straying from the cluster medoid by more than 3 MAD."""
    ids = cluster.member_ids
    if len(ids) < 3:
        return cluster
    sub = pairwise_distances(
        TrajectorySet(tset.positions[ids], tset.valid[ids], tset.t_star), dist_params)
    medoid = int(np.argmin(sub.sum(axis=1)))
    dm = sub[medoid]
    med = float(np.median(dm))
    mad = float(np.median(np.abs(dm - med)))
    keep = dm <= med + 3.0 * mad
    keep[medoid] = True
    if keep.all():
        return cluster
    return make_cluster(tset, ids[keep])


def _rotation_series(cluster: FeatureCluster) -> np.ndarray:
    """Principal-axis angle change since the first defined frame (unwrapped)."""
    orient = cluster.orientation
    ok = ~np.isnan(orient)
    out = np.full_like(orient, np.nan)
    if ok.sum() == 0:
        return out
    unwrapped = np.unwrap(orient[ok], period=math.pi)
    out[ok] = unwrapped - unwrapped[0]
    return out


def _mergeable(ci: FeatureCluster, cj: FeatureCluster,
               max_rot: float, max_shift: float) -> bool:
    ri, rj = _rotation_series(ci), _rotation_series(cj)
    both = ~np.isnan(ri) & ~np.isnan(rj)
    if both.sum() < 2:
        return False
    rel_rot = np.abs(ri[both] - rj[both]).max()
    gaps = np.linalg.norm(ci.barycenter - cj.barycenter, axis=1)
    gok = ~np.isnan(gaps)
    if gok.sum() < 2:
        return False
    shift = gaps[gok].max() - gaps[gok].min()
    return rel_rot < max_rot and shift < max_shift


def merge_clusters(clusters: List[FeatureCluster], tset: TrajectorySet,
                   max_rotation_deg: float = 15.0, max_shift_px: float = 10.0
                   ) -> List[FeatureCluster]:
    """Merge cluster pairs that barely articulate; repeat to a fixpoint."""
    max_rot = math.radians(max_rotation_deg)
    current = list(clusters)
    while True:
        n = len(current)
        parent = list(range(n))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        merged_any = False
        for i in range(n):
            for j in range(i + 1, n):
                if _mergeable(current[i], current[j], max_rot, max_shift_px):
                    ri, rj = find(i), find(j)
                    if ri != rj:
                        parent[rj] = ri
                        merged_any = True
        if not merged_any:
            return current
        groups = {}
        for i in range(n):
            groups.setdefault(find(i), []).append(i)
        current = [make_cluster(tset, np.concatenate([current[i].member_ids for i in idxs]))
                   for idxs in groups.values()]
        if len(current) == 1:
            return current


def save_assignments(path, clusters: List[FeatureCluster]) -> None:
    with open(path, "w") as fh:
        for c_id, cluster in enumerate(clusters):
            for f_id in cluster.member_ids:
                fh.write(f"{f_id} {c_id}\n")
