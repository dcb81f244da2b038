"""Kinematic skeleton extraction from clustered trajectories.

Every cluster pair gets a putative hinge: the point both clusters' rigid
motions keep (approximately) fixed, found in closed form.  A plausibility
cost mixes that motion residual with the hinge's distance to both clusters,
and the minimum spanning tree over those costs is the skeleton.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .clustering import FeatureCluster
from .tracking import TrajectorySet


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return -((-np.asarray(a) + math.pi) % (2 * math.pi) - math.pi)


@dataclass
class SimilarityTransform:
    scale: float
    angle: float
    translation: np.ndarray  # (2,)
    degenerate: bool = False

    @property
    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        return self.scale * np.array([[c, -s], [s, c]])

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts) @ self.matrix.T + self.translation

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, 0.0, np.zeros(2))


def fit_similarity(src: np.ndarray, dst: np.ndarray) -> SimilarityTransform:
    """Least-squares rotation+translation+isotropic scale mapping src to dst."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 2:
        raise ValueError("need >= 2 points")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    x = src - mu_s
    y = dst - mu_d
    h = x.T @ y
    u, sv, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    corr = np.diag([1.0, d])
    r = vt.T @ corr @ u.T
    var = (x * x).sum()
    degenerate = False
    if var <= 1e-12:
        return SimilarityTransform(1.0, 0.0, mu_d - mu_s, degenerate=True)
    # collinearity: residual spread off the dominant axis below half a pixel
    if math.sqrt(max(sv[-1], 0.0) / len(src)) < 0.5 and len(src) >= 2:
        ax = u[:, 0]
        ay = vt[0]
        if (x @ ax) @ (y @ ay) < 0:
            ay = -ay
        angle = math.atan2(ay[1], ay[0]) - math.atan2(ax[1], ax[0])
        px, py = x @ ax, y @ ay
        scale = float(py @ px / (px @ px)) if px @ px > 0 else 1.0
        t = SimilarityTransform(abs(scale), angle, np.zeros(2), degenerate=True)
        t.translation = mu_d - t.matrix @ mu_s
        return t
    scale = float((corr @ np.diag(sv)).trace() / var)
    angle = math.atan2(r[1, 0], r[0, 0])
    translation = mu_d - scale * (r @ mu_s)
    return SimilarityTransform(scale, angle, translation, degenerate=degenerate)


def rigid_transform_series(cluster: FeatureCluster, tset: TrajectorySet
                           ) -> List[Optional[SimilarityTransform]]:
    """Per-frame transform mapping member positions at t=0 to each frame.

    Frames with fewer than 2 members valid in both frames yield None.
    """
    ids = cluster.member_ids
    pos = tset.positions[ids]
    val = tset.valid[ids]
    base_t = 0 if val[:, 0].sum() >= 2 else int(np.argmax(val.sum(axis=0)))
    out: List[Optional[SimilarityTransform]] = []
    for t in range(tset.n_frames):
        both = val[:, base_t] & val[:, t]
        if both.sum() < 2:
            out.append(None)
            continue
        out.append(fit_similarity(pos[both, base_t], pos[both, t]))
    return out


@dataclass
class JointCandidate:
    i: int
    j: int
    position: np.ndarray       # world position at t=0
    residual: float            # RMS motion inconsistency, px
    s_i: float                 # distance of the hinge to cluster i's features
    s_j: float
    degenerate: bool = False


def estimate_joint_position(i: int, j: int,
                            transforms_i: Sequence[Optional[SimilarityTransform]],
                            transforms_j: Sequence[Optional[SimilarityTransform]],
                            cluster_i: FeatureCluster, cluster_j: FeatureCluster,
                            tset: TrajectorySet) -> JointCandidate:
    """Closed-form common fixed point of two rigid transform series."""
    mats, vecs = [], []
    for ti, tj in zip(transforms_i, transforms_j):
        if ti is None or tj is None:
            continue
        mats.append(ti.matrix - tj.matrix)
        vecs.append(ti.translation - tj.translation)
    if len(mats) < 3:
        raise ValueError("need >= 3 common frames")
    a = np.stack(mats)
    b = np.stack(vecs)
    normal = np.einsum("tij,tik->jk", a, a)
    rhs = -np.einsum("tij,ti->j", a, b)
    evals = np.linalg.eigvalsh(normal)
    if evals[0] < 1e-9 * max(evals[-1], 1.0):
        return JointCandidate(i, j, np.full(2, np.nan), float("inf"),
                              float("inf"), float("inf"), degenerate=True)
    x = np.linalg.solve(normal, rhs)
    residual = math.sqrt(float(((a @ x + b) ** 2).sum(axis=1).mean()))
    s_i = _min_feature_distance(x, cluster_i, tset)
    s_j = _min_feature_distance(x, cluster_j, tset)
    return JointCandidate(i, j, x, residual, s_i, s_j)


def _min_feature_distance(x: np.ndarray, cluster: FeatureCluster,
                          tset: TrajectorySet) -> float:
    ids = cluster.member_ids
    val = tset.valid[ids]
    frame = 0 if val[:, 0].any() else int(np.argmax(val.any(axis=0)))
    pts = tset.positions[ids][val[:, frame], frame]
    return float(np.linalg.norm(pts - x, axis=1).min())


def joint_cost(c: JointCandidate, a_plus: float = 20.0, a_minus: float = 100.0,
               tau_s: float = 25.0) -> float:
    if c.degenerate:
        return float("inf")
    a = a_plus if (c.s_i <= tau_s and c.s_j <= tau_s) else a_minus
    return c.residual + a * (c.s_i + c.s_j)


# ---------------------------------------------------------------------------
# spanning tree

@dataclass
class SkeletonEdge:
    parent: int
    child: int
    candidate: JointCandidate


@dataclass
class KinematicSkeleton:
    n_nodes: int
    root: int
    edges: List[SkeletonEdge]           # BFS order, parent closer to root
    orientation: np.ndarray             # (N_G, N_L) limb orientation series
    rotation_rel: np.ndarray            # (N_G, N_L) rotation since t*, continuous
    joint_angles: List[np.ndarray]      # per edge, child minus parent orientation

    def adjacency(self) -> set:
        return {(min(e.parent, e.child), max(e.parent, e.child)) for e in self.edges}

    def children(self, node: int) -> List[int]:
        return [e.child for e in self.edges if e.parent == node]

    def validate_tree(self) -> None:
        if len(self.edges) != self.n_nodes - 1:
            raise ValueError("skeleton not spanning")
        seen = {self.root}
        for e in self.edges:
            if e.parent not in seen or e.child in seen:
                raise ValueError("edges not in root-first tree order")
            seen.add(e.child)
        if len(seen) != self.n_nodes:
            raise ValueError("skeleton not connected")


def minimum_spanning_tree(n: int, costs: Dict[Tuple[int, int], float]
                          ) -> List[Tuple[int, int]]:
    """Kruskal over an explicit cost table keyed by (i, j) with i < j."""
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    chosen = []
    for (i, j), cost in sorted(costs.items(), key=lambda kv: (kv[1], kv[0])):
        if not math.isfinite(cost):
            continue
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[rj] = ri
            chosen.append((i, j))
    if len(chosen) != n - 1:
        raise ValueError("skeleton not spanning")
    return chosen


def spanning_tree_skeleton(clusters: List[FeatureCluster],
                           candidates: Dict[Tuple[int, int], JointCandidate],
                           tset: TrajectorySet,
                           transforms: Optional[List[List[Optional[SimilarityTransform]]]] = None
                           ) -> KinematicSkeleton:
    """Minimum spanning tree over joint costs, rooted at the largest cluster."""
    n = len(clusters)
    if n < 2:
        raise ValueError("need >= 2 clusters")
    costs = {k: joint_cost(c) for k, c in candidates.items()}
    tree_edges = minimum_spanning_tree(n, costs)

    weights = [c.mask_area if c.mask_area is not None else float(c.size) for c in clusters]
    root = int(np.argmax(weights))

    neighbors: Dict[int, List[int]] = {i: [] for i in range(n)}
    for i, j in tree_edges:
        neighbors[i].append(j)
        neighbors[j].append(i)
    edges: List[SkeletonEdge] = []
    seen = {root}
    frontier = [root]
    while frontier:
        nxt = []
        for p in frontier:
            for c in sorted(neighbors[p]):
                if c in seen:
                    continue
                seen.add(c)
                key = (min(p, c), max(p, c))
                edges.append(SkeletonEdge(parent=p, child=c, candidate=candidates[key]))
                nxt.append(c)
        frontier = nxt

    if transforms is None:
        transforms = [rigid_transform_series(c, tset) for c in clusters]
    orientation, rotation_rel = orientation_series(clusters, transforms, tset.t_star)
    joint_angles = [wrap_angle(orientation[e.child] - orientation[e.parent]) for e in edges]

    skel = KinematicSkeleton(n_nodes=n, root=root, edges=edges,
                             orientation=orientation, rotation_rel=rotation_rel,
                             joint_angles=joint_angles)
    skel.validate_tree()
    return skel


def orientation_series(clusters: List[FeatureCluster],
                       transforms: List[List[Optional[SimilarityTransform]]],
                       t_star: int) -> Tuple[np.ndarray, np.ndarray]:
    """Continuous per-limb orientation: t* principal axis + rigid rotation."""
    n = len(clusters)
    n_frames = len(transforms[0])
    orient = np.full((n, n_frames), np.nan)
    rot_rel = np.full((n, n_frames), np.nan)
    for k, (cluster, series) in enumerate(zip(clusters, transforms)):
        angles = np.array([t.angle if t is not None else np.nan for t in series])
        ok = ~np.isnan(angles)
        if not ok.any():
            continue
        unwrapped = np.where(ok, angles, 0.0)
        unwrapped[ok] = np.unwrap(angles[ok])
        base = cluster.orientation[t_star]
        if np.isnan(base):
            base = 0.0
        ref = unwrapped[t_star] if ok[t_star] else unwrapped[ok][0]
        rot_rel[k, ok] = unwrapped[ok] - ref
        orient[k, ok] = base + rot_rel[k, ok]
    return orient, rot_rel


def angular_stats(series: Sequence[float]) -> Tuple[float, float, float, float]:
    """(circular mean, lower limit, upper limit, center) of an angle series.

    Limits come from the unwrapped series, the center is their midpoint
    wrapped back to (-pi, pi].
    """
    arr = np.asarray([a for a in np.ravel(series) if not np.isnan(a)], dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty angle series")
    mean = math.atan2(float(np.sin(arr).sum()), float(np.cos(arr).sum()))
    unwrapped = np.unwrap(arr)
    lo, hi = float(unwrapped.min()), float(unwrapped.max())
    center = float(wrap_angle(0.5 * (lo + hi)))
    return mean, lo, hi, center
