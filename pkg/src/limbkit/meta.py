"""Consolidating sequence-specific models into a generalizing meta-model.

Each incoming model is aligned to the meta-model (typical-posture
instantiation, shape-only matching, barycenter correspondence), registered
per limb with 2D ICP, and summed into integer shape/color accumulators.
Prototypes are the accumulators divided by the integration count; persistent
color feeds HS histograms for backprojection, and persistently textured
regions grow Gabor grid-graph detectors used for limb pre-detection.
"""

from __future__ import annotations

import base64
import io
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.ndimage as ndi
from scipy.signal import fftconvolve
from scipy.spatial import cKDTree

from . import _kernels
from .config import PipelineConfig
from .imaging import (GaborBank, JetImage, as_image, gaussian_blur,
                      gabor_transform, rgb_to_hsv, thin)
from .limbs import JointInfo, LimbTemplate, PsModel, forward_kinematics_model, rot2
from .matching import (EdgeEvidence, LimbState, MatchConfig, MatchModel,
                       Posture, edge_evidence, match_model_from_ps, match_ps)
from .skeleton import SimilarityTransform, angular_stats, wrap_angle


class AlignmentAmbiguousError(RuntimeError):
    """Raised when limb correspondence is not a bijection."""


# ---------------------------------------------------------------------------
# data model

@dataclass
class GaborPrototype:
    offsets: np.ndarray       # (N, 2) node positions in the limb body frame
    jets: np.ndarray          # (N, B) mean normalized magnitude jets
    etas: np.ndarray          # (N,)
    grid_spacing: int
    valid: bool


@dataclass
class MetaLimb:
    shape_acc: np.ndarray           # int64, sums of uint16 templates
    shape_offset: Tuple[int, int]
    color_acc: np.ndarray           # int64 (h, w, 3)
    mask_count: np.ndarray          # int64 (h, w), aligned-mask hits
    color_offset: Tuple[int, int]
    barycenter: np.ndarray          # meta-frame absolute coordinates
    axis_angle: float
    hs_hist: np.ndarray             # (bins, bins) float64
    orientation_pool: List[float] = field(default_factory=list)
    gray_samples: List[np.ndarray] = field(default_factory=list)
    gabor: Optional[GaborPrototype] = None

    def shape_prototype(self, n_i: int) -> np.ndarray:
        return self.shape_acc / (65535.0 * n_i)

    def color_prototype(self, n_i: int) -> np.ndarray:
        return self.color_acc / float(n_i)

    def color_footprint(self) -> np.ndarray:
        return self.color_acc.sum(axis=2) > 0

    def color_valid(self) -> bool:
        return bool(self.color_footprint().any())

    def theta_typical(self) -> float:
        return angular_stats(self.orientation_pool)[0]

    def body_from_abs(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts) - self.barycenter) @ rot2(self.axis_angle)

    def abs_from_body(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts) @ rot2(self.axis_angle).T + self.barycenter


@dataclass
class MetaModel:
    limbs: List[MetaLimb]
    parents: List[int]
    root: int
    joints: Dict[int, JointInfo]
    flip_enabled: List[bool]
    k_theta_in: float
    k_theta_out: float
    frame_size: Tuple[int, int]
    n_integrated: int = 1
    finalized: bool = False
    skipped_models: int = 0
    provenance: dict = field(default_factory=dict)

    @property
    def n_limbs(self) -> int:
        return len(self.limbs)

    def children(self, i: int) -> List[int]:
        return [c for c, p in enumerate(self.parents) if p == i]

    def root_mean_orientation(self) -> float:
        return self.limbs[self.root].theta_typical()


# ---------------------------------------------------------------------------
# initialization

def init_meta(m0: PsModel, cfg: PipelineConfig = PipelineConfig()) -> MetaModel:
    """Meta model seeded with the first sequence-specific model."""
    limbs = []
    for i, limb in enumerate(m0.limbs):
        hs = np.zeros((cfg.hs_bins, cfg.hs_bins))
        orient = [a for a in m0.orientation_series[i] if not math.isnan(a)]
        ml = MetaLimb(
            shape_acc=limb.shape_q.astype(np.int64),
            shape_offset=tuple(limb.shape_offset),
            color_acc=limb.color.astype(np.int64),
            mask_count=limb.mask.astype(np.int64),
            color_offset=tuple(limb.offset),
            barycenter=limb.barycenter.copy(),
            axis_angle=limb.axis_angle,
            hs_hist=hs,
            orientation_pool=list(orient),
        )
        _seed_histogram(ml, limb.color, limb.mask, cfg)
        ml.gray_samples.append(_gray(limb.color))
        limbs.append(ml)
    joints = {c: JointInfo(parent=j.parent, child=j.child,
                           offset_parent=j.offset_parent.copy(),
                           offset_child=j.offset_child.copy(),
                           angle_mean=j.angle_mean, angle_lo=j.angle_lo,
                           angle_hi=j.angle_hi, angle_center=j.angle_center,
                           angle_series=j.angle_series.copy())
              for c, j in m0.joints.items()}
    return MetaModel(limbs=limbs, parents=list(m0.parents), root=m0.root,
                     joints=joints, flip_enabled=list(m0.flip_enabled),
                     k_theta_in=m0.k_theta_in, k_theta_out=m0.k_theta_out,
                     frame_size=tuple(m0.frame_size),
                     provenance=dict(m0.provenance))


def _gray(color: np.ndarray) -> np.ndarray:
    c = color.astype(np.float64)
    return 0.299 * c[..., 0] + 0.587 * c[..., 1] + 0.114 * c[..., 2]


def _hs_bin_indices(rgb: np.ndarray, bins: int) -> np.ndarray:
    hsv = rgb_to_hsv(rgb)
    hb = np.clip((hsv[..., 0] / 360.0 * bins).astype(np.int64), 0, bins - 1)
    sb = np.clip((hsv[..., 1] * bins).astype(np.int64), 0, bins - 1)
    return hb * bins + sb


def _seed_histogram(ml: MetaLimb, color: np.ndarray, mask: np.ndarray,
                    cfg: PipelineConfig) -> None:
    idx = _hs_bin_indices(color, cfg.hs_bins)[mask]
    np.add.at(ml.hs_hist.ravel(), idx, 1.0)


# ---------------------------------------------------------------------------
# typical-posture instantiation and alignment

def instantiate_typical(model: PsModel) -> Tuple[Dict[int, Tuple[np.ndarray, float]],
                                                 Tuple[int, int]]:
    """Limb states at center angles, root at its mean orientation, centered."""
    rel = {c: j.angle_center for c, j in model.joints.items()}
    states = forward_kinematics_model(model, np.zeros(2), model.mean_orientation(model.root), rel)
    pts_all = []
    for i, limb in enumerate(model.limbs):
        body, _ = limb.match_points()
        pos, ang = states[i]
        pts_all.append(body @ rot2(ang).T + pos)
    allpts = np.concatenate(pts_all)
    lo = allpts.min(axis=0)
    hi = allpts.max(axis=0)
    w = int(math.ceil(hi[0] - lo[0])) + 40
    h = int(math.ceil(hi[1] - lo[1])) + 40
    w, h = max(w, model.frame_size[0]), max(h, model.frame_size[1])
    shift = np.array([w, h]) / 2.0 - (lo + hi) / 2.0
    out = {i: (pos + shift, ang) for i, (pos, ang) in states.items()}
    return out, (w, h)


def project_shapes_to_evidence(model: PsModel,
                               states: Dict[int, Tuple[np.ndarray, float]],
                               canvas: Tuple[int, int], dmax: float) -> EdgeEvidence:
    """Thinned limb shapes rendered straight into an artificial edge image."""
    w, h = canvas
    edges = np.zeros((h, w), dtype=bool)
    orient = np.zeros((h, w))
    for i, limb in enumerate(model.limbs):
        body, phis = limb.match_points()
        pos, ang = states[i]
        pts = np.rint(body @ rot2(ang).T + pos).astype(np.int64)
        ok = (pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)
        edges[pts[ok, 1], pts[ok, 0]] = True
        orient[pts[ok, 1], pts[ok, 0]] = (phis[ok] + ang) % math.pi
    return edge_evidence(edges, orient, dmax)


def _flip_limb_frame(model: PsModel, i: int) -> None:
    """Rotate limb i's body frame by pi (resolves axis-sign disagreement)."""
    model.limbs[i].axis_angle = float(wrap_angle(model.limbs[i].axis_angle + math.pi))
    model.orientation_series[i] = model.orientation_series[i] + math.pi
    for c, j in model.joints.items():
        if j.child == i:
            j.offset_child = -j.offset_child
        if j.parent == i:
            j.offset_parent = -j.offset_parent
    for c, j in model.joints.items():
        if j.child == i or j.parent == i:
            sign = 1.0 if j.child == i else -1.0
            j.angle_series = j.angle_series + sign * math.pi
            mean, lo, hi, center = angular_stats(
                wrap_angle(j.angle_series[0]) + (j.angle_series - j.angle_series[0]))
            j.angle_mean, j.angle_lo, j.angle_hi, j.angle_center = mean, lo, hi, center


def _reindex_model(model: PsModel, meta_from_model: Dict[int, int]) -> PsModel:
    """Permute limbs so model limb meta_from_model[k] lands at index k."""
    n = model.n_limbs
    model_from_meta = {v: k for k, v in meta_from_model.items()}
    perm = [meta_from_model[k] for k in range(n)]       # new index k <- old perm[k]
    new_parents = []
    for k in range(n):
        old = perm[k]
        old_parent = model.parents[old]
        new_parents.append(-1 if old_parent < 0 else model_from_meta[old_parent])
    new_joints = {}
    for old_child, j in model.joints.items():
        c = model_from_meta[old_child]
        p = model_from_meta[j.parent]
        new_joints[c] = JointInfo(parent=p, child=c,
                                  offset_parent=j.offset_parent,
                                  offset_child=j.offset_child,
                                  angle_mean=j.angle_mean, angle_lo=j.angle_lo,
                                  angle_hi=j.angle_hi, angle_center=j.angle_center,
                                  angle_series=j.angle_series)
    return PsModel(limbs=[model.limbs[perm[k]] for k in range(n)],
                   parents=new_parents,
                   root=model_from_meta[model.root],
                   joints=new_joints,
                   orientation_series=model.orientation_series[perm],
                   flip_enabled=[model.flip_enabled[p] for p in perm],
                   k_theta_in=model.k_theta_in, k_theta_out=model.k_theta_out,
                   frame_size=model.frame_size, provenance=model.provenance)


def align_model(meta: MetaModel, model: PsModel,
                cfg: PipelineConfig = PipelineConfig()
                ) -> Tuple[Dict[int, int], PsModel]:
    """Limb correspondence via typical-posture matching, then reindexing.

    Returns (meta_limb -> model_limb map, model reindexed and frame-fixed to
    the meta convention).  Raises AlignmentAmbiguousError when the
    correspondence is not a tree-preserving bijection.
    """
    if model.n_limbs != meta.n_limbs:
        raise ValueError("limb count mismatch")
    states, canvas = instantiate_typical(model)
    ev = project_shapes_to_evidence(model, states, canvas, cfg.chamfer_dmax)
    mcfg = MatchConfig.from_config(
        cfg, scale_grid=(1.0,), use_flips=False,
        root_theta_window=(meta.root_mean_orientation(), 2.5 * 2 * math.pi / cfg.theta_bins))
    posture = match_ps(to_match_model(meta), ev, None, mcfg)

    model_bary = np.array([states[j][0] for j in range(model.n_limbs)])
    meta_from_model: Dict[int, int] = {}
    for k in range(meta.n_limbs):
        bm = np.asarray(posture.states[k].position)
        j = int(np.argmin(np.linalg.norm(model_bary - bm, axis=1)))
        meta_from_model[k] = j
    if len(set(meta_from_model.values())) != meta.n_limbs:
        raise AlignmentAmbiguousError("limb correspondence is not a bijection")

    aligned = _reindex_model(model, meta_from_model)
    adjacency = {(min(c, j.parent), max(c, j.parent)) for c, j in aligned.joints.items()}
    meta_adjacency = {(min(c, j.parent), max(c, j.parent)) for c, j in meta.joints.items()}
    if adjacency != meta_adjacency or aligned.root != meta.root:
        raise AlignmentAmbiguousError("correspondence does not preserve the skeleton")

    # reconcile body-frame axis signs: the instantiated model limb and the
    # matched meta limb should agree in orientation
    inst_states, _ = instantiate_typical(aligned)
    for k in range(meta.n_limbs):
        d = wrap_angle(inst_states[k][1] - posture.states[k].theta)
        if abs(d) > math.pi / 2:
            _flip_limb_frame(aligned, k)
    return meta_from_model, aligned


# ---------------------------------------------------------------------------
# ICP registration

def icp_register(moving: np.ndarray, fixed: np.ndarray, max_iterations: int = 50,
                 tolerance: float = 1e-3) -> Tuple[SimilarityTransform, float, bool]:
    """2D rigid ICP (rotation + translation), nearest-neighbor correspondences.

    Returns (transform, final RMS, converged flag).
    """
    moving = np.asarray(moving, dtype=np.float64)
    fixed = np.asarray(fixed, dtype=np.float64)
    if len(moving) < 3 or len(fixed) < 3:
        raise ValueError("need >= 3 points on both sides")
    tree = cKDTree(fixed)
    cur = moving.copy()
    total_r = np.eye(2)
    total_t = np.zeros(2)
    prev_rms = None
    converged = False
    for _ in range(max_iterations):
        dists, idx = tree.query(cur)
        target = fixed[idx]
        mu_c, mu_t = cur.mean(axis=0), target.mean(axis=0)
        h = (cur - mu_c).T @ (target - mu_t)
        u, _, vt = np.linalg.svd(h)
        d = np.sign(np.linalg.det(vt.T @ u.T))
        r = vt.T @ np.diag([1.0, d]) @ u.T
        t = mu_t - r @ mu_c
        cur = cur @ r.T + t
        total_r = r @ total_r
        total_t = r @ total_t + t
        rms = math.sqrt(float((dists ** 2).mean()))
        if prev_rms is not None and abs(prev_rms - rms) < tolerance:
            converged = True
            break
        prev_rms = rms
    angle = math.atan2(total_r[1, 0], total_r[0, 0])
    return SimilarityTransform(1.0, angle, total_t), prev_rms if prev_rms is not None else rms, converged


def _snap_transform(t: SimilarityTransform, snap_px: float, snap_deg: float
                    ) -> SimilarityTransform:
    ang = math.radians(round(math.degrees(t.angle) / snap_deg) * snap_deg)
    trans = np.round(t.translation / snap_px) * snap_px
    return SimilarityTransform(1.0, ang, trans)


def _compose(a: SimilarityTransform, b: SimilarityTransform) -> SimilarityTransform:
    """a after b."""
    m = a.matrix @ b.matrix
    t = a.matrix @ b.translation + a.translation
    return SimilarityTransform(math.sqrt(abs(np.linalg.det(m))),
                               math.atan2(m[1, 0], m[0, 0]), t)


def _is_identity(t: SimilarityTransform, tol: float = 1e-9) -> bool:
    return (abs(t.angle) < tol and abs(t.scale - 1) < tol
            and np.abs(t.translation).max() < tol)


def _resample(src: np.ndarray, src_offset, dst_shape, dst_offset,
              transform: SimilarityTransform) -> np.ndarray:
    """Bilinear pull-back of src through the (dst <- src) transform."""
    hd, wd = dst_shape
    yy, xx = np.mgrid[0:hd, 0:wd].astype(np.float64)
    pts = np.stack([xx.ravel() + dst_offset[0], yy.ravel() + dst_offset[1]], axis=1)
    inv_m = np.linalg.inv(transform.matrix)
    src_pts = (pts - transform.translation) @ inv_m.T
    sx = src_pts[:, 0] - src_offset[0]
    sy = src_pts[:, 1] - src_offset[1]
    out = ndi.map_coordinates(src.astype(np.float64), [sy, sx], order=1,
                              mode="constant", cval=0.0)
    return out.reshape(hd, wd)


def _shape_support_points(shape_q: np.ndarray, offset) -> np.ndarray:
    ys, xs = np.nonzero(shape_q > shape_q.max() // 2)
    return np.stack([xs + offset[0], ys + offset[1]], axis=1).astype(np.float64)


def limb_base_transform(meta_limb: MetaLimb, limb: LimbTemplate) -> SimilarityTransform:
    """Model-absolute to meta-absolute via the shared body frame."""
    ang = meta_limb.axis_angle - limb.axis_angle
    m = rot2(ang)
    t = meta_limb.barycenter - m @ limb.barycenter
    return SimilarityTransform(1.0, ang, t)


def register_limb(meta: MetaModel, k: int, limb: LimbTemplate,
                  cfg: PipelineConfig = PipelineConfig()) -> SimilarityTransform:
    """Base alignment plus snapped ICP refinement for one limb."""
    ml = meta.limbs[k]
    base = limb_base_transform(ml, limb)
    moving = _shape_support_points(limb.shape_q, limb.shape_offset)
    moving = base.apply(moving)
    fixed = _shape_support_points(ml.shape_acc, ml.shape_offset)
    refined, _, _ = icp_register(moving, fixed, cfg.icp_max_iterations, cfg.icp_tolerance)
    refined = _snap_transform(refined, cfg.icp_snap_px, cfg.icp_snap_deg)
    return base if _is_identity(refined) else _compose(refined, base)


# ---------------------------------------------------------------------------
# accumulation

def accumulate_shape(meta: MetaModel, k: int, limb: LimbTemplate,
                     transform: SimilarityTransform) -> None:
    ml = meta.limbs[k]
    if _is_identity(transform) and \
            limb.shape_q.shape == ml.shape_acc.shape and \
            tuple(limb.shape_offset) == tuple(ml.shape_offset):
        ml.shape_acc += limb.shape_q.astype(np.int64)
        return
    aligned = _resample(limb.shape_q, limb.shape_offset, ml.shape_acc.shape,
                        ml.shape_offset, transform)
    ml.shape_acc += np.round(aligned).astype(np.int64)


def finalize_shape(meta: MetaModel, prune_frac: float = 0.25) -> None:
    """Zero the weakest quarter of the collected votes, per limb."""
    for ml in meta.limbs:
        acc = ml.shape_acc
        ys, xs = np.nonzero(acc)
        if len(ys) == 0:
            continue
        n_prune = int(len(ys) * prune_frac)
        if n_prune == 0:
            continue
        values = acc[ys, xs]
        order = np.lexsort((xs, ys, values))   # weakest first, scan-order ties
        sel = order[:n_prune]
        acc[ys[sel], xs[sel]] = 0


def windowed_correlation_mask(aligned_color: np.ndarray, prototype: np.ndarray,
                              cfg: PipelineConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Persistence mask from HS-histogram windowed correlation.

    Returns (mask, correlation map); pixels outside either support get
    correlation -1 and never enter the mask.
    """
    a_rgb = np.clip(np.round(aligned_color), 0, 255).astype(np.uint8)
    p_rgb = np.clip(np.round(prototype), 0, 255).astype(np.uint8)
    valid = (a_rgb.sum(axis=2) > 0) & (p_rgb.sum(axis=2) > 0)
    ia = _hs_bin_indices(a_rgb, cfg.hs_bins)
    ip = _hs_bin_indices(p_rgb, cfg.hs_bins)
    corr = _kernels.windowed_hist_correlation(ia, ip, valid,
                                              cfg.corr_window // 2,
                                              cfg.hs_bins * cfg.hs_bins)
    return corr > cfg.persistence_threshold, corr


def accumulate_color(meta: MetaModel, k: int, limb: LimbTemplate,
                     transform: SimilarityTransform,
                     cfg: PipelineConfig = PipelineConfig()) -> None:
    """Persistent pixels accumulate, varying pixels reset to zero (hard)."""
    ml = meta.limbs[k]
    identity_case = (_is_identity(transform)
                     and limb.color.shape == ml.color_acc.shape
                     and tuple(limb.offset) == tuple(ml.color_offset))
    if identity_case:
        aligned = limb.color.astype(np.float64)
        aligned_mask = limb.mask.astype(np.float64)
    else:
        aligned = np.stack([_resample(limb.color[..., c], limb.offset,
                                      ml.color_acc.shape[:2], ml.color_offset, transform)
                            for c in range(3)], axis=2)
        aligned_mask = _resample(limb.mask.astype(np.float64), limb.offset,
                                 ml.color_acc.shape[:2], ml.color_offset, transform)
    prototype = ml.color_prototype(meta.n_integrated)
    mask, corr = windowed_correlation_mask(aligned, prototype, cfg)
    aligned_int = np.round(aligned).astype(np.int64)
    ml.color_acc[~mask] = 0
    ml.color_acc[mask] += aligned_int[mask]
    ml.mask_count += (aligned_mask > 0.5).astype(np.int64)
    idx = _hs_bin_indices(np.clip(aligned_int, 0, 255).astype(np.uint8), cfg.hs_bins)
    np.add.at(ml.hs_hist.ravel(), idx[mask], corr[mask])
    ml.gray_samples.append(_gray(np.clip(aligned_int, 0, 255)))


def integrate_model(meta: MetaModel, model: PsModel,
                    cfg: PipelineConfig = PipelineConfig()) -> bool:
    """Align and accumulate one model; returns False if alignment was skipped."""
    if meta.finalized:
        raise RuntimeError("meta model already finalized")
    try:
        _, aligned = align_model(meta, model, cfg)
    except AlignmentAmbiguousError:
        meta.skipped_models += 1
        return False
    transforms = [register_limb(meta, k, aligned.limbs[k], cfg)
                  for k in range(meta.n_limbs)]
    for k in range(meta.n_limbs):
        accumulate_color(meta, k, aligned.limbs[k], transforms[k], cfg)
        accumulate_shape(meta, k, aligned.limbs[k], transforms[k])
        series = aligned.orientation_series[k]
        meta.limbs[k].orientation_pool.extend(a for a in series if not math.isnan(a))
    n = meta.n_integrated
    for c, j in meta.joints.items():
        nj = aligned.joints[c]
        j.offset_parent = (j.offset_parent * n + nj.offset_parent) / (n + 1)
        j.offset_child = (j.offset_child * n + nj.offset_child) / (n + 1)
        j.angle_series = np.concatenate([j.angle_series, nj.angle_series])
        base = wrap_angle(j.angle_series[0])
        mean, lo, hi, center = angular_stats(base + (j.angle_series - j.angle_series[0]))
        j.angle_mean, j.angle_lo, j.angle_hi, j.angle_center = mean, lo, hi, center
    meta.n_integrated += 1
    return True


def finalize_meta(meta: MetaModel, cfg: PipelineConfig = PipelineConfig()) -> MetaModel:
    finalize_shape(meta, cfg.vote_prune_frac)
    for i, ml in enumerate(meta.limbs):
        ml.gabor = learn_gabor_prototype(meta, i, cfg)
    meta.finalized = True
    return meta


def build_meta_model(models: Sequence[PsModel], cfg: PipelineConfig = PipelineConfig()
                     ) -> MetaModel:
    meta = init_meta(models[0], cfg)
    for m in models[1:]:
        integrate_model(meta, m, cfg)
    return finalize_meta(meta, cfg)


# ---------------------------------------------------------------------------
# backprojection and color cue maps

def windowed_backprojection(image: np.ndarray, hist: np.ndarray, window: int,
                            bins: int) -> np.ndarray:
    """Histogram ratio backprojection followed by a box mean; in [0, 1]."""
    peak = hist.max()
    if peak <= 0:
        return np.zeros(image.shape[:2])
    ratio = (hist / peak).ravel()[_hs_bin_indices(image, bins)]
    out = ndi.uniform_filter(ratio, size=window, mode="constant", cval=0.0)
    m = out.max()
    return out / m if m > 0 else out


def build_backprojection(meta: MetaModel, k: int, image: np.ndarray,
                         cfg: PipelineConfig = PipelineConfig()) -> np.ndarray:
    """Thresholded, blurred, normalized backprojection map C_k."""
    ml = meta.limbs[k]
    if not ml.color_valid():
        return np.ones(image.shape[:2])
    raw = windowed_backprojection(image, ml.hs_hist, cfg.backproj_window, cfg.hs_bins)
    peak = raw.max()
    if peak <= 0:
        return np.zeros(image.shape[:2])
    raw = np.where(raw >= cfg.backproj_peak_frac * peak, raw, 0.0)
    out = gaussian_blur(raw, cfg.backproj_blur_sigma)
    m = out.max()
    return out / m if m > 0 else out


def footprint_kernel(meta: MetaModel, k: int, theta: float, scale: float,
                     flip: bool) -> np.ndarray:
    """Binarized color prototype footprint rendered at one state."""
    ml = meta.limbs[k]
    foot = ml.color_footprint()
    ys, xs = np.nonzero(foot)
    if len(ys) == 0:
        raise ValueError("empty color footprint")
    pts = np.stack([xs + ml.color_offset[0], ys + ml.color_offset[1]], axis=1).astype(np.float64)
    body = ml.body_from_abs(pts)
    if flip:
        body[:, 1] = -body[:, 1]
    off = np.rint(scale * (body @ rot2(theta).T)).astype(np.int64)
    r = int(np.abs(off).max()) + 1
    kernel = np.zeros((2 * r + 1, 2 * r + 1))
    np.add.at(kernel, (off[:, 1] + r, off[:, 0] + r), 1.0)
    kernel[kernel > 0] = 1.0
    return kernel


def color_cue_map(c_map: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Mean of the backprojection under the oriented footprint (Swain-style)."""
    total = kernel.sum()
    if total <= 0:
        raise ValueError("empty footprint")
    out = fftconvolve(c_map, kernel[::-1, ::-1], mode="same") / total
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Gabor prototypes

def learn_gabor_prototype(meta: MetaModel, k: int,
                          cfg: PipelineConfig = PipelineConfig()) -> Optional[GaborPrototype]:
    """Mean jets + reliability pruning on an 8 px grid over the limb support."""
    ml = meta.limbs[k]
    samples = ml.gray_samples
    if not samples:
        return None
    support = ml.mask_count >= meta.n_integrated
    if not support.any():
        return None
    h, w = support.shape
    sp = cfg.jet_grid_spacing
    gy, gx = np.mgrid[sp // 2:h:sp, sp // 2:w:sp]
    keep = support[gy, gx]
    nodes_yx = np.stack([gy[keep], gx[keep]], axis=1)
    if len(nodes_yx) == 0:
        return None
    bank = GaborBank(cfg.gabor_scales, cfg.gabor_orientations, cfg.gabor_sigma,
                     cfg.gabor_freq_max)
    per_sample = []
    for gray in samples:
        rgbish = np.repeat(np.clip(gray, 0, 255).astype(np.uint8)[..., None], 3, axis=2)
        jets = gabor_transform(rgbish, bank)
        mags = jets.normalized_magnitudes()
        per_sample.append(mags[nodes_yx[:, 0], nodes_yx[:, 1]])
    stack = np.stack(per_sample)                 # (N_I, nodes, bands)
    mean_jets = stack.mean(axis=0)
    centered = stack - mean_jets[None]
    n_nodes = stack.shape[1]
    etas = np.empty(n_nodes)
    for j in range(n_nodes):
        cov = np.einsum("sb,sc->bc", centered[:, j], centered[:, j]) / stack.shape[0]
        lam = float(np.linalg.eigvalsh(cov)[-1])
        etas[j] = math.inf if lam <= 0 else 1.0 / math.sqrt(lam)
    survivors = etas >= cfg.eta_cut
    if not survivors.any():
        return _invalid_prototype(cfg)
    # largest connected component on the sparse grid graph
    idx_map = {(int(y), int(x)): j for j, (y, x) in enumerate(nodes_yx)}
    parent = list(range(n_nodes))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for j, (y, x) in enumerate(nodes_yx):
        if not survivors[j]:
            continue
        for dy, dx in ((sp, 0), (0, sp)):
            other = idx_map.get((int(y) + dy, int(x) + dx))
            if other is not None and survivors[other]:
                parent[find(j)] = find(other)
    comps: Dict[int, List[int]] = {}
    for j in range(n_nodes):
        if survivors[j]:
            comps.setdefault(find(j), []).append(j)
    best = max(comps.values(), key=len)
    sel = np.array(sorted(best), dtype=np.int64)
    pts = np.stack([nodes_yx[sel, 1] + ml.color_offset[0],
                    nodes_yx[sel, 0] + ml.color_offset[1]], axis=1).astype(np.float64)
    offsets = ml.body_from_abs(pts)
    valid = len(sel) > cfg.node_cut
    return GaborPrototype(offsets=offsets, jets=mean_jets[sel],
                          etas=etas[sel], grid_spacing=sp, valid=valid)


def _invalid_prototype(cfg: PipelineConfig) -> GaborPrototype:
    b = GaborBank(cfg.gabor_scales, cfg.gabor_orientations).n_bands
    return GaborPrototype(offsets=np.zeros((0, 2)), jets=np.zeros((0, b)),
                          etas=np.zeros(0), grid_spacing=cfg.jet_grid_spacing,
                          valid=False)


class GaborCueEngine:
    """Gabor cue maps for one prototype over one query jet image."""

    def __init__(self, prototype: GaborPrototype, jets: JetImage):
        if not prototype.valid:
            raise ValueError("invalid Gabor prototype")
        self.prototype = prototype
        mags = jets.normalized_magnitudes()
        # per-node similarity fields, computed once; (nodes, H, W)
        self.dots = np.tensordot(prototype.jets, mags, axes=([1], [2])).astype(np.float64)
        self.shape = mags.shape[:2]

    def cue_map(self, theta: float, scale: float) -> np.ndarray:
        """1 - mean node similarity; out-of-image projections count 0."""
        h, w = self.shape
        off = np.rint(scale * (self.prototype.offsets @ rot2(theta).T)).astype(np.int64)
        acc = np.zeros((h, w))
        for j in range(len(off)):
            dx, dy = int(off[j, 0]), int(off[j, 1])
            ys0, ys1 = max(0, -dy), min(h, h - dy)
            xs0, xs1 = max(0, -dx), min(w, w - dx)
            if ys0 >= ys1 or xs0 >= xs1:
                continue
            acc[ys0:ys1, xs0:xs1] += self.dots[j, ys0 + dy:ys1 + dy, xs0 + dx:xs1 + dx]
        return 1.0 - acc / len(off)


def jet_similarity(jet_a: np.ndarray, jet_b: np.ndarray) -> float:
    """Dot product of magnitude-normalized jets."""
    na, nb = np.linalg.norm(jet_a), np.linalg.norm(jet_b)
    if na == 0 or nb == 0:
        return 0.0
    return float(jet_a @ jet_b) / (na * nb)


def predetect_limb(engine: GaborCueEngine, theta_typ: float,
                   color_cue_fn=None, cfg: PipelineConfig = PipelineConfig()
                   ) -> Tuple[Tuple[int, int], float, float, np.ndarray]:
    """Scale sweep of the color-augmented detection map.

    Returns ((x, y), theta_typ, scale, best map).  color_cue_fn(theta, scale)
    supplies the matching color cue map (or None, meaning no color support).
    """
    scales = np.linspace(cfg.predetect_scale_min, cfg.predetect_scale_max,
                         cfg.predetect_scales)
    best = None
    for s in scales:
        g = engine.cue_map(theta_typ, s)
        c = color_cue_fn(theta_typ, s) if color_cue_fn is not None else None
        g_bar = color_augmented_map(g, c)
        v = g_bar.min()
        if best is None or v < best[0]:
            yx = np.unravel_index(int(np.argmin(g_bar)), g_bar.shape)
            best = (v, (int(yx[1]), int(yx[0])), float(s), g_bar)
    return best[1], theta_typ, best[2], best[3]


def color_augmented_map(g: np.ndarray, c: Optional[np.ndarray]) -> np.ndarray:
    """Halve the Gabor map where both cues agree (strong G, strong C)."""
    if c is None:
        return g
    g_hat, c_hat = g.max(), c.max()
    cond = (g < g_hat / 2.0) & (c > c_hat / 2.0)
    return np.where(cond, g / 2.0, g)


# ---------------------------------------------------------------------------
# cue map stack (consumed by the matcher)

@dataclass
class Anchor:
    position: Tuple[int, int]
    theta: float
    scale: float


@dataclass
class CueMapStack:
    """Per-limb color cue machinery plus pre-detection anchors."""
    meta: MetaModel
    backprojections: List[Optional[np.ndarray]]       # C_j, None = no color cue
    biased: List[Optional[np.ndarray]]                # C-bar_j
    anchors: Dict[int, Anchor] = field(default_factory=dict)
    use_color: bool = True
    _cue_cache: dict = field(default_factory=dict)

    def color_cue(self, limb: int, theta: float, scale: float, flip: bool
                  ) -> Optional[np.ndarray]:
        if not self.use_color:
            return None
        src = self.biased[limb]
        if src is None:
            return None
        key = (limb, round(theta, 6), round(scale, 6), flip)
        if key not in self._cue_cache:
            if not self.meta.limbs[limb].color_valid():
                self._cue_cache[key] = np.ones_like(src)
            else:
                kernel = footprint_kernel(self.meta, limb, theta, scale, flip)
                self._cue_cache[key] = color_cue_map(src, kernel)
        return self._cue_cache[key]

    def invalidate_cache(self) -> None:
        self._cue_cache.clear()


def to_match_model(meta: MetaModel) -> MatchModel:
    pts, phis = [], []
    for ml in meta.limbs:
        proto = ml.shape_prototype(meta.n_integrated)
        support = proto > 0.5 * proto.max()
        line = thin(support)
        ys, xs = np.nonzero(line)
        if len(ys) == 0:
            raise ValueError("empty meta shape prototype")
        abs_pts = np.stack([xs + ml.shape_offset[0], ys + ml.shape_offset[1]],
                           axis=1).astype(np.float64)
        body = ml.body_from_abs(abs_pts)
        phi = _line_orientations(line)
        pts.append(body)
        phis.append((phi - ml.axis_angle) % math.pi)
    return MatchModel(parents=list(meta.parents), root=meta.root,
                      joints=dict(meta.joints), points=pts, phis=phis,
                      flip_enabled=list(meta.flip_enabled),
                      k_theta_in=meta.k_theta_in, k_theta_out=meta.k_theta_out)


def _line_orientations(line: np.ndarray, radius: int = 2) -> np.ndarray:
    ys, xs = np.nonzero(line)
    pts = np.stack([xs, ys], axis=1).astype(np.float64)
    phis = np.zeros(len(pts))
    for i, (x, y) in enumerate(pts):
        sel = (np.abs(pts[:, 0] - x) <= radius) & (np.abs(pts[:, 1] - y) <= radius)
        local = pts[sel]
        if len(local) < 2:
            continue
        d = local - local.mean(axis=0)
        cov = d.T @ d
        evals, evecs = np.linalg.eigh(cov)
        v = evecs[:, int(np.argmax(evals))]
        phis[i] = math.atan2(v[1], v[0]) % math.pi
    return phis


# ---------------------------------------------------------------------------
# serialization ("metamodel/1")

def _png_b64(arr: np.ndarray, mode: str) -> str:
    from PIL import Image
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _png_decode(payload: str, dtype) -> np.ndarray:
    from PIL import Image
    buf = io.BytesIO(base64.b64decode(payload))
    return np.asarray(Image.open(buf)).astype(dtype)


def meta_to_dict(meta: MetaModel) -> dict:
    limbs = []
    n = meta.n_integrated
    for ml in meta.limbs:
        shape16 = np.clip(np.round(ml.shape_acc / n), 0, 65535).astype(np.uint16)
        color8 = np.clip(np.round(ml.color_acc / n), 0, 255).astype(np.uint8)
        gabor = None
        if ml.gabor is not None:
            gabor = dict(valid=ml.gabor.valid, grid_spacing=ml.gabor.grid_spacing,
                         nodes=[dict(dx=float(o[0]), dy=float(o[1]),
                                     jet=[float(v) for v in j],
                                     eta=(None if math.isinf(e) else float(e)))
                                for o, j, e in zip(ml.gabor.offsets, ml.gabor.jets,
                                                   ml.gabor.etas)])
        limbs.append(dict(
            shape=_png_b64(shape16, "I;16"), shape_offset=list(ml.shape_offset),
            color=_png_b64(color8, "RGB"),
            mask_count=_png_b64(np.clip(ml.mask_count, 0, 255).astype(np.uint8), "L"),
            color_offset=list(ml.color_offset),
            barycenter=list(map(float, ml.barycenter)),
            axis_angle=float(ml.axis_angle),
            hs_hist=[float(v) for v in ml.hs_hist.ravel()],
            theta_typ=float(ml.theta_typical()),
            gabor=gabor,
        ))
    joints = {str(c): dict(parent=j.parent, child=j.child,
                           offset_parent=list(map(float, j.offset_parent)),
                           offset_child=list(map(float, j.offset_child)),
                           angle_mean=j.angle_mean, angle_lo=j.angle_lo,
                           angle_hi=j.angle_hi, angle_center=j.angle_center,
                           angle_series=list(map(float, j.angle_series)))
              for c, j in meta.joints.items()}
    return dict(format="metamodel/1", n_limbs=meta.n_limbs, root=meta.root,
                parents=list(meta.parents), joints=joints, limbs=limbs,
                n_integrated=meta.n_integrated, finalized=meta.finalized,
                skipped_models=meta.skipped_models,
                flip_enabled=list(map(bool, meta.flip_enabled)),
                k_theta_in=meta.k_theta_in, k_theta_out=meta.k_theta_out,
                frame_size=list(meta.frame_size), provenance=meta.provenance)


def meta_from_dict(data: dict) -> MetaModel:
    if data.get("format") != "metamodel/1":
        raise ValueError("not a metamodel/1 payload")
    n = data["n_integrated"]
    limbs = []
    bins = int(math.isqrt(len(data["limbs"][0]["hs_hist"])))
    for entry in data["limbs"]:
        gabor = None
        if entry["gabor"] is not None:
            g = entry["gabor"]
            offsets = np.array([[nd["dx"], nd["dy"]] for nd in g["nodes"]], dtype=np.float64)
            jets = np.array([nd["jet"] for nd in g["nodes"]], dtype=np.float64)
            etas = np.array([math.inf if nd["eta"] is None else nd["eta"]
                             for nd in g["nodes"]])
            if len(g["nodes"]) == 0:
                offsets = offsets.reshape(0, 2)
                jets = jets.reshape(0, 0)
            gabor = GaborPrototype(offsets=offsets, jets=jets, etas=etas,
                                   grid_spacing=g["grid_spacing"], valid=g["valid"])
        ml = MetaLimb(
            shape_acc=_png_decode(entry["shape"], np.int64) * n,
            shape_offset=tuple(entry["shape_offset"]),
            color_acc=_png_decode(entry["color"], np.int64) * n,
            mask_count=_png_decode(entry["mask_count"], np.int64),
            color_offset=tuple(entry["color_offset"]),
            barycenter=np.array(entry["barycenter"]),
            axis_angle=entry["axis_angle"],
            hs_hist=np.array(entry["hs_hist"]).reshape(bins, bins),
            orientation_pool=[entry["theta_typ"]],
            gabor=gabor,
        )
        limbs.append(ml)
    joints = {int(c): JointInfo(parent=j["parent"], child=j["child"],
                                offset_parent=np.array(j["offset_parent"]),
                                offset_child=np.array(j["offset_child"]),
                                angle_mean=j["angle_mean"], angle_lo=j["angle_lo"],
                                angle_hi=j["angle_hi"], angle_center=j["angle_center"],
                                angle_series=np.array(j["angle_series"]))
              for c, j in data["joints"].items()}
    return MetaModel(limbs=limbs, parents=list(data["parents"]), root=data["root"],
                     joints=joints, flip_enabled=list(data["flip_enabled"]),
                     k_theta_in=data["k_theta_in"], k_theta_out=data["k_theta_out"],
                     frame_size=tuple(data["frame_size"]),
                     n_integrated=n, finalized=data["finalized"],
                     skipped_models=data.get("skipped_models", 0),
                     provenance=data.get("provenance", {}))


def save_meta(meta: MetaModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(meta_to_dict(meta), fh)


def load_meta(path) -> MetaModel:
    with open(path) as fh:
        return meta_from_dict(json.load(fh))
