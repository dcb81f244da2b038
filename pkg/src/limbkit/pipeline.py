"""End-to-end drivers: frames -> model, models -> meta, meta + image -> posture."""

from __future__ import annotations

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .clustering import (NcutParams, TrajectoryDistanceParams, merge_clusters,
                         recursive_cluster, remove_outliers)
from .config import PipelineConfig
from .foreground import double_difference, extract_foreground, select_reference_frame
from .fusion import build_cue_stack, parse_switches
from .limbs import PsModel, build_ps_model, flesh_limb_masks
from .matching import MatchConfig, Posture, image_edge_evidence, match_ps
from .meta import MetaModel, to_match_model
from .skeleton import (estimate_joint_position, rigid_transform_series,
                       spanning_tree_skeleton)
from .tracking import TrajectorySet, place_features, track_forward_backward


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


def _stage(name):
    def deco(fn):
        def wrapped(*a, **kw):
            try:
                return fn(*a, **kw)
            except StageError:
                raise
            except Exception as e:
                raise StageError(name, e) from e
        return wrapped
    return deco


def cluster_trajectories(tset: TrajectorySet, cfg: PipelineConfig):
    """Recursive NCut, outlier removal, merging, small-cluster pruning."""
    dist_params = TrajectoryDistanceParams(cfg.traj_alpha, cfg.velocity_eps)
    ncut_params = NcutParams.from_config(cfg)
    clusters = recursive_cluster(tset, dist_params, ncut_params)
    clusters = [remove_outliers(c, tset, dist_params) for c in clusters]
    clusters = merge_clusters(clusters, tset, cfg.merge_max_rotation_deg,
                              cfg.merge_max_shift_px)
    kept = [c for c in clusters if c.size >= cfg.min_cluster_size]
    return kept if kept else clusters


def model_from_trajectories(ref_frame: np.ndarray, fg: np.ndarray,
                            tset: TrajectorySet, cfg: PipelineConfig,
                            provenance: Optional[dict] = None) -> PsModel:
    """Clustering onward (shared by the full pipeline and tracker-bypass tests)."""
    clusters = cluster_trajectories(tset, cfg)
    if len(clusters) < 2:
        raise StageError("clustering", RuntimeError("fewer than 2 limb candidates"))
    masks = flesh_limb_masks(fg, clusters, tset)
    for c, m in zip(clusters, masks):
        c.mask_area = float(m.sum())
    transforms = [rigid_transform_series(c, tset) for c in clusters]
    candidates = {}
    for i in range(len(clusters)):
        for j in range(i + 1, len(clusters)):
            candidates[(i, j)] = estimate_joint_position(
                i, j, transforms[i], transforms[j], clusters[i], clusters[j], tset)
    skeleton = spanning_tree_skeleton(clusters, candidates, tset, transforms)
    return build_ps_model(ref_frame, masks, skeleton, transforms, tset, cfg,
                          provenance=provenance or {})


def learn_sequence_model(frames: Sequence[np.ndarray],
                         cfg: PipelineConfig = PipelineConfig(),
                         provenance: Optional[dict] = None) -> PsModel:
    """Full unsupervised pipeline on one motion sequence."""
    prov = dict(provenance or {})
    prov.setdefault("config", cfg.as_dict())

    stack = _stage("foreground")(double_difference)(frames, cfg.ddi_threshold,
                                                    cfg.ddi_close_radius)
    t_star = _stage("foreground")(select_reference_frame)(stack)
    fg = _stage("foreground")(extract_foreground)(frames[t_star], stack, cfg)
    seeds = _stage("tracking")(place_features)(fg, cfg.n_features)
    tset = _stage("tracking")(track_forward_backward)(frames, seeds, t_star, cfg)
    return _stage("model")(model_from_trajectories)(frames[t_star], fg, tset, cfg, prov)


def match_meta(meta: MetaModel, image: np.ndarray, switches: str = "SGRCMA",
               cfg: PipelineConfig = PipelineConfig(),
               scale_grid: Tuple[float, ...] = (1.0,),
               theta_bins: Optional[int] = None) -> Tuple[Posture, dict]:
    """Cue stack construction plus exact PS matching under the given switches."""
    sw = parse_switches(switches)
    ev = image_edge_evidence(image, cfg)
    stack, info = build_cue_stack(meta, image, switches, cfg)
    mcfg = MatchConfig.from_config(cfg, scale_grid=tuple(scale_grid))
    if theta_bins is not None:
        mcfg.theta_bins = theta_bins
    if stack is not None and stack.anchors:
        for limb, anchor in stack.anchors.items():
            mcfg.anchors[limb] = (float(anchor.position[0]), float(anchor.position[1]))
            mcfg.lock_scale[limb] = anchor.scale
            if "R" in sw:
                mcfg.lock_theta[limb] = anchor.theta
    cues = stack if (stack is not None and stack.use_color) else None
    posture = match_ps(to_match_model(meta), ev, cues, mcfg)
    info["energy"] = posture.energy
    return posture, info
