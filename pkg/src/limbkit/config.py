"""Central hyperparameter ledger for the whole pipeline.

Every tunable the pipeline consumes lives in one flat dataclass so a single
TOML file can reproduce any run.  Defaults are the values the system was
calibrated with; individual stages receive the config object and read only
the fields they own.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import List

import tomli


@dataclass
class PipelineConfig:
    # --- motion / foreground ---
    ddi_threshold: float = 15.0          # gray levels on |frame difference|
    ddi_close_radius: int = 2
    fg_seed_erode: int = 1               # foreground seed = DDI support eroded
    bg_seed_dilate: int = 15             # background seed = complement of DDI support dilated
    rgb_hist_bins: int = 16              # per channel, for graph-cut unaries
    gc_lambda: float = 10.0              # pairwise weight
    gc_capacity_scale: int = 1000        # float->int capacity quantization
    fg_close_radius: int = 2

    # --- feature placement / tracking ---
    n_features: int = 400
    lk_window: int = 15
    lk_levels: int = 3
    lk_iterations: int = 20
    lk_residual_threshold: float = 25.0  # mean squared gray residual

    # --- trajectory clustering ---
    traj_alpha: float = 0.01
    velocity_eps: float = 0.2            # px/frame, below = "still"
    ncut_alpha_b: float = 20.0
    ncut_beta_b: float = 200.0
    ncut_tau: float = 0.35
    min_cluster_size: int = 10
    local_scaling_k: int = 7
    merge_max_rotation_deg: float = 15.0
    merge_max_shift_px: float = 10.0

    # --- skeleton ---
    joint_a_plus: float = 20.0
    joint_a_minus: float = 100.0
    joint_tau_s: float = 25.0            # px, near/far switch for the a weights

    # --- limb templates ---
    shape_sigma: float = 5.0             # perimeter smoothing
    crop_margin: int = 2

    # --- pictorial-structure matching ---
    theta_bins: int = 32
    k_theta_in: float = 0.01
    k_theta_out: float = 1.0
    spring_weight: float = 0.01          # px^-2, isotropic positional spring
    chamfer_dmax: float = 20.0
    chamfer_lambda_o: float = 5.0        # px per radian of orientation mismatch
    match_eps: float = 1e-6              # floor inside -log()
    color_weight: float = 0.65
    color_offset: float = 0.35
    edge_low: float = 20.0
    edge_high: float = 40.0
    restrict_child_angles: bool = True   # prune child theta domains by joint limits

    # --- meta model ---
    persistence_threshold: float = 0.25  # windowed-correlation cutoff
    corr_window: int = 7
    hs_bins: int = 32
    vote_prune_frac: float = 0.25
    backproj_peak_frac: float = 0.10
    backproj_blur_sigma: float = 5.0
    icp_max_iterations: int = 50
    icp_tolerance: float = 1e-3
    icp_snap_px: float = 1.0             # applied transform snapped to this grid
    icp_snap_deg: float = 1.0

    # --- Gabor prototypes ---
    gabor_scales: int = 5
    gabor_orientations: int = 8
    gabor_sigma: float = math.pi
    gabor_freq_max: float = math.pi / 2.0
    jet_grid_spacing: int = 8
    eta_cut: float = 5.0
    node_cut: int = 50

    # --- pre-detection / chromatic adaptation / stimulus ---
    predetect_scales: int = 30
    predetect_scale_min: float = 0.7
    predetect_scale_max: float = 1.0
    anchor_window: int = 10              # +-px around pre-detected position
    shift_radii: List[float] = field(default_factory=lambda: [0, 2, 4, 8, 16, 32])
    shift_directions: int = 8
    backproj_window: int = 7
    stimulus_truncation: float = 0.3
    projection_open_radius: int = 2

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_toml(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {_toml_value(value)}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_toml())

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path, "rb") as fh:
            return cls.from_dict(tomli.load(fh))


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {type(value)} to TOML")
