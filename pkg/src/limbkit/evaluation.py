"""Quantitative evaluation: chamfer registration error and the stability,
redundancy, ablation, and timing experiments."""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.ndimage as ndi

from .config import PipelineConfig
from .limbs import PsModel
from .matching import MatchModel, Posture, transform_points
from .meta import MetaModel, build_meta_model, to_match_model
from .pipeline import match_meta

DEFAULT_SWITCH_CHAIN = ["S", "SG", "SGR", "SGRC", "SGRCM", "SGRCMA"]


def rasterize_polyline(points: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Closed polyline to a pixel mask (0.5 px sampling along segments)."""
    h, w = shape
    mask = np.zeros((h, w), dtype=bool)
    pts = np.asarray(points, dtype=np.float64)
    closed = np.vstack([pts, pts[:1]])
    for a, b in zip(closed[:-1], closed[1:]):
        seg = np.linalg.norm(b - a)
        n = max(int(math.ceil(seg / 0.5)), 1)
        ts = np.linspace(0.0, 1.0, n + 1)[:, None]
        samples = np.rint(a + ts * (b - a)).astype(np.int64)
        ok = (samples[:, 0] >= 0) & (samples[:, 0] < w) & \
             (samples[:, 1] >= 0) & (samples[:, 1] < h)
        mask[samples[ok, 1], samples[ok, 0]] = True
    return mask


def chamfer_error(model: MatchModel, posture: Posture,
                  perimeters: Sequence[np.ndarray], shape: Tuple[int, int]
                  ) -> Tuple[np.ndarray, float]:
    """Untruncated mean distance of projected shape pixels to the annotation.

    Returns (per-limb distances, limb-averaged error E).
    """
    h, w = shape
    per_limb = np.empty(model.n_limbs)
    for i in range(model.n_limbs):
        dt = ndi.distance_transform_edt(~rasterize_polyline(perimeters[i], shape))
        state = posture.states[i]
        offsets, _ = transform_points(model.points[i], model.phis[i],
                                      state.theta, state.scale, state.flip)
        pts = np.rint(offsets + np.asarray(state.position)).astype(np.int64)
        ok = (pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)
        if not ok.any():
            raise ValueError(f"limb {i} projects entirely outside the image")
        per_limb[i] = float(dt[pts[ok, 1], pts[ok, 0]].mean())
    return per_limb, float(per_limb.mean())


def evaluate_benchmark(meta: MetaModel, scene: dict, switches: str,
                       cfg: PipelineConfig, scale_grid=(1.0,),
                       theta_bins: Optional[int] = None) -> float:
    posture, _ = match_meta(meta, scene["image"], switches, cfg,
                            scale_grid=scale_grid, theta_bins=theta_bins)
    _, e = chamfer_error(to_match_model(meta), posture, scene["perimeters"],
                         scene["image"].shape[:2])
    return e


# ---------------------------------------------------------------------------
# permutation / redundancy

@dataclass
class StabilityResult:
    per_benchmark_mean: np.ndarray
    per_benchmark_std: np.ndarray
    table: np.ndarray            # (rows, benchmarks)
    build_seconds: List[float] = field(default_factory=list)


def _build_and_match(args):
    order, models_payload, scenes, switches, cfg_dict, scale_grid, theta_bins = args
    from .limbs import model_from_dict
    cfg = PipelineConfig.from_dict(cfg_dict)
    models = [model_from_dict(d) for d in models_payload]
    t0 = time.perf_counter()
    meta = build_meta_model([models[i] for i in order], cfg)
    build_s = time.perf_counter() - t0
    errors = [evaluate_benchmark(meta, sc, switches, cfg, scale_grid, theta_bins)
              for sc in scenes]
    return errors, build_s


def permutation_test(models: Sequence[PsModel], scenes: Sequence[dict],
                     n_rows: int = 50, seed: int = 0, switches: str = "SGRCMA",
                     cfg: PipelineConfig = PipelineConfig(), scale_grid=(1.0,),
                     theta_bins: Optional[int] = None,
                     n_jobs: int = 1) -> StabilityResult:
    """Meta-model stability under random integration orders."""
    from .limbs import model_to_dict
    rng = np.random.default_rng(seed)
    orders = [rng.permutation(len(models)).tolist() for _ in range(n_rows)]
    payload = [model_to_dict(m) for m in models]
    jobs = [(order, payload, scenes, switches, cfg.as_dict(), scale_grid, theta_bins)
            for order in orders]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_build_and_match, jobs))
    else:
        results = [_build_and_match(j) for j in jobs]
    table = np.array([r[0] for r in results])
    return StabilityResult(per_benchmark_mean=table.mean(axis=0),
                           per_benchmark_std=table.std(axis=0),
                           table=table,
                           build_seconds=[r[1] for r in results])


def redundancy_test(models: Sequence[PsModel], scenes: Sequence[dict],
                    n_repeats: int = 10, switches: str = "SGRCMA",
                    cfg: PipelineConfig = PipelineConfig(), scale_grid=(1.0,),
                    theta_bins: Optional[int] = None,
                    n_jobs: int = 1) -> Tuple[StabilityResult, List[MetaModel]]:
    """Integrate the canonical sequence m=1..n_repeats times."""
    metas = []
    rows = []
    build_s = []
    for m in range(1, n_repeats + 1):
        seq = list(models) * m
        t0 = time.perf_counter()
        meta = build_meta_model(seq, cfg)
        build_s.append(time.perf_counter() - t0)
        metas.append(meta)
        rows.append([evaluate_benchmark(meta, sc, switches, cfg, scale_grid, theta_bins)
                     for sc in scenes])
    table = np.array(rows)
    return StabilityResult(per_benchmark_mean=table.mean(axis=0),
                           per_benchmark_std=table.std(axis=0),
                           table=table, build_seconds=build_s), metas


def prototypes_bit_identical(a: MetaModel, b: MetaModel) -> bool:
    """Shape and color prototypes of two metas compared bit-for-bit."""
    for la, lb in zip(a.limbs, b.limbs):
        pa = la.shape_prototype(a.n_integrated)
        pb = lb.shape_prototype(b.n_integrated)
        if pa.shape != pb.shape or not np.array_equal(pa, pb):
            return False
        ca = la.color_prototype(a.n_integrated)
        cb = lb.color_prototype(b.n_integrated)
        if ca.shape != cb.shape or not np.array_equal(ca, cb):
            return False
    return True


# ---------------------------------------------------------------------------
# cue ablation

@dataclass
class AblationRow:
    switches: str
    mean: float
    std: float
    errors: List[float]


def cue_ablation(meta: MetaModel, scenes: Sequence[dict],
                 chain: Sequence[str] = tuple(DEFAULT_SWITCH_CHAIN),
                 cfg: PipelineConfig = PipelineConfig(), scale_grid=(1.0,),
                 theta_bins: Optional[int] = None) -> List[AblationRow]:
    rows = []
    for switches in chain:
        errors = [evaluate_benchmark(meta, sc, switches, cfg, scale_grid, theta_bins)
                  for sc in scenes]
        rows.append(AblationRow(switches=switches,
                                mean=float(np.mean(errors)),
                                std=float(np.std(errors)),
                                errors=[float(e) for e in errors]))
    return rows


def ablation_to_csv(rows: Sequence[AblationRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["switches", "mean_px", "std_px"])
        for r in rows:
            writer.writerow([r.switches, f"{r.mean:.3f}", f"{r.std:.3f}"])


# ---------------------------------------------------------------------------
# timing

@dataclass
class TimingReport:
    stages: Dict[str, float]
    n_frames: int

    @property
    def total(self) -> float:
        return sum(self.stages.values())

    @property
    def per_frame(self) -> float:
        return self.total / max(self.n_frames, 1)

    def as_dict(self) -> dict:
        return dict(stages=self.stages, total=self.total,
                    n_frames=self.n_frames, per_frame=self.per_frame)


class StageTimer:
    def __init__(self):
        self.stages: Dict[str, float] = {}

    def measure(self, name: str):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.stages[name] = timer.stages.get(name, 0.0) + \
                    time.perf_counter() - self.t0

        return _Ctx()

    def report(self, n_frames: int) -> TimingReport:
        return TimingReport(stages=dict(self.stages), n_frames=n_frames)


def meta_build_linearity(models: Sequence[PsModel], counts: Sequence[int],
                         cfg: PipelineConfig = PipelineConfig()) -> Tuple[float, List[float]]:
    """Build times for increasing model counts; returns (R^2 of a linear fit, times)."""
    times = []
    for m in counts:
        seq = [models[i % len(models)] for i in range(m)]
        t0 = time.perf_counter()
        build_meta_model(seq, cfg)
        times.append(time.perf_counter() - t0)
    x = np.asarray(counts, dtype=np.float64)
    y = np.asarray(times)
    a, b = np.polyfit(x, y, 1)
    pred = a * x + b
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return r2, times
