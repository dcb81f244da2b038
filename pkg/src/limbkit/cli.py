"""Command-line pipeline driver.

Subcommands: learn (frames -> model), meta (models -> meta-model), match
(meta + image -> posture), synth (generate scenes), eval (experiments).
Exit codes: 0 ok, 1 runtime failure, 2 usage or input error.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from .config import PipelineConfig
from .imaging import read_image, write_image
from .limbs import load_model, save_model
from .matching import render_overlay
from .meta import (build_meta_model, init_meta, integrate_model, finalize_meta,
                   load_meta, save_meta, to_match_model)
from .pipeline import StageError, learn_sequence_model, match_meta


def _load_config(path):
    return PipelineConfig.load(path) if path else PipelineConfig()


def _fail(message: str, code: int = 1):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group()
def main():
    """Unsupervised upper-body model learning and posture matching."""


@main.command()
@click.argument("frames_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_path", type=click.Path(), required=True)
def learn(frames_dir, config_path, out_path):
    """Learn a sequence-specific body model from a frame directory."""
    cfg = _load_config(config_path)
    paths = sorted(p for p in Path(frames_dir).iterdir()
                   if p.suffix.lower() in (".png", ".ppm", ".jpg", ".jpeg"))
    if len(paths) < 3:
        _fail(f"need at least 3 frames, found {len(paths)}", 2)
    frames = [read_image(p) for p in paths]
    t0 = time.perf_counter()
    try:
        model = learn_sequence_model(frames, cfg, provenance=dict(
            frames_dir=str(frames_dir), n_frames=len(frames), config=cfg.as_dict()))
    except StageError as e:
        _fail(str(e), 1)
    save_model(model, out_path)
    dt = time.perf_counter() - t0
    click.echo(f"learned {model.n_limbs}-limb model in {dt:.1f}s "
               f"({dt / len(frames):.3f}s/frame) -> {out_path}")


@main.command()
@click.argument("model_paths", nargs=-1, type=click.Path(exists=True), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_path", type=click.Path(), required=True)
def meta(model_paths, config_path, out_path):
    """Consolidate sequence models (in the given order) into a meta-model."""
    cfg = _load_config(config_path)
    models = [load_model(p) for p in model_paths]
    counts = {m.n_limbs for m in models}
    if len(counts) != 1:
        _fail(f"limb count mismatch across models: {sorted(counts)}", 2)
    meta_model = init_meta(models[0], cfg)
    for m in models[1:]:
        integrate_model(meta_model, m, cfg)
    finalize_meta(meta_model, cfg)
    meta_model.provenance = dict(order=[str(p) for p in model_paths],
                                 skipped=meta_model.skipped_models,
                                 config=cfg.as_dict())
    save_meta(meta_model, out_path)
    click.echo(f"integrated {meta_model.n_integrated}/{len(models)} models "
               f"({meta_model.skipped_models} skipped) -> {out_path}")


@main.command()
@click.argument("meta_path", type=click.Path(exists=True))
@click.argument("image_path", type=click.Path(exists=True))
@click.option("--switches", default="SGRCMA", show_default=True,
              help="subset of SGRCMA; S is mandatory")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_path", type=click.Path(), required=True,
              help="posture JSON; an overlay PNG lands next to it")
def match(meta_path, image_path, switches, config_path, out_path):
    """Match a meta-model to a still image."""
    cfg = _load_config(config_path)
    try:
        from .fusion import parse_switches
        parse_switches(switches)
    except ValueError as e:
        _fail(str(e), 2)
    meta_model = load_meta(meta_path)
    image = read_image(image_path)
    try:
        posture, info = match_meta(meta_model, image, switches, cfg)
    except Exception as e:
        _fail(f"matching failed: {e}", 1)
    payload = json.loads(posture.to_json())
    payload["info"] = info
    payload["config"] = cfg.as_dict()
    Path(out_path).write_text(json.dumps(payload, indent=2))
    overlay = render_overlay(image, to_match_model(meta_model), posture)
    overlay_path = str(Path(out_path).with_suffix("")) + "_overlay.png"
    write_image(overlay_path, overlay)
    click.echo(f"energy {posture.energy:.4f} -> {out_path}")


@main.command()
@click.option("--subject", type=int, default=0, show_default=True)
@click.option("--frames", "n_frames", type=int, default=30, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--background", type=click.Choice(["plain", "textured", "clutter"]),
              default="plain", show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def synth(subject, n_frames, seed, background, out_dir):
    """Generate a synthetic puppet sequence with ground truth."""
    from .synth import generate_scene, random_motion_script, subject_spec
    spec = subject_spec(subject, background=background)
    script = random_motion_script(spec.n_limbs, n_frames, seed)
    try:
        frames, gt = generate_scene(spec, script, seed=seed)
    except ValueError as e:
        _fail(str(e), 1)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(frames):
        write_image(out / f"frame_{t:04d}.png", frame)
    truth = dict(
        seed=seed, subject=subject, background=background,
        poses=gt.poses.tolist(),
        joints=[[None if np.isnan(v) else float(v) for v in row.ravel()]
                for row in gt.joints],
        adjacency=sorted(spec.adjacency()),
    )
    (out / "ground_truth.json").write_text(json.dumps(truth))
    click.echo(f"wrote {len(frames)} frames -> {out_dir}")


@main.command(name="eval")
@click.argument("experiment", type=click.Choice(["permutation", "redundancy",
                                                 "ablation", "timing"]))
@click.argument("model_paths", nargs=-1, type=click.Path(exists=True), required=True)
@click.option("--rows", type=int, default=50, show_default=True,
              help="permutation rows")
@click.option("--repeats", type=int, default=10, show_default=True,
              help="redundancy repetitions")
@click.option("--benchmarks", type=int, default=6, show_default=True)
@click.option("--switches", default="SGRCMA", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--jobs", type=int, default=1, show_default=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def eval_cmd(experiment, model_paths, rows, repeats, benchmarks, switches, seed,
             config_path, jobs, out_path):
    """Stability / ablation / timing experiments over stored models."""
    import csv as _csv
    from . import evaluation as ev
    from .synth import benchmark_scene
    cfg = _load_config(config_path)
    models = [load_model(p) for p in model_paths]
    scenes = [benchmark_scene(i) for i in range(benchmarks)]
    rows_out = []
    if experiment == "permutation":
        res = ev.permutation_test(models, scenes, n_rows=rows, seed=seed,
                                  switches=switches, cfg=cfg, n_jobs=jobs)
        for b in range(len(scenes)):
            rows_out.append(["benchmark_%d" % b, f"{res.per_benchmark_mean[b]:.3f}",
                             f"{res.per_benchmark_std[b]:.3f}"])
        header = ["benchmark", "mean_px", "std_px"]
    elif experiment == "redundancy":
        res, _ = ev.redundancy_test(models, scenes, n_repeats=repeats,
                                    switches=switches, cfg=cfg)
        for b in range(len(scenes)):
            rows_out.append(["benchmark_%d" % b, f"{res.per_benchmark_mean[b]:.3f}",
                             f"{res.per_benchmark_std[b]:.3f}"])
        header = ["benchmark", "mean_px", "std_px"]
    elif experiment == "ablation":
        meta_model = build_meta_model(models, cfg)
        table = ev.cue_ablation(meta_model, scenes, cfg=cfg)
        for r in table:
            rows_out.append([r.switches, f"{r.mean:.3f}", f"{r.std:.3f}"])
        header = ["switches", "mean_px", "std_px"]
    else:
        counts = sorted({1, max(1, len(models) // 2), len(models)})
        r2, times = ev.meta_build_linearity(models, counts, cfg)
        for c, t in zip(counts, times):
            rows_out.append([str(c), f"{t:.3f}"])
        rows_out.append(["r_squared", f"{r2:.4f}"])
        header = ["models", "seconds"]
    with open(out_path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows_out)
    click.echo(f"wrote {experiment} results -> {out_path}")


if __name__ == "__main__":
    main()
