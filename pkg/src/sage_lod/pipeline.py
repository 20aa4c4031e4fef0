"""Scene-directory orchestration of the full pipeline, one step per command.

Steps communicate through files under the configured output directory, so
each command is idempotent and re-runnable: label -> profile -> fit ->
select -> compose/render -> report.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cameras import (
    ViewSet,
    label_distance_stats,
    load_viewset,
    parse_colmap_points,
)
from .config import PipelineConfig
from .errors import InputError, ProfilingError
from .lod import (
    LodCurveParams,
    SelectionPlan,
    compose_selection,
    curves_from_json,
    curves_to_json,
    dense_curve_samples,
    fit_all_curves,
    select_iterations,
)
from .metrics import (
    QualityProfile,
    build_quality_profile,
    masked_psnr,
    masked_ssim,
    psnr,
    ssim,
)
from .render import Image, RenderOptions, render
from .semantics import (
    LabelMap,
    LabeledCloud,
    assign_labels,
    load_mask,
    read_labeled_ply,
    write_labeled_ply,
)
from .splats import (
    CheckpointSet,
    format_bytes,
    load_checkpoint_catalog,
    occupancy_bytes,
    read_points_ply,
    write_splat_ply,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Input loading
# ---------------------------------------------------------------------------

def load_views(config: PipelineConfig) -> ViewSet:
    config.require_paths("cameras_path")
    return load_viewset(config.cameras_path)


def profiled_view_ids(config: PipelineConfig, views: ViewSet) -> list[str]:
    if config.views == "all":
        return views.view_ids
    if not config.views:
        raise InputError("configured view list is empty")
    known = set(views.view_ids)
    missing = [v for v in config.views if v not in known]
    if missing:
        raise InputError(f"configured views not in the camera set: {missing}")
    return list(config.views)


def load_points(config: PipelineConfig) -> np.ndarray:
    config.require_paths("points_path")
    if config.points_path.suffix == ".txt":
        return parse_colmap_points(config.points_path.read_text())
    return read_points_ply(config.points_path)


def load_masks(config: PipelineConfig, views: ViewSet,
               view_ids: list[str]) -> dict:
    masks = {}
    for view_id in view_ids:
        pose = views.pose(view_id)
        camera = views.camera_for(pose)
        name = Path(pose.image_name).stem if pose.image_name else view_id
        path = config.masks_dir / f"{name}.png"
        if not path.exists():
            log.warning("no mask for view %s (expected %s)", view_id, path)
            continue
        masks[view_id] = load_mask(path, view_id,
                                   expected_size=(camera.width, camera.height))
    return masks


def load_ground_truth(config: PipelineConfig, views: ViewSet,
                      view_ids: list[str]) -> dict:
    images = {}
    for view_id in view_ids:
        pose = views.pose(view_id)
        name = pose.image_name or f"{view_id}.png"
        path = config.images_dir / name
        if not path.exists():
            path = config.images_dir / f"{Path(name).stem}.png"
        if not path.exists():
            raise ProfilingError(f"no ground-truth image for view {view_id!r}")
        images[view_id] = Image.from_png(path)
    return images


def load_labeled_cloud(config: PipelineConfig,
                       checkpoints: CheckpointSet | None = None) -> LabeledCloud:
    """The labeled 3D points used for d_min: SfM points labeled by cmd_label,
    or splat centers of the top-iteration checkpoints when configured."""
    if config.dmin_source == "centers":
        if checkpoints is None:
            checkpoints = load_checkpoint_catalog(config.checkpoints_dir)
        top = checkpoints.iterations[-1]
        pts, labs = [], []
        for label_id in checkpoints.label_ids:
            cloud = checkpoints.cloud(label_id, top)
            pts.append(cloud.positions.astype(np.float64))
            labs.append(np.full(len(cloud), label_id, dtype=np.uint8))
        return LabeledCloud(points=np.concatenate(pts),
                            labels=np.concatenate(labs))
    path = config.labeled_points_path
    if not path.exists():
        raise InputError(
            f"labeled points missing: {path} (run the label step first)")
    return read_labeled_ply(path)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_label(config: PipelineConfig) -> Path:
    """Label the SfM points by multi-view majority voting."""
    views = load_views(config)
    view_ids = profiled_view_ids(config, views)
    masks = load_masks(config, views, view_ids)
    if not masks:
        raise InputError(f"no semantic masks found under {config.masks_dir}")
    points = load_points(config)
    cloud = assign_labels(points, views, list(masks.values()))
    config.out_dir.mkdir(parents=True, exist_ok=True)
    out = config.labeled_points_path
    out.write_bytes(write_labeled_ply(cloud))
    resolved = int((cloud.labels != 255).sum())
    log.info("labeled %d/%d points -> %s", resolved, len(cloud), out)
    return out


def cmd_profile(config: PipelineConfig) -> QualityProfile:
    """Measure masked quality for every (label, iteration, view)."""
    views = load_views(config)
    view_ids = profiled_view_ids(config, views)
    checkpoints = load_checkpoint_catalog(config.checkpoints_dir)
    masks = load_masks(config, views, view_ids)
    gt = load_ground_truth(config, views, view_ids)
    cloud = load_labeled_cloud(config, checkpoints)
    label_map = LabelMap.load(config.label_map_path) \
        if config.label_map_path.exists() else None

    profile = build_quality_profile(
        checkpoints, views, masks, gt, cloud, view_ids=view_ids,
        scene_id=config.scene_root.name, label_map=label_map,
        opts=RenderOptions(background=config.background, tau=config.tau))

    config.out_dir.mkdir(parents=True, exist_ok=True)
    (config.out_dir / "profile.csv").write_text(profile.to_csv())
    config.profile_json_path.write_text(json.dumps(profile.to_json(), indent=2))
    (config.out_dir / "mean_ssim_by_iteration.csv").write_text(
        _mean_series_csv(profile))
    return profile


def _mean_series_csv(profile: QualityProfile) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["label", "iteration", "mean_ssim", "n_views"])
    for label_id in profile.labels:
        for it, mean in profile.mean_ssim_series(label_id):
            n = len(profile.samples_for(label_id=label_id, iteration=it))
            writer.writerow([label_id, it, repr(mean), n])
    return buf.getvalue()


def load_profile(config: PipelineConfig) -> QualityProfile:
    if not config.profile_json_path.exists():
        raise InputError(
            f"profile missing: {config.profile_json_path} (run the profile step first)")
    return QualityProfile.from_json(json.loads(config.profile_json_path.read_text()))


def cmd_fit(config: PipelineConfig) -> dict[tuple[int, int], LodCurveParams]:
    """Fit distance-quality curves for every (label, iteration)."""
    profile = load_profile(config)
    curves, skipped = fit_all_curves(profile)
    for reason in skipped:
        log.warning("fit skipped: %s", reason)
    config.out_dir.mkdir(parents=True, exist_ok=True)
    config.curves_path.write_text(json.dumps({
        "curves": curves_to_json(curves), "skipped": skipped}, indent=2))
    (config.out_dir / "curve_samples.csv").write_text(
        _curve_samples_csv(profile, curves))
    return curves


def _curve_samples_csv(profile: QualityProfile,
                       curves: dict[tuple[int, int], LodCurveParams]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["label", "iteration", "d", "ssim_pred"])
    for (label_id, iteration), params in sorted(curves.items()):
        pts = profile.distance_samples(label_id, iteration)
        dists = [d for d, _ in pts]
        ds, vals = dense_curve_samples(params, min(dists), max(dists), 256)
        for d, v in zip(ds, vals):
            writer.writerow([label_id, iteration, repr(float(d)), repr(float(v))])
    return buf.getvalue()


def load_curves(config: PipelineConfig) -> dict[tuple[int, int], LodCurveParams]:
    if not config.curves_path.exists():
        raise InputError(
            f"curves missing: {config.curves_path} (run the fit step first)")
    return curves_from_json(json.loads(config.curves_path.read_text())["curves"])


def cmd_select(config: PipelineConfig, view_id: str | None = None,
               targets: list[float] | None = None,
               mode: str | None = None) -> dict[float, SelectionPlan]:
    """Pick the cheapest iteration per label for each quality target."""
    profile = load_profile(config)
    mode = mode or config.mode
    targets = targets if targets is not None else config.targets
    view_id = view_id or _default_view(profile)
    curves = load_curves(config) if mode == "model" else None
    plans = {}
    config.out_dir.mkdir(parents=True, exist_ok=True)
    for target in targets:
        plan = select_iterations(profile, view_id, target, mode=mode,
                                 curves=curves)
        plan.save(config.plan_path(target, view_id))
        plans[target] = plan
    return plans


def _default_view(profile: QualityProfile) -> str:
    views = profile.view_ids
    if not views:
        raise InputError("profile contains no views")
    return views[0]


def cmd_compose(config: PipelineConfig, plan: SelectionPlan) -> Path:
    """Merge the selected checkpoints into one splat cloud on disk."""
    checkpoints = load_checkpoint_catalog(config.checkpoints_dir)
    manifest, merged = compose_selection(plan, checkpoints)
    config.out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"composed_{plan.view_id}_t{plan.target_ssim:g}"
    out = config.out_dir / f"{stem}.ply"
    out.write_bytes(write_splat_ply(merged))
    (config.out_dir / f"{stem}.manifest.json").write_text(json.dumps({
        "entries": [{"label": e.label_id, "iteration": e.iteration}
                    for e in manifest.entries],
        "total_gaussians": len(merged),
        "total_bytes": occupancy_bytes(len(merged)),
    }, indent=2))
    return out


def cmd_render(config: PipelineConfig, plan: SelectionPlan,
               view_ids: list[str] | None = None) -> dict:
    """Render the composed scene and measure final quality per view.

    Quality is evaluated on two levels: the whole image, and restricted to
    each semantic mask.
    """
    views = load_views(config)
    view_ids = view_ids or profiled_view_ids(config, views)
    checkpoints = load_checkpoint_catalog(config.checkpoints_dir)
    _, merged = compose_selection(plan, checkpoints)
    masks = load_masks(config, views, view_ids)
    gt = load_ground_truth(config, views, view_ids)
    opts = RenderOptions(background=config.background, tau=config.tau)

    config.out_dir.mkdir(parents=True, exist_ok=True)
    render_dir = config.out_dir / f"renders_t{plan.target_ssim:g}"
    render_dir.mkdir(exist_ok=True)
    results = {"target": plan.target_ssim, "view_metrics": {}}
    for view_id in view_ids:
        pose = views.pose(view_id)
        camera = views.camera_for(pose)
        image = render(merged, camera, pose, opts)
        image.save(render_dir / f"{view_id}.png")
        full_ssim, _ = ssim(image, gt[view_id])
        entry = {
            "ssim": full_ssim,
            "psnr": _json_float(psnr(image, gt[view_id])),
            "per_label": {},
        }
        if view_id in masks:
            for label_id in sorted(set(masks[view_id].present_labels())):
                m_ssim = masked_ssim(image, gt[view_id], masks[view_id], label_id)
                m_psnr = masked_psnr(image, gt[view_id], masks[view_id], label_id)
                entry["per_label"][str(label_id)] = {
                    "ssim": m_ssim, "psnr": _json_float(m_psnr)}
        results["view_metrics"][view_id] = entry
    (config.out_dir / f"render_metrics_t{plan.target_ssim:g}.json").write_text(
        json.dumps(results, indent=2))
    return results


def _json_float(x):
    import math

    if x is None:
        return None
    return "inf" if math.isinf(x) else x


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class ReportRow:
    label_id: int
    label_name: str
    d_min: float | None
    d_avg: float | None
    ssim_by_iteration: dict[int, float]
    chosen: dict[float, tuple[int, int, bool]]  # target -> (iteration, N, fallback)


@dataclass
class Report:
    scene_id: str
    view_id: str
    iterations: list[int]
    targets: list[float]
    rows: list[ReportRow]
    baseline_total: int
    totals: dict[float, int]
    metadata: dict

    def to_json(self) -> dict:
        return {
            "scene": self.scene_id,
            "view": self.view_id,
            "iterations": self.iterations,
            "targets": self.targets,
            "metadata": self.metadata,
            "rows": [
                {
                    "label": r.label_id,
                    "name": r.label_name,
                    "d_min": r.d_min,
                    "d_avg": r.d_avg,
                    "ssim": {str(i): s for i, s in sorted(r.ssim_by_iteration.items())},
                    "selected": {
                        f"{t:g}": {"iteration": it, "n_gaussians": n,
                                   "occupancy_bytes": occupancy_bytes(n),
                                   "fallback": fb}
                        for t, (it, n, fb) in sorted(r.chosen.items())
                    },
                }
                for r in self.rows
            ],
            "baseline_total_gaussians": self.baseline_total,
            "baseline_occupancy_bytes": occupancy_bytes(self.baseline_total),
            "totals": {
                f"{t:g}": {"n_gaussians": n,
                           "occupancy_bytes": occupancy_bytes(n)}
                for t, n in sorted(self.totals.items())
            },
        }

    def to_text(self) -> str:
        targets = sorted(self.targets)
        header = (["label", "d_min", "d_avg"]
                  + [f"ssim@{i}" for i in self.iterations]
                  + [f"N@t={t:g}" for t in targets]
                  + [f"occ@t={t:g}" for t in targets])
        rows = []
        for r in self.rows:
            cells = [r.label_name,
                     "-" if r.d_min is None else f"{r.d_min:.3f}",
                     "-" if r.d_avg is None else f"{r.d_avg:.3f}"]
            cells += [f"{r.ssim_by_iteration.get(i, float('nan')):.3f}"
                      for i in self.iterations]
            for t in targets:
                it, n, fb = r.chosen[t]
                cells.append(f"{n}{'*' if fb else ''}")
            for t in targets:
                _, n, _ = r.chosen[t]
                cells.append(format_bytes(occupancy_bytes(n)))
            rows.append(cells)
        total_cells = (["total", "", ""] + ["" for _ in self.iterations]
                       + [str(self.totals[t]) for t in targets]
                       + [format_bytes(occupancy_bytes(self.totals[t]))
                          for t in targets])
        rows.append(total_cells)

        widths = [max(len(header[c]), *(len(row[c]) for row in rows))
                  for c in range(len(header))]
        lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
        lines.append("  ".join("-" * w for w in widths))
        for row in rows:
            lines.append("  ".join(c.rjust(w) if i > 0 else c.ljust(w)
                                   for i, (c, w) in enumerate(zip(row, widths))))
        lines.append("")
        lines.append(f"baseline (top iteration everywhere): "
                     f"{self.baseline_total} gaussians, "
                     f"{format_bytes(occupancy_bytes(self.baseline_total))}")
        lines.append("* = fallback to the maximum iteration "
                     "(target unreachable for that label)")
        return "\n".join(lines)


def cmd_report(config: PipelineConfig, view_id: str | None = None,
               mode: str | None = None) -> Report:
    """Assemble the per-label selection table for one view."""
    profile = load_profile(config)
    view_id = view_id or _default_view(profile)
    mode = mode or config.mode
    curves = load_curves(config) if mode == "model" else None
    views = load_views(config)
    checkpoints = load_checkpoint_catalog(config.checkpoints_dir)
    cloud = load_labeled_cloud(config, checkpoints)
    label_map = profile.label_map or (
        LabelMap.load(config.label_map_path)
        if config.label_map_path.exists() else LabelMap({}))

    pose = views.pose(view_id)
    camera = views.camera_for(pose)
    dstats = label_distance_stats(cloud, camera, pose)

    plans = {t: select_iterations(profile, view_id, t, mode=mode, curves=curves)
             for t in config.targets}

    rows = []
    for label_id in profile.labels:
        by_iter = {s.iteration: s.ssim
                   for s in profile.samples_for(label_id=label_id, view_id=view_id)}
        if not by_iter:
            continue
        mn, avg = dstats.get(label_id, (None, None))
        chosen = {}
        for t, plan in plans.items():
            c = plan.choices[label_id]
            chosen[t] = (c.iteration, c.gaussian_count, c.fallback)
        rows.append(ReportRow(label_id=label_id,
                              label_name=label_map.name(label_id),
                              d_min=mn, d_avg=avg,
                              ssim_by_iteration=by_iter, chosen=chosen))

    top = profile.iterations[-1]
    baseline = sum(
        s.gaussian_count
        for label_id in profile.labels
        for s in profile.samples_for(label_id=label_id, view_id=view_id,
                                     iteration=top))
    report = Report(
        scene_id=profile.scene_id, view_id=view_id,
        iterations=profile.iterations, targets=list(config.targets),
        rows=rows, baseline_total=baseline,
        totals={t: plan.total_gaussians for t, plan in plans.items()},
        metadata={
            "ssim_window": 11, "ssim_sigma": 1.5,
            "ssim_channels": "rgb-averaged",
            "bytes_per_gaussian": 248,
            "mode": mode,
            "dmin_source": config.dmin_source,
        })
    config.out_dir.mkdir(parents=True, exist_ok=True)
    (config.out_dir / f"report_{view_id}.json").write_text(
        json.dumps(report.to_json(), indent=2))
    (config.out_dir / f"report_{view_id}.txt").write_text(report.to_text())
    return report
