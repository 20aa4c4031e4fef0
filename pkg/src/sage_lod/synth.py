"""Deterministic synthetic labeled scenes with emulated training snapshots.

Stands in for GPU 3DGS training at desk scale: a seeded generator places
splats on simple primitives per semantic label, renders ground truth, and
derives masks by back-projecting the labeled points so that scene, masks, and
point labels are mutually consistent by construction.  Lower training
iterations are emulated by subsampling splats, inflating the survivors, and
jittering positions, which reproduces the quality-vs-iteration monotonicity
the selection pipeline needs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cameras import CameraModel, ViewPose, ViewSet, rotmat_to_quat
from .render import Image, RenderOptions, render, subset_by_label
from .semantics import LabeledCloud, LabelMap, SemanticMask, backproject_mask, save_mask
from .splats import (
    CheckpointSet,
    SplatCloud,
    load_checkpoint_catalog,
    write_checkpoint_manifest,
    write_splat_ply,
)

SH_C0 = 0.28209479177387814

SHAPES = ("plane", "sphere", "blobs")


@dataclass
class ObjectSpec:
    label_id: int
    shape: str                      # plane | sphere | blobs
    count: int
    color: tuple[float, float, float]
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    size: float = 1.0
    name: str = ""

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"shape must be one of {SHAPES}")
        if self.count <= 0:
            raise ValueError("gaussian budget must be positive")
        self.name = self.name or f"label{self.label_id}"


@dataclass
class OrbitSpec:
    count: int = 6
    radius_min: float = 3.0
    radius_max: float = 5.0
    elevation_deg: float = 25.0


@dataclass
class SceneSpec:
    seed: int
    objects: list[ObjectSpec]
    cameras: OrbitSpec = field(default_factory=OrbitSpec)
    image_size: tuple[int, int] = (64, 64)   # (width, height)
    fov_deg: float = 55.0
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    mask_radius_px: float = 2.0
    mask_fill_limit: float = 6.0

    def __post_init__(self):
        labels = [o.label_id for o in self.objects]
        if len(set(labels)) < 2:
            raise ValueError("scene needs at least 2 distinct labels")
        if len(set(labels)) != len(labels):
            raise ValueError("duplicate label ids across objects")

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "objects": [
                {"label_id": o.label_id, "shape": o.shape, "count": o.count,
                 "color": list(o.color), "center": list(o.center),
                 "size": o.size, "name": o.name}
                for o in self.objects
            ],
            "cameras": {"count": self.cameras.count,
                        "radius_min": self.cameras.radius_min,
                        "radius_max": self.cameras.radius_max,
                        "elevation_deg": self.cameras.elevation_deg},
            "image_size": list(self.image_size),
            "fov_deg": self.fov_deg,
            "background": list(self.background),
            "mask_radius_px": self.mask_radius_px,
            "mask_fill_limit": self.mask_fill_limit,
        }

    @staticmethod
    def from_json(obj: dict) -> "SceneSpec":
        return SceneSpec(
            seed=int(obj["seed"]),
            objects=[ObjectSpec(label_id=int(o["label_id"]), shape=o["shape"],
                                count=int(o["count"]), color=tuple(o["color"]),
                                center=tuple(o.get("center", (0, 0, 0))),
                                size=float(o.get("size", 1.0)),
                                name=o.get("name", ""))
                     for o in obj["objects"]],
            cameras=OrbitSpec(**obj.get("cameras", {})),
            image_size=tuple(obj.get("image_size", (64, 64))),
            fov_deg=float(obj.get("fov_deg", 55.0)),
            background=tuple(obj.get("background", (0, 0, 0))),
            mask_radius_px=float(obj.get("mask_radius_px", 2.0)),
            mask_fill_limit=float(obj.get("mask_fill_limit", 6.0)))


@dataclass
class SynthScene:
    spec: SceneSpec
    cloud: SplatCloud                 # full-detail cloud
    gaussian_labels: np.ndarray       # (N,) uint8, per-gaussian label
    labeled_cloud: LabeledCloud       # SfM-like subsample (1 in 4)
    views: ViewSet
    masks: dict[str, SemanticMask]
    ground_truth: dict[str, Image]
    label_map: LabelMap


def _sample_object(rng: np.random.Generator, obj: ObjectSpec) -> dict:
    n = obj.count
    c = np.asarray(obj.center, dtype=np.float64)
    if obj.shape == "plane":
        pts = np.zeros((n, 3))
        pts[:, 0] = rng.uniform(-obj.size, obj.size, n)
        pts[:, 1] = rng.uniform(-obj.size, obj.size, n)
        pts[:, 2] = rng.normal(0.0, 0.01 * obj.size, n)
        pts += c
        spacing = 2.0 * obj.size / math.sqrt(n)
    elif obj.shape == "sphere":
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        pts = c + obj.size * v
        spacing = 2.0 * obj.size / math.sqrt(n)
    else:  # blobs
        k = 5
        centers = c + rng.uniform(-obj.size, obj.size, size=(k, 3))
        pick = rng.integers(0, k, size=n)
        pts = centers[pick] + rng.normal(0.0, obj.size / 4.0, size=(n, 3))
        spacing = 2.5 * obj.size / math.sqrt(n)

    log_s = math.log(max(spacing, 1e-4))
    scales = rng.normal(log_s, 0.15, size=(n, 3))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    p_op = rng.uniform(0.7, 0.95, size=n)
    opacity = np.log(p_op / (1.0 - p_op))
    base = np.asarray(obj.color, dtype=np.float64)
    rgb = np.clip(base + rng.uniform(-0.08, 0.08, size=(n, 3)), 0.02, 0.98)
    sh_dc = (rgb - 0.5) / SH_C0
    return {"positions": pts, "sh_dc": sh_dc, "scales": scales,
            "quats": quats, "opacity": opacity}


def _orbit_views(spec: SceneSpec) -> ViewSet:
    w, h = spec.image_size
    fx = (w / 2.0) / math.tan(math.radians(spec.fov_deg) / 2.0)
    camera = CameraModel(width=w, height=h, fx=fx, fy=fx, cx=w / 2.0, cy=h / 2.0)
    orbit = spec.cameras
    poses = []
    radii = np.linspace(orbit.radius_min, orbit.radius_max, orbit.count)
    elev = math.radians(orbit.elevation_deg)
    up = np.array([0.0, 0.0, 1.0])
    for k in range(orbit.count):
        theta = 2.0 * math.pi * k / orbit.count + 0.37
        eye = radii[k] * np.array([math.cos(theta) * math.cos(elev),
                                   math.sin(theta) * math.cos(elev),
                                   math.sin(elev)])
        forward = -eye / np.linalg.norm(eye)  # look at the origin
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        poses.append(ViewPose(view_id=f"view{k:02d}", camera_id=1,
                              rotation=rotmat_to_quat(rot),
                              translation=-rot @ eye,
                              image_name=f"view{k:02d}.png"))
    return ViewSet(cameras={1: camera}, poses=poses)


def distance_sweep_views(spec: SceneSpec, count: int = 20,
                         radius_min: float = 3.2, radius_max: float = 6.5,
                         azimuth: float = 0.9, elevation_deg: float = 28.0,
                         image_size: int | None = None) -> ViewSet:
    """Dolly views at a fixed azimuth with increasing orbit radius.

    Unlike the orbit, only the camera distance changes between views, so
    per-label quality measured over these views is a function of distance,
    which is the sampling the distance-quality fit needs.
    """
    size = image_size or spec.image_size[0]
    fx = (size / 2.0) / math.tan(math.radians(spec.fov_deg) / 2.0)
    camera = CameraModel(width=size, height=size, fx=fx, fy=fx,
                         cx=size / 2.0, cy=size / 2.0)
    elev = math.radians(elevation_deg)
    up = np.array([0.0, 0.0, 1.0])
    direction = np.array([math.cos(azimuth) * math.cos(elev),
                          math.sin(azimuth) * math.cos(elev),
                          math.sin(elev)])
    poses = []
    for k, r in enumerate(np.linspace(radius_min, radius_max, count)):
        eye = r * direction
        forward = -eye / np.linalg.norm(eye)
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        rot = np.stack([right, np.cross(forward, right), forward])
        poses.append(ViewPose(view_id=f"sweep{k:02d}", camera_id=1,
                              rotation=rotmat_to_quat(rot),
                              translation=-rot @ eye,
                              image_name=f"sweep{k:02d}.png"))
    return ViewSet(cameras={1: camera}, poses=poses)


def render_views(scene: SynthScene, views: ViewSet
                 ) -> tuple[dict[str, Image], dict[str, SemanticMask]]:
    """Ground truth and masks for an auxiliary view set of the scene."""
    opts = RenderOptions(background=scene.spec.background)
    gt = {p.view_id: render(scene.cloud, views.camera_for(p), p, opts)
          for p in views.poses}
    masks = {p.view_id: backproject_mask(
        scene.labeled_cloud, views.camera_for(p), p,
        splat_radius_px=scene.spec.mask_radius_px,
        fill_limit=scene.spec.mask_fill_limit)
        for p in views.poses}
    return gt, masks


def generate_scene(spec: SceneSpec) -> SynthScene:
    """Deterministically build the scene, its views, ground truth, and masks."""
    rng = np.random.default_rng(spec.seed)
    parts, labels = [], []
    for obj in sorted(spec.objects, key=lambda o: o.label_id):
        parts.append(_sample_object(rng, obj))
        labels.append(np.full(obj.count, obj.label_id, dtype=np.uint8))

    cloud = SplatCloud(
        positions=np.concatenate([p["positions"] for p in parts]),
        sh_dc=np.concatenate([p["sh_dc"] for p in parts]),
        sh_rest=np.zeros((sum(len(l) for l in labels), 0), dtype=np.float32),
        opacity_raw=np.concatenate([p["opacity"] for p in parts]),
        scale_raw=np.concatenate([p["scales"] for p in parts]),
        rotation_raw=np.concatenate([p["quats"] for p in parts]),
        sh_degree=0)
    gaussian_labels = np.concatenate(labels)

    views = _orbit_views(spec)
    opts = RenderOptions(background=spec.background)
    ground_truth = {p.view_id: render(cloud, views.camera_for(p), p, opts)
                    for p in views.poses}

    labeled = LabeledCloud(points=cloud.positions[::4].astype(np.float64),
                           labels=gaussian_labels[::4])
    masks = {p.view_id: backproject_mask(labeled, views.camera_for(p), p,
                                         splat_radius_px=spec.mask_radius_px,
                                         fill_limit=spec.mask_fill_limit)
             for p in views.poses}

    label_map = LabelMap({o.label_id: o.name
                          for o in sorted(spec.objects, key=lambda o: o.label_id)})
    return SynthScene(spec=spec, cloud=cloud, gaussian_labels=gaussian_labels,
                      labeled_cloud=labeled, views=views, masks=masks,
                      ground_truth=ground_truth, label_map=label_map)


def degrade(cloud: SplatCloud, level: float, seed: int,
            jitter: float = 0.02) -> SplatCloud:
    """Emulate an earlier training snapshot of a cloud.

    Keeps ceil(level * N) gaussians (seeded uniform subsample preserving
    order), inflates survivor scales by level^(-1/3) to keep coverage, and
    jitters positions with sigma = jitter * (1 - level).  level = 1 is the
    identity.
    """
    if not (0.0 < level <= 1.0):
        raise ValueError("level must lie in (0, 1]")
    n = len(cloud)
    rng = np.random.default_rng(seed)
    k = min(n, int(math.ceil(level * n)))
    keep = np.sort(rng.choice(n, size=k, replace=False))
    sub = cloud.take(keep)

    inflate = -math.log(level) / 3.0
    noise = rng.normal(0.0, jitter * (1.0 - level), size=(k, 3))
    return SplatCloud(
        positions=(sub.positions.astype(np.float64) + noise).astype(np.float32),
        sh_dc=sub.sh_dc,
        sh_rest=sub.sh_rest,
        opacity_raw=sub.opacity_raw,
        scale_raw=(sub.scale_raw.astype(np.float64) + inflate).astype(np.float32),
        rotation_raw=sub.rotation_raw,
        sh_degree=sub.sh_degree, validate=False)


def emit_checkpoint_series(scene: SynthScene, levels: list[float],
                           iteration_labels: list[int], out_root: str | Path,
                           jitter: float = 0.02) -> CheckpointSet:
    """Write the per-label checkpoint tree for ascending degradation levels."""
    if sorted(levels) != list(levels):
        raise ValueError("levels must be ascending")
    if len(levels) != len(iteration_labels):
        raise ValueError("levels and iteration_labels must align")
    out_root = Path(out_root)
    for label_id in scene.label_map.ids:
        sub = subset_by_label(scene.cloud, scene.gaussian_labels, label_id)
        name = scene.label_map.name(label_id)
        for idx, (level, iteration) in enumerate(zip(levels, iteration_labels)):
            degraded = degrade(sub, level,
                               seed=_series_seed(scene.spec.seed, label_id, idx),
                               jitter=jitter)
            path = out_root / name / f"iteration_{iteration}" / "point_cloud.ply"
            path.parent.mkdir(parents=True, exist_ok=True)
            try:
                path.write_bytes(write_splat_ply(degraded))
            except OSError as exc:
                raise OSError(f"failed writing checkpoint {path}: {exc}") from exc
    write_checkpoint_manifest(out_root, scene.label_map.to_json()["labels"],
                              list(iteration_labels))
    return load_checkpoint_catalog(out_root)


def _series_seed(base: int, label_id: int, level_index: int) -> list[int]:
    return [base, label_id, level_index]


def write_scene(scene: SynthScene, out_dir: str | Path,
                levels: list[float], iteration_labels: list[int],
                jitter: float = 0.02) -> Path:
    """Write a full scene directory in the layout the CLI consumes."""
    from .cameras import save_viewset
    from .splats import write_points_ply

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for view_id, img in scene.ground_truth.items():
        img.save(out / "images" / f"{view_id}.png")
    for view_id, mask in scene.masks.items():
        save_mask(mask, out / "masks" / f"{view_id}.png")
    save_viewset(scene.views, out / "viewset.json")
    (out / "points3D.ply").write_bytes(write_points_ply(scene.labeled_cloud.points))
    scene.label_map.save(out / "labels.json")
    emit_checkpoint_series(scene, levels, iteration_labels,
                           out / "checkpoints", jitter=jitter)
    (out / "scene_spec.json").write_text(json.dumps(scene.spec.to_json(), indent=2))

    config = {
        "scene_root": ".",
        "images": "images",
        "masks": "masks",
        "cameras": "viewset.json",
        "points": "points3D.ply",
        "label_map": "labels.json",
        "checkpoints": "checkpoints",
        "views": "all",
        "targets": [0.5, 0.9],
        "mode": "empirical",
        "out": "out",
        "background": list(scene.spec.background),
    }
    (out / "config.json").write_text(json.dumps(config, indent=2))
    return out


def standard_scene_spec(seed: int = 7) -> SceneSpec:
    """The frozen desk-scale fixture: 3 labels, 6 orbit views, 64x64 images."""
    return SceneSpec(
        seed=seed,
        objects=[
            ObjectSpec(label_id=1, shape="plane", count=640,
                       color=(0.25, 0.62, 0.22), center=(0.0, 0.0, -0.6),
                       size=1.6, name="ground"),
            ObjectSpec(label_id=2, shape="sphere", count=520,
                       color=(0.72, 0.28, 0.21), center=(-0.8, 0.7, 0.35),
                       size=0.5, name="dome"),
            ObjectSpec(label_id=3, shape="blobs", count=560,
                       color=(0.23, 0.33, 0.75), center=(0.9, -0.7, 0.45),
                       size=0.45, name="shrub"),
        ],
        cameras=OrbitSpec(count=6, radius_min=2.6, radius_max=4.8,
                          elevation_deg=28.0),
        image_size=(64, 64))


STANDARD_LEVELS = [0.12, 0.3, 0.55, 1.0]
STANDARD_ITERATIONS = [5000, 10000, 15000, 30000]
