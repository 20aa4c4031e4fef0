"""Pipeline configuration: a JSON file describing one scene directory.

The directory convention mirrors the usual 3DGS training layout (`images/`,
`sparse/0/` or a viewset JSON, plus `masks/` and `checkpoints/`), so exported
real data drops in unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InputError


@dataclass
class PipelineConfig:
    scene_root: Path
    images_dir: Path
    masks_dir: Path
    cameras_path: Path          # COLMAP sparse dir or viewset JSON
    points_path: Path           # SfM points: PLY or COLMAP points3D.txt
    label_map_path: Path
    checkpoints_dir: Path
    out_dir: Path
    views: list[str] | str = "all"
    targets: list[float] = field(default_factory=lambda: [0.5, 0.7])
    mode: str = "empirical"
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    tau: float = 1e-4
    seed: int = 0
    dmin_source: str = "sfm"            # or "centers": use splat centers
    splat_radius_px: float = 2.0
    fill_limit: float = 32.0

    @staticmethod
    def load(path: str | Path) -> "PipelineConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise InputError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise InputError(f"config is not valid JSON: {exc}")
        root = (path.parent / raw.get("scene_root", ".")).resolve()

        def p(key, default):
            return root / raw.get(key, default)

        cfg = PipelineConfig(
            scene_root=root,
            images_dir=p("images", "images"),
            masks_dir=p("masks", "masks"),
            cameras_path=p("cameras", "sparse/0"),
            points_path=p("points", "sparse/0/points3D.txt"),
            label_map_path=p("label_map", "labels.json"),
            checkpoints_dir=p("checkpoints", "checkpoints"),
            out_dir=p("out", "out"),
            views=raw.get("views", "all"),
            targets=[float(t) for t in raw.get("targets", [0.5, 0.7])],
            mode=raw.get("mode", "empirical"),
            background=tuple(raw.get("background", (0.0, 0.0, 0.0))),
            tau=float(raw.get("tau", 1e-4)),
            seed=int(raw.get("seed", 0)),
            dmin_source=raw.get("dmin_source", "sfm"),
            splat_radius_px=float(raw.get("splat_radius_px", 2.0)),
            fill_limit=float(raw.get("fill_limit", 32.0)),
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        for t in self.targets:
            if not (0.0 < t < 1.0):
                raise InputError(f"target {t} outside (0, 1)")
        if self.mode not in ("empirical", "model"):
            raise InputError(f"unknown selection mode {self.mode!r}")
        if self.dmin_source not in ("sfm", "centers"):
            raise InputError(f"unknown dmin_source {self.dmin_source!r}")

    def require_paths(self, *names: str) -> None:
        """Check that the named path attributes exist on disk."""
        for name in names:
            path = getattr(self, name)
            if not Path(path).exists():
                raise InputError(f"{name.replace('_', ' ')} missing: {path}")

    @property
    def labeled_points_path(self) -> Path:
        return self.out_dir / "labeled_points.ply"

    @property
    def profile_json_path(self) -> Path:
        return self.out_dir / "profile.json"

    @property
    def curves_path(self) -> Path:
        return self.out_dir / "curves.json"

    def plan_path(self, target: float, view_id: str) -> Path:
        return self.out_dir / f"plan_{view_id}_t{target:g}.json"
