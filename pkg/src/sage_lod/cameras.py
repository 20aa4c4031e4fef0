"""Pinhole cameras, COLMAP pose ingestion, projection, and label distances."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ColmapParseError, UnsupportedCameraModelError

DEPTH_EPS = 1e-8  # points with camera-space z below this count as behind


@dataclass(frozen=True)
class CameraModel:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside the image")


@dataclass
class ViewPose:
    """World-to-camera pose in the COLMAP convention (qw qx qy qz, tx ty tz)."""

    view_id: str
    camera_id: int
    rotation: np.ndarray     # (4,) unit quaternion (w, x, y, z)
    translation: np.ndarray  # (3,)
    image_name: str = ""

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        n = float(np.linalg.norm(self.rotation))
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"pose quaternion norm {n} not unit within 1e-6")

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    @property
    def camera_center(self) -> np.ndarray:
        """Camera center in world coordinates, -R^T t."""
        return -self.rotation_matrix.T @ self.translation


@dataclass
class ViewSet:
    cameras: dict[int, CameraModel]
    poses: list[ViewPose]

    def __post_init__(self):
        for pose in self.poses:
            if pose.camera_id not in self.cameras:
                raise ValueError(
                    f"pose {pose.view_id!r} references unknown camera {pose.camera_id}")

    def pose(self, view_id: str) -> ViewPose:
        for p in self.poses:
            if p.view_id == view_id:
                return p
        raise KeyError(f"no view {view_id!r}")

    def camera_for(self, pose: ViewPose) -> CameraModel:
        return self.cameras[pose.camera_id]

    @property
    def view_ids(self) -> list[str]:
        return [p.view_id for p in self.poses]


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix from a (w, x, y, z) quaternion (normalized first)."""
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Quaternion (w, x, y, z) from a rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = 0.5 / math.sqrt(t + 1.0)
        q = np.array([0.25 / s, (R[2, 1] - R[1, 2]) * s,
                      (R[0, 2] - R[2, 0]) * s, (R[1, 0] - R[0, 1]) * s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                      (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                      0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    return q / np.linalg.norm(q)


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

def project_point(camera: CameraModel, pose: ViewPose, p) -> tuple[np.ndarray, float] | None:
    """Project one world point. Returns (pixel (2,), depth) or None if the
    point is behind the camera (z <= 1e-8)."""
    p_cam = pose.rotation_matrix @ np.asarray(p, dtype=np.float64) + pose.translation
    z = float(p_cam[2])
    if z <= DEPTH_EPS:
        return None
    u = camera.fx * p_cam[0] / z + camera.cx
    v = camera.fy * p_cam[1] / z + camera.cy
    return np.array([u, v]), z


def project_points(camera: CameraModel, pose: ViewPose,
                   points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection. Returns (pixels (N,2), depths (N,), valid (N,))
    where valid marks points in front of the camera; pixels of invalid points
    are undefined."""
    pts = np.asarray(points, dtype=np.float64)
    p_cam = pts @ pose.rotation_matrix.T + pose.translation
    z = p_cam[:, 2]
    valid = z > DEPTH_EPS
    safe_z = np.where(valid, z, 1.0)
    u = camera.fx * p_cam[:, 0] / safe_z + camera.cx
    v = camera.fy * p_cam[:, 1] / safe_z + camera.cy
    return np.stack([u, v], axis=1), z, valid


def pixel_indices(pixels: np.ndarray, camera: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Round continuous pixel coordinates (half-up) to integer indices and
    flag the in-bounds ones."""
    ix = np.floor(pixels[:, 0] + 0.5).astype(np.int64)
    iy = np.floor(pixels[:, 1] + 0.5).astype(np.int64)
    inside = (ix >= 0) & (ix < camera.width) & (iy >= 0) & (iy < camera.height)
    return np.stack([ix, iy], axis=1), inside


def min_label_distance(cloud, camera: CameraModel, pose: ViewPose,
                       label: int) -> float | None:
    """Distance from the camera center to the nearest in-frustum point
    carrying `label`; None when no labeled point projects into the image."""
    stats = label_distance_stats(cloud, camera, pose, labels=[int(label)])
    entry = stats.get(int(label))
    return entry[0] if entry else None


def label_distance_stats(cloud, camera: CameraModel, pose: ViewPose,
                         labels=None) -> dict[int, tuple[float, float]]:
    """Per-label (min, mean) camera-center distance over in-frustum points."""
    pts = np.asarray(cloud.points, dtype=np.float64)
    lab = np.asarray(cloud.labels)
    pixels, _, valid = project_points(camera, pose, pts)
    _, inside = pixel_indices(pixels, camera)
    ok = valid & inside
    center = pose.camera_center
    out: dict[int, tuple[float, float]] = {}
    wanted = sorted(set(int(l) for l in (labels if labels is not None else np.unique(lab))
                        if int(l) != 255))
    for l in wanted:
        sel = ok & (lab == l)
        if not sel.any():
            continue
        d = np.linalg.norm(pts[sel] - center, axis=1)
        out[l] = (float(d.min()), float(d.mean()))
    return out


# ---------------------------------------------------------------------------
# COLMAP text ingestion
# ---------------------------------------------------------------------------

def parse_colmap(cameras_text: bytes | str, images_text: bytes | str) -> ViewSet:
    """Parse COLMAP `cameras.txt` / `images.txt` (SIMPLE_PINHOLE / PINHOLE).

    Pose lines of images.txt are alternated with 2D-point lines, which are
    skipped.  Poses are stored exactly as written (world-to-camera).
    """
    cameras: dict[int, CameraModel] = {}
    for lineno, line in _data_lines(cameras_text):
        parts = line.split()
        if len(parts) < 5:
            raise ColmapParseError("camera line has too few fields", line=lineno)
        try:
            cam_id = int(parts[0])
            width, height = int(parts[2]), int(parts[3])
            params = [float(x) for x in parts[4:]]
        except ValueError:
            raise ColmapParseError("unparseable camera line", line=lineno)
        model = parts[1]
        if model == "SIMPLE_PINHOLE":
            if len(params) != 3:
                raise ColmapParseError("SIMPLE_PINHOLE expects 3 params", line=lineno)
            fx = fy = params[0]
            cx, cy = params[1], params[2]
        elif model == "PINHOLE":
            if len(params) != 4:
                raise ColmapParseError("PINHOLE expects 4 params", line=lineno)
            fx, fy, cx, cy = params
        else:
            raise UnsupportedCameraModelError(
                f"camera model {model!r} unsupported (line {lineno})")
        cameras[cam_id] = CameraModel(width, height, fx, fy, cx, cy)

    poses: list[ViewPose] = []
    expecting_points = False
    for lineno, line in _data_lines(images_text):
        if expecting_points:
            expecting_points = False  # 2D point line, ignored
            continue
        parts = line.split()
        if len(parts) < 10:
            raise ColmapParseError("image line has too few fields", line=lineno)
        try:
            q = np.array([float(parts[i]) for i in range(1, 5)])
            t = np.array([float(parts[i]) for i in range(5, 8)])
            cam_id = int(parts[8])
        except ValueError:
            raise ColmapParseError("unparseable image line", line=lineno)
        name = parts[9]
        view_id = Path(name).stem
        poses.append(ViewPose(view_id=view_id, camera_id=cam_id, rotation=q,
                              translation=t, image_name=name))
        expecting_points = True

    return ViewSet(cameras=cameras, poses=poses)


def parse_colmap_points(points_text: bytes | str) -> np.ndarray:
    """Extract the (N, 3) point array from COLMAP `points3D.txt`."""
    pts = []
    for lineno, line in _data_lines(points_text):
        parts = line.split()
        if len(parts) < 4:
            raise ColmapParseError("points3D line has too few fields", line=lineno)
        try:
            pts.append([float(parts[1]), float(parts[2]), float(parts[3])])
        except ValueError:
            raise ColmapParseError("unparseable points3D line", line=lineno)
    return np.asarray(pts, dtype=np.float64).reshape(-1, 3)


def _data_lines(text: bytes | str):
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    for i, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        yield i, stripped


# ---------------------------------------------------------------------------
# JSON ViewSet fixture format
# ---------------------------------------------------------------------------

def viewset_to_json(views: ViewSet) -> dict:
    return {
        "cameras": {
            str(cid): {"width": c.width, "height": c.height, "fx": c.fx,
                       "fy": c.fy, "cx": c.cx, "cy": c.cy}
            for cid, c in views.cameras.items()
        },
        "views": [
            {"view_id": p.view_id, "camera_id": p.camera_id,
             "rotation": [float(x) for x in p.rotation],
             "translation": [float(x) for x in p.translation],
             "image_name": p.image_name}
            for p in views.poses
        ],
    }


def viewset_from_json(obj: dict) -> ViewSet:
    cameras = {
        int(cid): CameraModel(int(c["width"]), int(c["height"]), float(c["fx"]),
                              float(c["fy"]), float(c["cx"]), float(c["cy"]))
        for cid, c in obj["cameras"].items()
    }
    poses = [
        ViewPose(view_id=str(v["view_id"]), camera_id=int(v["camera_id"]),
                 rotation=np.asarray(v["rotation"], dtype=np.float64),
                 translation=np.asarray(v["translation"], dtype=np.float64),
                 image_name=str(v.get("image_name", "")))
        for v in obj["views"]
    ]
    return ViewSet(cameras=cameras, poses=poses)


def load_viewset(path: str | Path) -> ViewSet:
    """Load a ViewSet from a COLMAP sparse dir or a viewset JSON file."""
    path = Path(path)
    if path.is_dir():
        return parse_colmap((path / "cameras.txt").read_text(),
                            (path / "images.txt").read_text())
    return viewset_from_json(json.loads(path.read_text()))


def save_viewset(views: ViewSet, path: str | Path) -> None:
    Path(path).write_text(json.dumps(viewset_to_json(views), indent=2))
