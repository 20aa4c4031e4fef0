"""Semantic masks, 3D label voting, and label back-projection.

Labels are 8-bit ids; 255 is reserved for unlabeled/ignore.  3D points get
their label by majority vote over all views they project into; novel-view
masks are produced by z-buffered splatting of the labeled points followed by
a distance-capped nearest-label fill.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .cameras import CameraModel, ViewPose, ViewSet, project_points, pixel_indices
from .errors import MaskFormatError, MaskGeometryError, PlySchemaError
from .splats import _parse_ply_header, _read_vertex_table, _as_bytes

log = logging.getLogger(__name__)

UNLABELED = 255


@dataclass
class LabelMap:
    """label_id -> human-readable name (e.g. 2 -> "grass-merged")."""

    entries: dict[int, str]

    def __post_init__(self):
        self.entries = {int(k): str(v) for k, v in self.entries.items()}
        if UNLABELED in self.entries:
            raise ValueError("label id 255 is reserved for unlabeled")
        names = list(self.entries.values())
        if len(set(self.entries)) != len(names):
            raise ValueError("duplicate label ids")

    def name(self, label_id: int) -> str:
        return self.entries.get(int(label_id), f"label{label_id}")

    def id_for(self, name: str) -> int:
        for lid, n in self.entries.items():
            if n == name:
                return lid
        raise KeyError(name)

    @property
    def ids(self) -> list[int]:
        return sorted(self.entries)

    def to_json(self) -> dict:
        return {"labels": {name: lid for lid, name in sorted(self.entries.items())}}

    @staticmethod
    def from_json(obj: dict) -> "LabelMap":
        return LabelMap({int(v): str(k) for k, v in obj["labels"].items()})

    @staticmethod
    def load(path: str | Path) -> "LabelMap":
        return LabelMap.from_json(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


@dataclass
class SemanticMask:
    width: int
    height: int
    labels: np.ndarray  # (H, W) uint8
    view_id: str

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.shape != (self.height, self.width):
            raise ValueError(
                f"label array shape {self.labels.shape} != (h={self.height}, w={self.width})")

    def pixel_count(self, label_id: int) -> int:
        return int(np.count_nonzero(self.labels == label_id))

    def present_labels(self) -> list[int]:
        ids = np.unique(self.labels)
        return [int(i) for i in ids if i != UNLABELED]


@dataclass
class LabeledCloud:
    """3D points with one semantic label each plus the per-point vote tallies."""

    points: np.ndarray       # (N, 3)
    labels: np.ndarray       # (N,) uint8, 255 = unresolved
    vote_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    votes: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), np.int64))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
        if len(self.labels) != len(self.points):
            raise ValueError("labels length must match points length")

    def __len__(self) -> int:
        return len(self.points)

    def vote_counts(self, index: int) -> dict[int, int]:
        """Diagnostic per-point tally label_id -> vote count."""
        if self.votes.size == 0:
            return {}
        row = self.votes[index]
        return {int(l): int(c) for l, c in zip(self.vote_labels, row) if c > 0}

    def present_labels(self) -> list[int]:
        ids = np.unique(self.labels)
        return [int(i) for i in ids if i != UNLABELED]


# ---------------------------------------------------------------------------
# Mask I/O (8-bit single-channel PNG)
# ---------------------------------------------------------------------------

def load_mask(data: bytes | str | Path, view_id: str,
              expected_size: tuple[int, int] | None = None) -> SemanticMask:
    """Load an 8-bit single-channel PNG mask.

    `expected_size` is (width, height) from the associated camera; a mismatch
    raises MaskGeometryError.
    """
    if isinstance(data, (str, Path)):
        img = PILImage.open(data)
    else:
        img = PILImage.open(io.BytesIO(data))
    if img.mode not in ("L", "P"):
        raise MaskFormatError(
            f"mask for view {view_id!r} must be single-channel 8-bit, got mode {img.mode!r}")
    arr = np.asarray(img, dtype=np.uint8)
    h, w = arr.shape
    if expected_size is not None and (w, h) != tuple(expected_size):
        raise MaskGeometryError(
            f"mask for view {view_id!r} is {w}x{h}, camera expects "
            f"{expected_size[0]}x{expected_size[1]}")
    return SemanticMask(width=w, height=h, labels=arr, view_id=view_id)


def save_mask(mask: SemanticMask, path: str | Path) -> None:
    PILImage.fromarray(mask.labels, mode="L").save(path, format="PNG")


# ---------------------------------------------------------------------------
# Majority-vote label assignment
# ---------------------------------------------------------------------------

def assign_labels(points, views: ViewSet, masks: list[SemanticMask],
                  zbuffer_visibility: bool = False,
                  zbuffer_slack: float = 0.02) -> LabeledCloud:
    """Label 3D points by majority vote over their in-image projections.

    For each point and each view whose mask pixel (under half-up rounding of
    the projected position) carries a label, one vote is recorded; the final
    label is the most frequent one, ties resolved to the lowest id, and 255
    when no vote was cast.

    `zbuffer_visibility` enables an optional occlusion pre-pass (ablation
    only): a per-pixel minimum-depth buffer built from the points themselves,
    with points farther than (1 + zbuffer_slack) times the buffer depth not
    voting.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not masks:
        raise ValueError("at least one semantic mask is required")
    by_view = {p.view_id: p for p in views.poses}
    for m in masks:
        if m.view_id not in by_view:
            raise ValueError(f"mask view {m.view_id!r} has no matching pose")

    label_ids = sorted({int(l) for m in masks for l in m.present_labels()})
    n = len(pts)
    votes = np.zeros((n, len(label_ids)), dtype=np.int64)
    col = {l: j for j, l in enumerate(label_ids)}

    for m in masks:
        pose = by_view[m.view_id]
        camera = views.camera_for(pose)
        if (m.width, m.height) != (camera.width, camera.height):
            raise MaskGeometryError(
                f"mask for view {m.view_id!r} is {m.width}x{m.height}, camera is "
                f"{camera.width}x{camera.height}")
        pixels, depth, valid = project_points(camera, pose, pts)
        idx, inside = pixel_indices(pixels, camera)
        ok = valid & inside
        if zbuffer_visibility and ok.any():
            flat = idx[ok, 1] * camera.width + idx[ok, 0]
            zbuf = np.full(camera.width * camera.height, np.inf)
            np.minimum.at(zbuf, flat, depth[ok])
            visible = depth[ok] <= zbuf[flat] * (1.0 + zbuffer_slack)
            sub = np.flatnonzero(ok)
            ok = np.zeros_like(ok)
            ok[sub[visible]] = True
        if not ok.any():
            continue
        pixel_labels = m.labels[idx[ok, 1], idx[ok, 0]]
        labeled = pixel_labels != UNLABELED
        rows = np.flatnonzero(ok)[labeled]
        cols = np.array([col[int(l)] for l in pixel_labels[labeled]], dtype=np.int64)
        np.add.at(votes, (rows, cols), 1)

    labels = np.full(n, UNLABELED, dtype=np.uint8)
    if label_ids:
        any_vote = votes.sum(axis=1) > 0
        best = np.argmax(votes, axis=1)  # first max = lowest label id
        labels[any_vote] = np.asarray(label_ids, dtype=np.uint8)[best[any_vote]]
    return LabeledCloud(points=pts, labels=labels,
                        vote_labels=np.asarray(label_ids, dtype=np.int64),
                        votes=votes)


# ---------------------------------------------------------------------------
# Label back-projection into a novel view
# ---------------------------------------------------------------------------

def backproject_mask(cloud: LabeledCloud, camera: CameraModel, pose: ViewPose,
                     splat_radius_px: float = 2.0,
                     fill_limit: float = 32.0) -> SemanticMask:
    """Render the labeled points into a semantic mask for the given view.

    Each labeled point stamps a disc of `splat_radius_px` pixels; the
    nearest depth wins per pixel (ties by point order).  Pixels left
    unlabeled are filled from their nearest labeled pixel when within
    `fill_limit` pixels (Euclidean), otherwise they stay 255.
    """
    if splat_radius_px < 0.5:
        raise ValueError("splat_radius_px must be >= 0.5")
    h, w = camera.height, camera.width
    out = np.full((h, w), UNLABELED, dtype=np.uint8)

    labeled = cloud.labels != UNLABELED
    if labeled.any():
        pts = cloud.points[labeled]
        labs = cloud.labels[labeled]
        pixels, depth, valid = project_points(camera, pose, pts)
        idx, _ = pixel_indices(pixels, camera)

        r = float(splat_radius_px)
        ri = int(np.floor(r))
        offs = [(dx, dy) for dy in range(-ri, ri + 1) for dx in range(-ri, ri + 1)
                if dx * dx + dy * dy <= r * r]
        offs = np.asarray(offs, dtype=np.int64)

        src = np.flatnonzero(valid)
        if src.size:
            cx = idx[src, 0][:, None] + offs[None, :, 0]
            cy = idx[src, 1][:, None] + offs[None, :, 1]
            pid = np.broadcast_to(src[:, None], cx.shape)
            inb = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
            flat = (cy[inb] * w + cx[inb]).ravel()
            pid = pid[inb].ravel()
            order = np.lexsort((pid, depth[pid], flat))
            flat, pid = flat[order], pid[order]
            first = np.ones(len(flat), dtype=bool)
            first[1:] = flat[1:] != flat[:-1]
            out.reshape(-1)[flat[first]] = labs[pid[first]]

    assigned = out != UNLABELED
    if assigned.any() and not assigned.all():
        dist, (iy, ix) = ndimage.distance_transform_edt(~assigned, return_indices=True)
        fill = (~assigned) & (dist <= fill_limit)
        out[fill] = out[iy[fill], ix[fill]]
    return SemanticMask(width=w, height=h, labels=out, view_id=pose.view_id)


# ---------------------------------------------------------------------------
# Labeled point-cloud PLY (positions + uchar label)
# ---------------------------------------------------------------------------

def write_labeled_ply(cloud: LabeledCloud) -> bytes:
    n = len(cloud)
    header = ("ply\n"
              "format binary_little_endian 1.0\n"
              f"element vertex {n}\n"
              "property float x\n"
              "property float y\n"
              "property float z\n"
              "property uchar label\n"
              "end_header\n").encode("ascii")
    rec = np.zeros(n, dtype=np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                      ("label", "u1")]))
    rec["x"], rec["y"], rec["z"] = cloud.points.T.astype(np.float32)
    rec["label"] = cloud.labels
    return header + rec.tobytes()


def read_labeled_ply(data: bytes | str | Path) -> LabeledCloud:
    raw = _as_bytes(data)
    header = _parse_ply_header(raw)
    names = [n for n, _ in header.properties]
    for req in ("x", "y", "z", "label"):
        if req not in names:
            raise PlySchemaError(f"missing vertex property {req!r}")
    cols = _read_vertex_table(raw, header)
    pts = np.stack([cols["x"], cols["y"], cols["z"]], axis=1).astype(np.float64)
    return LabeledCloud(points=pts, labels=cols["label"].astype(np.uint8))
