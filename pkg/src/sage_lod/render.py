"""Deterministic CPU forward rasterizer for Gaussian splats.

EWA projection of each 3D Gaussian to a screen-space ellipse, view-dependent
spherical-harmonic color, and front-to-back alpha compositing over a global
depth sort.  All math is float64 and executed in a fixed order, so identical
inputs give bitwise-identical images.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Union

import numpy as np
from PIL import Image as PILImage

from .cameras import CameraModel, ViewPose
from .splats import SplatCloud, concat_clouds

NEAR_PLANE = 0.2          # 3DGS default near plane, world units
COV_FLOOR = 0.3           # anti-aliasing floor added to the 2D covariance diagonal
ALPHA_CAP = 0.99          # compositing alpha ceiling (3DGS rasterizer convention)
ALPHA_MIN = 1.0 / 255.0   # contributions below this are skipped
CULL_SIGMA = 3.0          # splats whose 3-sigma extent misses the image are culled
# raster extent: outside sqrt(2 ln 255) sigma, alpha < peak/255 <= ALPHA_MIN
RASTER_SIGMA = math.sqrt(2.0 * math.log(255.0))

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


@dataclass
class Image:
    """Linear-RGB raster, row-major, values in [0, 1]."""

    rgb: np.ndarray  # (H, W, 3) float64

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError("rgb must have shape (H, W, 3)")
        if self.rgb.size and (self.rgb.min() < 0.0 or self.rgb.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    def to_png(self) -> bytes:
        # 8-bit output, value = round(255 * linear); no gamma transform.
        quantized = np.rint(self.rgb * 255.0).astype(np.uint8)
        buf = io.BytesIO()
        PILImage.fromarray(quantized, mode="RGB").save(buf, format="PNG")
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_png())

    @staticmethod
    def from_png(data: bytes | str | Path) -> "Image":
        if isinstance(data, (str, Path)):
            img = PILImage.open(data)
        else:
            img = PILImage.open(io.BytesIO(data))
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
        return Image(rgb=arr)


@dataclass
class RenderOptions:
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    tau: float = 1e-4  # early-stop transmittance


@dataclass(frozen=True)
class Splat2D:
    center_px: np.ndarray   # (2,)
    cov2d: np.ndarray       # (2, 2) symmetric, after the +0.3 I floor
    depth: float
    color_rgb: np.ndarray   # (3,) in [0, 1]
    alpha_peak: float


class ProjectedSplats:
    """Column-wise projected splats surviving culling, plus source indices."""

    __slots__ = ("centers", "cov_a", "cov_b", "cov_c", "conic_a", "conic_b",
                 "conic_c", "depth", "color", "alpha", "radius", "source")

    def __init__(self, centers, cov_a, cov_b, cov_c, conic_a, conic_b, conic_c,
                 depth, color, alpha, radius, source):
        self.centers = centers
        self.cov_a, self.cov_b, self.cov_c = cov_a, cov_b, cov_c
        self.conic_a, self.conic_b, self.conic_c = conic_a, conic_b, conic_c
        self.depth = depth
        self.color = color
        self.alpha = alpha
        self.radius = radius
        self.source = source

    def __len__(self) -> int:
        return len(self.depth)


def eval_sh(dc, rest, degree: int, view_dir) -> np.ndarray:
    """Spherical-harmonic color for one splat seen from `view_dir` (unit).

    color = clamp(sum_k c_k Y_k(dir) + 0.5, 0, 1) per channel.
    """
    d = np.asarray(view_dir, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ValueError("view_dir must be unit length")
    rgb = eval_sh_batch(np.asarray(dc, np.float64)[None, :],
                        np.asarray(rest, np.float64)[None, :], degree, d[None, :])
    return rgb[0]


def eval_sh_batch(dc: np.ndarray, rest: np.ndarray, degree: int,
                  dirs: np.ndarray) -> np.ndarray:
    """Vectorized SH color; dc (N,3), rest (N, 3k) channel-major, dirs (N,3)."""
    n = dc.shape[0]
    out = SH_C0 * dc.astype(np.float64)
    if degree >= 1:
        per = rest.shape[1] // 3
        coeffs = rest.astype(np.float64).reshape(n, 3, per)  # (N, channel, coeff)
        x, y, z = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
        out = out + (-SH_C1 * y * coeffs[:, :, 0]
                     + SH_C1 * z * coeffs[:, :, 1]
                     - SH_C1 * x * coeffs[:, :, 2])
        if degree >= 2:
            xx, yy, zz = x * x, y * y, z * z
            xy, yz, xz = x * y, y * z, x * z
            out = out + (SH_C2[0] * xy * coeffs[:, :, 3]
                         + SH_C2[1] * yz * coeffs[:, :, 4]
                         + SH_C2[2] * (2.0 * zz - xx - yy) * coeffs[:, :, 5]
                         + SH_C2[3] * xz * coeffs[:, :, 6]
                         + SH_C2[4] * (xx - yy) * coeffs[:, :, 7])
            if degree >= 3:
                out = out + (SH_C3[0] * y * (3.0 * xx - yy) * coeffs[:, :, 8]
                             + SH_C3[1] * xy * z * coeffs[:, :, 9]
                             + SH_C3[2] * y * (4.0 * zz - xx - yy) * coeffs[:, :, 10]
                             + SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy) * coeffs[:, :, 11]
                             + SH_C3[4] * x * (4.0 * zz - xx - yy) * coeffs[:, :, 12]
                             + SH_C3[5] * z * (xx - yy) * coeffs[:, :, 13]
                             + SH_C3[6] * x * (xx - 3.0 * yy) * coeffs[:, :, 14])
    return np.clip(out + 0.5, 0.0, 1.0)


def project_cloud(cloud: SplatCloud, camera: CameraModel,
                  pose: ViewPose) -> ProjectedSplats:
    """EWA-project every gaussian; drop those behind the near plane or whose
    3-sigma screen extent misses the image."""
    n = len(cloud)
    if n == 0:
        e = np.zeros(0)
        return ProjectedSplats(np.zeros((0, 2)), e, e, e, e, e, e, e,
                               np.zeros((0, 3)), e, e, np.zeros(0, np.int64))

    R = pose.rotation_matrix
    t = pose.translation
    pos = cloud.positions.astype(np.float64)
    p_cam = pos @ R.T + t
    tx, ty, tz = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]

    # world covariance Sigma = Rq S S^T Rq^T via M = Rq diag(s)
    q = cloud.rotations  # normalized (N, 4)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    s = cloud.scales     # (N, 3)
    rot = np.empty((n, 3, 3))
    rot[:, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    rot[:, 0, 1] = 2.0 * (x * y - z * w)
    rot[:, 0, 2] = 2.0 * (x * z + y * w)
    rot[:, 1, 0] = 2.0 * (x * y + z * w)
    rot[:, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    rot[:, 1, 2] = 2.0 * (y * z - x * w)
    rot[:, 2, 0] = 2.0 * (x * z - y * w)
    rot[:, 2, 1] = 2.0 * (y * z + x * w)
    rot[:, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    m = rot * s[:, None, :]                       # Rq diag(s)
    sigma = m @ np.swapaxes(m, 1, 2)              # (N, 3, 3)
    cov_cam = R[None] @ sigma @ R.T[None]         # W Sigma W^T

    fx, fy = camera.fx, camera.fy
    inv_z = 1.0 / np.where(tz > 0, tz, 1.0)
    # perspective Jacobian rows: [fx/z, 0, -fx x/z^2], [0, fy/z, -fy y/z^2]
    j00 = fx * inv_z
    j02 = -fx * tx * inv_z * inv_z
    j11 = fy * inv_z
    j12 = -fy * ty * inv_z * inv_z
    c = cov_cam
    # cov2d = J C J^T restricted to 2x2, computed componentwise
    a = (j00 * (c[:, 0, 0] * j00 + c[:, 0, 2] * j02)
         + j02 * (c[:, 2, 0] * j00 + c[:, 2, 2] * j02)) + COV_FLOOR
    b = (j00 * (c[:, 0, 1] * j11 + c[:, 0, 2] * j12)
         + j02 * (c[:, 2, 1] * j11 + c[:, 2, 2] * j12))
    cc = (j11 * (c[:, 1, 1] * j11 + c[:, 1, 2] * j12)
          + j12 * (c[:, 2, 1] * j11 + c[:, 2, 2] * j12)) + COV_FLOOR

    det = a * cc - b * b
    mid = 0.5 * (a + cc)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    sigma_px = np.sqrt(lam_max)

    u = fx * tx * inv_z + camera.cx
    v = fy * ty * inv_z + camera.cy
    cull_r = CULL_SIGMA * sigma_px
    keep = ((tz > NEAR_PLANE)
            & (det > 0)
            & (u + cull_r >= 0) & (u - cull_r <= camera.width - 1)
            & (v + cull_r >= 0) & (v - cull_r <= camera.height - 1))

    idx = np.flatnonzero(keep)
    a, b, cc, det = a[idx], b[idx], cc[idx], det[idx]
    inv_det = 1.0 / det
    centers = np.stack([u[idx], v[idx]], axis=1)

    cam_center = pose.camera_center
    diff = pos[idx] - cam_center
    norm = np.linalg.norm(diff, axis=1, keepdims=True)
    dirs = diff / np.where(norm > 0, norm, 1.0)
    color = eval_sh_batch(cloud.sh_dc[idx], cloud.sh_rest[idx],
                          cloud.sh_degree, dirs)

    alpha = 1.0 / (1.0 + np.exp(-cloud.opacity_raw[idx].astype(np.float64)))

    return ProjectedSplats(
        centers=centers,
        cov_a=a, cov_b=b, cov_c=cc,
        conic_a=cc * inv_det, conic_b=-b * inv_det, conic_c=a * inv_det,
        depth=tz[idx],
        color=color,
        alpha=alpha,
        radius=RASTER_SIGMA * sigma_px[idx],
        source=idx,
    )


def project_gaussian(gaussian, camera: CameraModel, pose: ViewPose) -> Splat2D | None:
    """Project one splat; None when culled (near plane or off screen)."""
    cloud = SplatCloud(
        gaussian.position[None, :], gaussian.sh_dc[None, :],
        gaussian.sh_rest[None, :], np.atleast_1d(gaussian.opacity_raw),
        gaussian.scale_raw[None, :], gaussian.rotation_raw[None, :],
        sh_degree={0: 0, 9: 1, 24: 2, 45: 3}[gaussian.sh_rest.shape[0]],
        validate=False)
    proj = project_cloud(cloud, camera, pose)
    if len(proj) == 0:
        return None
    cov = np.array([[proj.cov_a[0], proj.cov_b[0]],
                    [proj.cov_b[0], proj.cov_c[0]]])
    return Splat2D(center_px=proj.centers[0], cov2d=cov,
                   depth=float(proj.depth[0]), color_rgb=proj.color[0],
                   alpha_peak=float(proj.alpha[0]))


def render(cloud: SplatCloud, camera: CameraModel, pose: ViewPose,
           opts: RenderOptions | None = None) -> Image:
    """Rasterize a cloud: global front-to-back sort, per-splat bounding-box
    compositing with early stop once transmittance drops below tau."""
    opts = opts or RenderOptions()
    h, w = camera.height, camera.width
    color_acc = np.zeros((h, w, 3), dtype=np.float64)
    transmit = np.ones((h, w), dtype=np.float64)

    splats = project_cloud(cloud, camera, pose)
    order = np.lexsort((splats.source, splats.depth))  # depth asc, ties by index

    xs_full = np.arange(w, dtype=np.float64)
    ys_full = np.arange(h, dtype=np.float64)

    for k in order:
        cx, cy = splats.centers[k]
        r = splats.radius[k]
        x0 = max(0, int(np.floor(cx - r)))
        x1 = min(w - 1, int(np.ceil(cx + r)))
        y0 = max(0, int(np.floor(cy - r)))
        y1 = min(h - 1, int(np.ceil(cy + r)))
        if x0 > x1 or y0 > y1:
            continue
        dx = xs_full[x0:x1 + 1][None, :] - cx
        dy = ys_full[y0:y1 + 1][:, None] - cy
        q = (splats.conic_a[k] * dx * dx
             + 2.0 * splats.conic_b[k] * dx * dy
             + splats.conic_c[k] * dy * dy)
        alpha = np.minimum(ALPHA_CAP, splats.alpha[k] * np.exp(-0.5 * q))
        t_block = transmit[y0:y1 + 1, x0:x1 + 1]
        active = (alpha >= ALPHA_MIN) & (t_block >= opts.tau)
        if not active.any():
            continue
        contrib = np.where(active, t_block * alpha, 0.0)
        color_acc[y0:y1 + 1, x0:x1 + 1] += contrib[:, :, None] * splats.color[k]
        transmit[y0:y1 + 1, x0:x1 + 1] = np.where(
            active, t_block * (1.0 - alpha), t_block)

    color_acc += transmit[:, :, None] * np.asarray(opts.background, dtype=np.float64)
    return Image(rgb=np.clip(color_acc, 0.0, 1.0))


def subset_by_label(cloud: SplatCloud, labels, l: int) -> SplatCloud:
    """Order-preserving filter of a cloud by per-gaussian label."""
    lab = np.asarray(labels)
    if len(lab) != len(cloud):
        raise ValueError(
            f"labels length {len(lab)} != cloud size {len(cloud)}")
    return cloud.take(np.flatnonzero(lab == l))


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------

CloudRef = Union[SplatCloud, Callable[[], SplatCloud]]


@dataclass
class ManifestEntry:
    label_id: int
    iteration: int
    cloud: CloudRef

    def resolve(self) -> SplatCloud:
        return self.cloud() if callable(self.cloud) else self.cloud


@dataclass
class CompositionManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        ids = [e.label_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("at most one manifest entry per label")

    def merged_cloud(self) -> SplatCloud:
        return concat_clouds([e.resolve() for e in self.entries])


def render_composed(manifest: CompositionManifest, camera: CameraModel,
                    pose: ViewPose, opts: RenderOptions | None = None) -> Image:
    """Composite in splat space: merge all entry clouds, then render with the
    usual global depth sort (never per-layer image pasting)."""
    return render(manifest.merged_cloud(), camera, pose, opts)
