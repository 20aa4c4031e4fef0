"""Image quality metrics (SSIM / PSNR), mask-restricted variants, and
quality-profile construction over a checkpoint catalog."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .cameras import ViewSet, label_distance_stats
from .errors import ProfilingError
from .render import Image, RenderOptions, render
from .semantics import LabeledCloud, LabelMap, SemanticMask
from .splats import CheckpointSet

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

THREADS_ENV = "SAGE_LOD_THREADS"


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


_WINDOW_1D = _gaussian_window()


def _filter2d(x: np.ndarray) -> np.ndarray:
    # separable 11x11 Gaussian, symmetric-reflect padding at the borders
    tmp = correlate1d(x, _WINDOW_1D, axis=0, mode="reflect")
    return correlate1d(tmp, _WINDOW_1D, axis=1, mode="reflect")


def ssim(img: Image, ref: Image) -> tuple[float, np.ndarray]:
    """Channel-averaged SSIM on the [0, 1] range.

    Returns (mean, map); the map is full-size with reflect padding and the
    mean is its average, so mask-restricted means over a pixel partition
    recombine exactly to the full mean.
    """
    a, b = img.rgb, ref.rgb
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")

    chans = []
    for c in range(3):
        x = a[:, :, c]
        y = b[:, :, c]
        mu_x = _filter2d(x)
        mu_y = _filter2d(y)
        sxx = _filter2d(x * x) - mu_x * mu_x
        syy = _filter2d(y * y) - mu_y * mu_y
        sxy = _filter2d(x * y) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * sxy + SSIM_C2)
        den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sxx + syy + SSIM_C2)
        chans.append(num / den)
    ssim_map = (chans[0] + chans[1] + chans[2]) / 3.0
    return float(ssim_map.mean()), ssim_map


def masked_ssim(img: Image, ref: Image, mask: SemanticMask,
                label: int) -> float | None:
    """Mean of the full-image SSIM map over pixels with mask == label;
    None when the label has no pixels."""
    if (mask.height, mask.width) != img.rgb.shape[:2]:
        raise ValueError("mask dimensions do not match the images")
    sel = mask.labels == label
    if not sel.any():
        return None
    _, ssim_map = ssim(img, ref)
    return float(ssim_map[sel].mean())


def psnr(img: Image, ref: Image) -> float:
    """10 log10(1 / MSE) on the [0, 1] range; infinite for identical images."""
    if img.rgb.shape != ref.rgb.shape:
        raise ValueError("image shapes differ")
    mse = float(np.mean((img.rgb - ref.rgb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def masked_psnr(img: Image, ref: Image, mask: SemanticMask,
                label: int) -> float | None:
    if (mask.height, mask.width) != img.rgb.shape[:2]:
        raise ValueError("mask dimensions do not match the images")
    sel = mask.labels == label
    if not sel.any():
        return None
    mse = float(np.mean((img.rgb[sel] - ref.rgb[sel]) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


# ---------------------------------------------------------------------------
# Quality profile
# ---------------------------------------------------------------------------

@dataclass
class QualitySample:
    label_id: int
    iteration: int
    view_id: str
    ssim: float
    psnr: float
    d_min: float | None
    gaussian_count: int
    mask_pixel_count: int
    lpips: float | None = None  # optional external pass-through

    def __post_init__(self):
        if self.mask_pixel_count <= 0:
            raise ValueError("samples require a nonempty mask")


@dataclass
class QualityProfile:
    samples: list[QualitySample]
    scene_id: str = ""
    label_map: LabelMap | None = None

    def __post_init__(self):
        keys = [(s.label_id, s.iteration, s.view_id) for s in self.samples]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (label, iteration, view) sample")

    @property
    def labels(self) -> list[int]:
        return sorted({s.label_id for s in self.samples})

    @property
    def iterations(self) -> list[int]:
        return sorted({s.iteration for s in self.samples})

    @property
    def view_ids(self) -> list[str]:
        return sorted({s.view_id for s in self.samples})

    def get(self, label_id: int, iteration: int, view_id: str) -> QualitySample | None:
        for s in self.samples:
            if (s.label_id, s.iteration, s.view_id) == (label_id, iteration, view_id):
                return s
        return None

    def samples_for(self, label_id: int | None = None, iteration: int | None = None,
                    view_id: str | None = None) -> list[QualitySample]:
        out = []
        for s in self.samples:
            if label_id is not None and s.label_id != label_id:
                continue
            if iteration is not None and s.iteration != iteration:
                continue
            if view_id is not None and s.view_id != view_id:
                continue
            out.append(s)
        return out

    def mean_ssim_series(self, label_id: int) -> list[tuple[int, float]]:
        """Mean SSIM over views per iteration (training-progress series)."""
        out = []
        for it in self.iterations:
            vals = [s.ssim for s in self.samples_for(label_id=label_id, iteration=it)]
            if vals:
                out.append((it, float(np.mean(vals))))
        return out

    def distance_samples(self, label_id: int, iteration: int) -> list[tuple[float, float]]:
        """(d_min, ssim) pairs usable for the distance-quality fit."""
        return [(s.d_min, s.ssim)
                for s in self.samples_for(label_id=label_id, iteration=iteration)
                if s.d_min is not None]

    # -- serialization ------------------------------------------------------

    CSV_COLUMNS = ["scene", "label", "iteration", "view", "ssim", "psnr",
                   "d_min", "n_gaussians", "mask_px"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(self.CSV_COLUMNS)
        for s in self.samples:
            writer.writerow([
                self.scene_id, s.label_id, s.iteration, s.view_id,
                repr(s.ssim), "inf" if math.isinf(s.psnr) else repr(s.psnr),
                "" if s.d_min is None else repr(s.d_min),
                s.gaussian_count, s.mask_pixel_count,
            ])
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str, label_map: LabelMap | None = None) -> "QualityProfile":
        reader = csv.DictReader(io.StringIO(text))
        samples = []
        scene = ""
        for row in reader:
            scene = row["scene"]
            samples.append(QualitySample(
                label_id=int(row["label"]), iteration=int(row["iteration"]),
                view_id=row["view"], ssim=float(row["ssim"]),
                psnr=float(row["psnr"]),
                d_min=float(row["d_min"]) if row["d_min"] else None,
                gaussian_count=int(row["n_gaussians"]),
                mask_pixel_count=int(row["mask_px"])))
        return QualityProfile(samples=samples, scene_id=scene, label_map=label_map)

    def to_json(self) -> dict:
        return {
            "scene": self.scene_id,
            "label_map": self.label_map.to_json() if self.label_map else None,
            "samples": [_sample_to_json(s) for s in self.samples],
        }

    @staticmethod
    def from_json(obj: dict) -> "QualityProfile":
        lm = LabelMap.from_json(obj["label_map"]) if obj.get("label_map") else None
        samples = []
        for s in obj["samples"]:
            psnr_v = s["psnr"]
            samples.append(QualitySample(
                label_id=int(s["label_id"]), iteration=int(s["iteration"]),
                view_id=str(s["view_id"]), ssim=float(s["ssim"]),
                psnr=math.inf if psnr_v == "inf" else float(psnr_v),
                d_min=None if s["d_min"] is None else float(s["d_min"]),
                gaussian_count=int(s["gaussian_count"]),
                mask_pixel_count=int(s["mask_pixel_count"]),
                lpips=s.get("lpips")))
        return QualityProfile(samples=samples, scene_id=obj.get("scene", ""),
                              label_map=lm)


def _sample_to_json(s: QualitySample) -> dict:
    d = asdict(s)
    if math.isinf(s.psnr):
        d["psnr"] = "inf"
    return d


def build_quality_profile(checkpoints: CheckpointSet, views: ViewSet,
                          masks: dict[str, SemanticMask],
                          ground_truth: dict[str, Image],
                          cloud: LabeledCloud,
                          view_ids: list[str] | None = None,
                          scene_id: str = "",
                          label_map: LabelMap | None = None,
                          opts: RenderOptions | None = None) -> QualityProfile:
    """Measure masked SSIM/PSNR for every (label, iteration, view).

    Each sample renders the per-label checkpoint cloud for the view and
    compares against ground truth restricted to the mask pixels of that
    label; d_min comes from the labeled point cloud.  Views without a mask
    are skipped with a warning; a missing ground-truth image is an error.
    """
    opts = opts or RenderOptions()
    if view_ids is None:
        view_ids = views.view_ids
    label_ids = checkpoints.label_ids

    tasks = []
    for view_id in view_ids:
        if view_id not in ground_truth:
            raise ProfilingError(f"no ground-truth image for view {view_id!r}")
        if view_id not in masks:
            log.warning("skipping view %s: no semantic mask", view_id)
            continue
        pose = views.pose(view_id)
        camera = views.camera_for(pose)
        dstats = label_distance_stats(cloud, camera, pose, labels=label_ids)
        for label_id in label_ids:
            d_min = dstats.get(label_id, (None, None))[0]
            if d_min is None:
                log.warning("label %d not in frustum of view %s: no d_min",
                            label_id, view_id)
            for iteration in checkpoints.iterations:
                tasks.append((label_id, iteration, view_id, pose, camera, d_min))

    def run(task):
        label_id, iteration, view_id, pose, camera, d_min = task
        mask = masks[view_id]
        n_px = mask.pixel_count(label_id)
        if n_px == 0:
            log.warning("label %d has no pixels in mask of view %s; skipped",
                        label_id, view_id)
            return None
        rendered = render(checkpoints.cloud(label_id, iteration), camera, pose, opts)
        gt = ground_truth[view_id]
        s = masked_ssim(rendered, gt, mask, label_id)
        p = masked_psnr(rendered, gt, mask, label_id)
        return QualitySample(
            label_id=label_id, iteration=iteration, view_id=view_id,
            ssim=s, psnr=p, d_min=d_min,
            gaussian_count=checkpoints.count(label_id, iteration),
            mask_pixel_count=n_px)

    n_threads = max(1, int(os.environ.get(THREADS_ENV, "1")))
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]

    samples = [r for r in results if r is not None]
    return QualityProfile(samples=samples, scene_id=scene_id, label_map=label_map)
