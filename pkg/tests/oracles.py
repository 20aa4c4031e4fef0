"""Independent reference implementations used as test oracles.

These deliberately avoid the library's code paths: the voter does its own
quaternion math and per-point loops, the compositor samples every splat at
every pixel with no bounding boxes or tiles, the SSIM oracle evaluates
explicit 11x11 windows, and the selector enumerates all assignments.
"""

from __future__ import annotations

import math

import numpy as np

UNLABELED = 255


# ---------------------------------------------------------------------------
# Majority voting (per-point, per-view loops; own projection math)
# ---------------------------------------------------------------------------

def _quat_matrix(q):
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ])


def brute_force_vote(points, views, masks):
    """Reference majority voter: loop points x views, tally, lowest id wins."""
    poses = {p.view_id: p for p in views.poses}
    n = len(points)
    labels = np.full(n, UNLABELED, dtype=np.uint8)
    for i in range(n):
        tally: dict[int, int] = {}
        p = np.asarray(points[i], dtype=np.float64)
        for mask in masks:
            pose = poses[mask.view_id]
            cam = views.cameras[pose.camera_id]
            rot = _quat_matrix(np.asarray(pose.rotation, dtype=np.float64))
            pc = rot @ p + np.asarray(pose.translation, dtype=np.float64)
            if pc[2] <= 1e-8:
                continue
            u = cam.fx * pc[0] / pc[2] + cam.cx
            v = cam.fy * pc[1] / pc[2] + cam.cy
            ix = int(math.floor(u + 0.5))
            iy = int(math.floor(v + 0.5))
            if not (0 <= ix < cam.width and 0 <= iy < cam.height):
                continue
            lab = int(mask.labels[iy, ix])
            if lab == UNLABELED:
                continue
            tally[lab] = tally.get(lab, 0) + 1
        if tally:
            best = max(tally.values())
            labels[i] = min(l for l, c in tally.items() if c == best)
    return labels


# ---------------------------------------------------------------------------
# Naive compositor (O(pixels x splats), full-image alpha per splat)
# ---------------------------------------------------------------------------

def naive_composite(projected, width, height, background, tau=1e-4):
    """Reference compositor over already-projected splats.

    Evaluates every surviving splat at every pixel of the image (no bounding
    box, no tiling), compositing front-to-back in (depth, index) order with
    the same alpha formula the renderer specifies.
    """
    order = np.lexsort((projected.source, projected.depth))
    color = np.zeros((height, width, 3), dtype=np.float64)
    transmit = np.ones((height, width), dtype=np.float64)
    xs = np.arange(width, dtype=np.float64)[None, :]
    ys = np.arange(height, dtype=np.float64)[:, None]
    for k in order:
        cx, cy = projected.centers[k]
        dx = xs - cx
        dy = ys - cy
        q = (projected.conic_a[k] * dx * dx
             + 2.0 * projected.conic_b[k] * dx * dy
             + projected.conic_c[k] * dy * dy)
        alpha = np.minimum(0.99, projected.alpha[k] * np.exp(-0.5 * q))
        active = (alpha >= 1.0 / 255.0) & (transmit >= tau)
        contrib = np.where(active, transmit * alpha, 0.0)
        color += contrib[:, :, None] * projected.color[k]
        transmit = np.where(active, transmit * (1.0 - alpha), transmit)
    color += transmit[:, :, None] * np.asarray(background, dtype=np.float64)
    return np.clip(color, 0.0, 1.0), transmit


# ---------------------------------------------------------------------------
# Windowed SSIM (explicit 11x11 windows, symmetric padding)
# ---------------------------------------------------------------------------

def windowed_ssim(a, b, window=11, sigma=1.5, c1=0.01 ** 2, c2=0.03 ** 2):
    """Reference SSIM: per-pixel weighted window statistics via shifted sums."""
    half = window // 2
    x1d = np.arange(window, dtype=np.float64) - half
    w1d = np.exp(-0.5 * (x1d / sigma) ** 2)
    w1d /= w1d.sum()
    w2d = np.outer(w1d, w1d)

    def stats(img):
        h, w = img.shape
        pad = np.pad(img, half, mode="symmetric")
        mean = np.zeros((h, w))
        sq = np.zeros((h, w))
        for dy in range(window):
            for dx in range(window):
                block = pad[dy:dy + h, dx:dx + w]
                mean += w2d[dy, dx] * block
                sq += w2d[dy, dx] * block * block
        return mean, sq

    def cross(x, y):
        h, w = x.shape
        px = np.pad(x, half, mode="symmetric")
        py = np.pad(y, half, mode="symmetric")
        out = np.zeros((h, w))
        for dy in range(window):
            for dx in range(window):
                out += w2d[dy, dx] * px[dy:dy + h, dx:dx + w] * py[dy:dy + h, dx:dx + w]
        return out

    maps = []
    for c in range(a.shape[2]):
        x, y = a[:, :, c], b[:, :, c]
        mx, sxx = stats(x)
        my, syy = stats(y)
        sxy = cross(x, y) - mx * my
        vx = sxx - mx * mx
        vy = syy - my * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        maps.append(num / den)
    full = sum(maps) / len(maps)
    return float(full.mean()), full


# ---------------------------------------------------------------------------
# Selection by exhaustive enumeration
# ---------------------------------------------------------------------------

def brute_force_selection(qualities, counts, target):
    """Minimal total count over all feasible per-label assignments.

    qualities / counts: {label: {iteration: value}}.  Labels with no feasible
    iteration are fixed at their maximum iteration.  Returns
    {label: iteration} and the total count.
    """
    import itertools

    labels = sorted(qualities)
    feasible_sets = {}
    fixed = {}
    for l in labels:
        its = sorted(qualities[l])
        ok = [i for i in its if qualities[l][i] >= target]
        if ok:
            feasible_sets[l] = ok
        else:
            fixed[l] = its[-1]

    best_total = None
    best_assign = None
    free = sorted(feasible_sets)
    for combo in itertools.product(*(feasible_sets[l] for l in free)):
        assign = dict(zip(free, combo))
        assign.update(fixed)
        total = sum(counts[l][assign[l]] for l in labels)
        if best_total is None or total < best_total:
            best_total = total
            best_assign = assign
    if best_total is None:  # every label infeasible
        best_assign = dict(fixed)
        best_total = sum(counts[l][fixed[l]] for l in labels)
    return best_assign, best_total
