"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line with its measured runtime.

Criteria that reference published measurements use the frozen single-view
fixture in table_fixture.py; desk-scale end-to-end behavior runs on the
frozen synthetic scene.
"""

import math
import time

import numpy as np
import pytest

from conftest import random_cloud
from oracles import (
    brute_force_selection,
    brute_force_vote,
    naive_composite,
    windowed_ssim,
)
from table_fixture import (
    CONSISTENT_OCCUPANCY_CELLS_MB,
    CONSISTENT_TOTAL_CELLS_MB,
    TOTAL_AT_05,
    TOTAL_AT_07,
    VIEW,
    table_profile,
)
from sage_lod.cameras import CameraModel, ViewPose, ViewSet
from sage_lod.lod import (
    compose_selection,
    dense_curve_samples,
    fit_all_curves,
    fit_lod_curve,
    predict_ssim,
    select_iterations,
)
from sage_lod.metrics import (
    QualityProfile,
    QualitySample,
    build_quality_profile,
    masked_ssim,
    ssim,
)
from sage_lod.render import (
    CompositionManifest,
    Image,
    ManifestEntry,
    RenderOptions,
    project_cloud,
    render,
    render_composed,
)
from sage_lod.semantics import SemanticMask, assign_labels
from sage_lod.splats import concat_clouds, occupancy_bytes
from sage_lod.synth import distance_sweep_views, render_views


def _report(number: int, description: str, ok: bool, elapsed: float,
            budget: float) -> None:
    status = "PASS" if ok and elapsed < budget else "FAIL"
    print(f"[{status}] criterion {number:2d}: {description} "
          f"({elapsed:.2f}s / budget {budget:.0f}s)")
    assert ok, f"criterion {number} failed: {description}"
    assert elapsed < budget, f"criterion {number} exceeded runtime budget"


@pytest.fixture(scope="module")
def sweep_profile(standard_scene, standard_checkpoints):
    """Distance-sweep quality profile of the frozen scene (d_min varies,
    azimuth fixed), the sampling the distance-quality fit studies."""
    scene = standard_scene
    views = distance_sweep_views(scene.spec, count=20, radius_min=3.2,
                                 radius_max=6.5, image_size=96)
    gt, masks = render_views(scene, views)
    return build_quality_profile(standard_checkpoints, views, masks, gt,
                                 scene.labeled_cloud)


def test_criterion_1_selection_reproduces_published_totals():
    t0 = time.perf_counter()
    profile = table_profile()
    plan05 = select_iterations(profile, VIEW, 0.5)
    plan07 = select_iterations(profile, VIEW, 0.7)
    ok = (plan05.total_gaussians == TOTAL_AT_05
          and abs(plan05.total_bytes / 1e6 - 756.2) < 0.1
          and plan07.total_gaussians == TOTAL_AT_07)
    _report(1, "selection reproduces published per-view totals at t=0.5/0.7",
            ok, time.perf_counter() - t0, 1.0)


def test_criterion_2_byte_model():
    t0 = time.perf_counter()
    ok = True
    for count, mb in CONSISTENT_OCCUPANCY_CELLS_MB:
        ok = ok and abs(occupancy_bytes(count) / 1e6 - mb) < 0.15
    for count, mb in CONSISTENT_TOTAL_CELLS_MB:
        # totals printed at GB precision allow 5 MB of rounding; the one
        # MB-precision total must agree within 0.15 MB
        tol = 0.15 if mb < 1000 else 5.0
        ok = ok and abs(occupancy_bytes(count) / 1e6 - mb) < tol
    _report(2, "248-byte model reproduces the published occupancy cells",
            ok, time.perf_counter() - t0, 1.0)


def test_criterion_3_fit_recovery():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)

    def gen(d, theta):
        k, g, mu, a = theta
        return k * np.exp(-g * np.abs(d - mu) ** a)

    ok = True
    for _ in range(20):
        d = np.sort(rng.uniform(0.5, 12.0, 40))
        beta = float(np.quantile(d, rng.uniform(0.25, 0.75)))
        # parameters inside the invariant bounds (K <= 1 keeps values in the
        # SSIM range the clamped predictor can reproduce)
        t1 = (rng.uniform(0.25, 1.0), rng.uniform(0.01, 0.5),
              rng.uniform(d.min(), beta), rng.uniform(0.3, 3.0))
        t2 = (rng.uniform(0.25, 1.0), rng.uniform(0.01, 0.5),
              rng.uniform(beta, d.max()), rng.uniform(0.3, 3.0))
        y = np.where(d < beta, gen(d, t1), gen(d, t2))

        params = fit_lod_curve(list(zip(d, y)))
        pred = np.array([predict_ssim(params, x) for x in d])
        ok = ok and math.sqrt(float(np.mean((pred - y) ** 2))) < 1e-4

        noisy = np.clip(y + rng.normal(0.0, 0.01, d.size), 0.0, 1.0)
        params_n = fit_lod_curve(list(zip(d, noisy)))
        pred_n = np.array([predict_ssim(params_n, x) for x in d])
        ok = ok and math.sqrt(float(np.mean((pred_n - y) ** 2))) < 0.02
    _report(3, "curve refits recover 20 seeded generators (noiseless & noisy)",
            ok, time.perf_counter() - t0, 30.0)


def test_criterion_4_selection_optimality_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    ok = True
    for _ in range(200):
        n_labels = int(rng.integers(1, 5))
        n_iters = int(rng.integers(1, 5))
        iters = sorted(rng.choice(np.arange(1000, 33000, 1000), n_iters,
                                  replace=False).tolist())
        target = float(rng.uniform(0.1, 0.95))
        qualities, counts, samples = {}, {}, []
        for l in range(n_labels):
            base = int(rng.integers(50, 5000))
            incs = np.sort(rng.integers(0, 3000, n_iters))
            qualities[l], counts[l] = {}, {}
            for j, it in enumerate(iters):
                q = float(rng.uniform(0.0, 1.0))
                qualities[l][it] = q
                counts[l][it] = base + int(incs[j])  # nondecreasing N_l(i)
                samples.append(QualitySample(
                    label_id=l, iteration=it, view_id="w", ssim=q, psnr=0.0,
                    d_min=1.0, gaussian_count=counts[l][it],
                    mask_pixel_count=7))
        plan = select_iterations(QualityProfile(samples=samples), "w", target)
        _, best_total = brute_force_selection(qualities, counts, target)
        ok = ok and plan.total_gaussians == best_total
        for l in range(n_labels):
            feasible = [i for i in iters if qualities[l][i] >= target]
            if not feasible:
                ok = ok and plan.choices[l].fallback
                ok = ok and plan.choices[l].iteration == iters[-1]
    _report(4, "plans are count-minimal on 200 brute-forced small instances",
            ok, time.perf_counter() - t0, 10.0)


def test_criterion_5_renderer_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    cam = CameraModel(width=64, height=64, fx=80.0, fy=80.0, cx=32.0, cy=32.0)
    ok = True
    for _ in range(50):
        n = int(rng.integers(1, 101))
        cloud = random_cloud(rng, n, sh_degree=int(rng.integers(0, 4)))
        pose = ViewPose(view_id="v", camera_id=1,
                        rotation=np.array([1.0, 0, 0, 0]),
                        translation=np.array([0.0, 0.0, 3.0]))
        bg = tuple(rng.uniform(0, 1, 3))
        image = render(cloud, cam, pose, RenderOptions(background=bg))
        expected, transmit = naive_composite(project_cloud(cloud, cam, pose),
                                             64, 64, bg)
        ok = ok and np.array_equal(image.rgb, expected)
        ok = ok and transmit.min() >= 0.0 and transmit.max() <= 1.0
        ok = ok and image.rgb.min() >= 0.0 and image.rgb.max() <= 1.0
    _report(5, "renderer bitwise equals the naive compositor on 50 scenes",
            ok, time.perf_counter() - t0, 120.0)


def test_criterion_6_composition_identity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(123)
    cam = CameraModel(width=64, height=64, fx=80.0, fy=80.0, cx=32.0, cy=32.0)
    pose = ViewPose(view_id="v", camera_id=1, rotation=np.array([1.0, 0, 0, 0]),
                    translation=np.array([0.0, 0.0, 3.0]))
    ok = True
    for _ in range(20):
        k = int(rng.integers(1, 5))
        clouds = [random_cloud(rng, int(rng.integers(1, 40))) for _ in range(k)]
        manifest = CompositionManifest(
            [ManifestEntry(i, 1000 * (i + 1), c) for i, c in enumerate(clouds)])
        composed = render_composed(manifest, cam, pose)
        merged = render(concat_clouds(clouds), cam, pose)
        ok = ok and np.array_equal(composed.rgb, merged.rgb)

        perm = rng.permutation(k)
        manifest_p = CompositionManifest(
            [ManifestEntry(int(i), 1000 * (int(i) + 1), clouds[int(i)])
             for i in perm])
        ok = ok and np.array_equal(render_composed(manifest_p, cam, pose).rgb,
                                   composed.rgb)
    _report(6, "composed rendering bitwise equals the merged-cloud render",
            ok, time.perf_counter() - t0, 60.0)


def test_criterion_7_majority_voting_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(31)
    cam = CameraModel(width=48, height=48, fx=48.0, fy=48.0, cx=24.0, cy=24.0)
    ok = True
    for trial in range(100):
        n_views = int(rng.integers(1, 11))
        poses = [ViewPose(view_id=f"v{k}", camera_id=1,
                          rotation=np.array([1.0, 0, 0, 0]),
                          translation=rng.uniform(-0.5, 0.5, 3) + [0, 0, 2.5])
                 for k in range(n_views)]
        views = ViewSet(cameras={1: cam}, poses=poses)
        # few distinct labels makes tie cases frequent
        masks = [SemanticMask(48, 48,
                              rng.integers(0, 3, (48, 48)).astype(np.uint8),
                              f"v{k}")
                 for k in range(n_views)]
        pts = rng.uniform(-2.0, 2.0, size=(int(rng.integers(1, 1001)), 3))
        ours = assign_labels(pts, views, masks)
        ok = ok and np.array_equal(ours.labels, brute_force_vote(pts, views, masks))
    _report(7, "majority voting equals the brute-force voter on 100 scenes",
            ok, time.perf_counter() - t0, 30.0)


def test_criterion_8_end_to_end_synthetic(standard_scene, standard_checkpoints,
                                          standard_profile):
    t0 = time.perf_counter()
    scene = standard_scene
    profile = standard_profile

    # (a) per-label SSIM nondecreasing in iteration for >= 90% of pairs
    pairs = mono = 0
    for l in profile.labels:
        for v in profile.view_ids:
            seq = [s.ssim for s in sorted(
                profile.samples_for(label_id=l, view_id=v),
                key=lambda s: s.iteration)]
            pairs += 1
            mono += all(a <= b + 1e-9 for a, b in zip(seq, seq[1:]))
    ok_a = mono / pairs >= 0.9

    # (b, c) per view: composed quality at t=0.9 dominates t=0.5, and the
    # cheap target never uses more gaussians
    ok_b = ok_c = True
    opts = RenderOptions(background=scene.spec.background)
    for view_id in profile.view_ids:
        plans = {t: select_iterations(profile, view_id, t) for t in (0.5, 0.9)}
        images = {}
        for t, plan in plans.items():
            _, merged = compose_selection(plan, standard_checkpoints)
            pose = scene.views.pose(view_id)
            cam = scene.views.camera_for(pose)
            images[t] = render(merged, cam, pose, opts)
        gt = scene.ground_truth[view_id]
        ok_b = ok_b and ssim(images[0.9], gt)[0] >= ssim(images[0.5], gt)[0]
        ok_c = ok_c and (plans[0.5].total_gaussians <= plans[0.9].total_gaussians)

    # (d) cross-view mask back-projection recovers >= 99% of point labels
    recovered = assign_labels(scene.labeled_cloud.points, scene.views,
                              list(scene.masks.values()))
    ok_d = float(np.mean(recovered.labels == scene.labeled_cloud.labels)) >= 0.99

    _report(8, "synthetic end-to-end: monotone quality, target dominance, "
               "label recovery", ok_a and ok_b and ok_c and ok_d,
            time.perf_counter() - t0, 300.0)


def test_criterion_9_metric_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(55)
    ok = True

    x = Image(rgb=rng.uniform(0, 1, size=(24, 24, 3)))
    ok = ok and ssim(x, x)[0] == 1.0

    # partition-weighted masked means recombine to the full mean
    a = Image(rgb=rng.uniform(0, 1, size=(32, 32, 3)))
    b = Image(rgb=np.clip(a.rgb + rng.normal(0, 0.05, a.rgb.shape), 0, 1))
    labels = rng.integers(0, 5, size=(32, 32)).astype(np.uint8)
    mask = SemanticMask(32, 32, labels, "v")
    acc = 0.0
    for l in range(5):
        m = masked_ssim(a, b, mask, l)
        n = int((labels == l).sum())
        if m is not None:
            acc += m * n
    ok = ok and abs(acc / (32 * 32) - ssim(a, b)[0]) < 1e-9

    for seed in range(10):
        r2 = np.random.default_rng(400 + seed)
        p = r2.uniform(0.1, 0.9, size=(28, 26, 3))
        q = np.clip(p + r2.normal(0, 0.05, p.shape), 0, 1)
        got, _ = ssim(Image(rgb=p), Image(rgb=q))
        want, _ = windowed_ssim(p, q)
        ok = ok and abs(got - want) < 1e-4
    _report(9, "SSIM identities, partition consistency, and oracle agreement",
            ok, time.perf_counter() - t0, 10.0)


def test_criterion_10_distance_curve_shape(sweep_profile):
    t0 = time.perf_counter()
    profile = sweep_profile
    curves, skipped = fit_all_curves(profile)
    ok = not skipped and len(curves) == len(profile.labels) * len(profile.iterations)

    for (label_id, iteration), params in sorted(curves.items()):
        pts = profile.distance_samples(label_id, iteration)
        dists = [d for d, _ in pts]
        ds, vals = dense_curve_samples(params, min(dists), max(dists), 256)

        # the fitted model is allowed one level shift at the breakpoint;
        # remove that single step, then require rise -> peak -> decline or
        # plateau, tolerating secondary structure far smaller than the
        # curve's own dynamic range
        steps = np.diff(vals)
        cross = np.flatnonzero((ds[:-1] < params.beta) & (ds[1:] >= params.beta))
        if cross.size:
            steps[cross[0]] = 0.0
        seq = np.concatenate([[vals[0]], vals[0] + np.cumsum(steps)])
        peak = int(np.argmax(seq))
        viol = 0.0
        pre, post = seq[:peak + 1], seq[peak:]
        if pre.size > 1:
            viol = max(viol, float((np.maximum.accumulate(pre) - pre).max()))
        if post.size > 1:
            viol = max(viol, float((post - np.minimum.accumulate(post)).max()))
        allowance = max(0.25 * float(seq.max() - seq.min()), 0.03)
        ok = ok and viol <= allowance
    _report(10, "distance-quality curves rise, peak, then stabilize or decline",
            ok, time.perf_counter() - t0, 10.0)
