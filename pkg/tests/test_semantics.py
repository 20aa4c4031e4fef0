import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image as PILImage

from oracles import brute_force_vote
from sage_lod.cameras import CameraModel, ViewPose, ViewSet, rotmat_to_quat
from sage_lod.errors import MaskFormatError, MaskGeometryError
from sage_lod.semantics import (
    LabelMap,
    LabeledCloud,
    SemanticMask,
    assign_labels,
    backproject_mask,
    load_mask,
    read_labeled_ply,
    save_mask,
    write_labeled_ply,
)

CAM = CameraModel(width=60, height=60, fx=60.0, fy=60.0, cx=30.0, cy=30.0)
IDENTITY = ViewPose(view_id="v0", camera_id=1, rotation=np.array([1.0, 0, 0, 0]),
                    translation=np.zeros(3))


def _png_bytes(arr):
    buf = io.BytesIO()
    PILImage.fromarray(arr.astype(np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def _orbit_views(n, cam=CAM, radius=4.0):
    poses = []
    up = np.array([0.0, 0.0, 1.0])
    for k in range(n):
        theta = 2 * np.pi * k / max(n, 1) + 0.1
        eye = radius * np.array([np.cos(theta), np.sin(theta), 0.35])
        f = -eye / np.linalg.norm(eye)
        r = np.cross(f, up)
        r /= np.linalg.norm(r)
        rot = np.stack([r, np.cross(f, r), f])
        poses.append(ViewPose(view_id=f"v{k}", camera_id=1,
                              rotation=rotmat_to_quat(rot), translation=-rot @ eye))
    return ViewSet(cameras={1: cam}, poses=poses)


class TestMaskIO:
    def test_all_unlabeled(self):
        data = _png_bytes(np.full((60, 60), 255))
        mask = load_mask(data, "v0")
        assert mask.present_labels() == []

    def test_two_half_planes(self):
        arr = np.zeros((60, 60), np.uint8)
        arr[:, 30:] = 1
        mask = load_mask(_png_bytes(arr), "v0")
        assert mask.pixel_count(0) == 60 * 30
        assert mask.pixel_count(1) == 60 * 30

    def test_histogram_bins(self):
        rng = np.random.default_rng(0)
        arr = rng.integers(0, 6, size=(60, 60)).astype(np.uint8)
        mask = load_mask(_png_bytes(arr), "v0")
        assert len(mask.present_labels()) == 6

    def test_multichannel_rejected(self):
        buf = io.BytesIO()
        PILImage.fromarray(np.zeros((8, 8, 3), np.uint8), mode="RGB").save(
            buf, format="PNG")
        with pytest.raises(MaskFormatError):
            load_mask(buf.getvalue(), "v0")

    def test_dimension_mismatch(self):
        data = _png_bytes(np.zeros((10, 10)))
        with pytest.raises(MaskGeometryError):
            load_mask(data, "v0", expected_size=(60, 60))

    def test_save_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        arr = rng.integers(0, 255, size=(20, 30)).astype(np.uint8)
        mask = SemanticMask(width=30, height=20, labels=arr, view_id="v0")
        save_mask(mask, tmp_path / "m.png")
        back = load_mask(tmp_path / "m.png", "v0")
        assert np.array_equal(back.labels, arr)


class TestLabelMap:
    def test_reserved_id(self):
        with pytest.raises(ValueError):
            LabelMap({255: "bad"})

    def test_json_round_trip(self):
        lm = LabelMap({2: "grass-merged", 7: "bench"})
        assert LabelMap.from_json(lm.to_json()).entries == lm.entries


class TestAssignLabels:
    def test_single_vote(self):
        arr = np.full((60, 60), 255, np.uint8)
        arr[30, 30] = 3
        mask = SemanticMask(60, 60, arr, "v0")
        views = ViewSet(cameras={1: CAM}, poses=[IDENTITY])
        cloud = assign_labels([[0.0, 0.0, 1.0]], views, [mask])
        assert cloud.labels[0] == 3
        assert cloud.vote_counts(0) == {3: 1}

    def test_majority_wins(self):
        # 3 straight-on views; two say label 5 ("grass"), one says 9 ("tree")
        poses = [ViewPose(view_id=f"v{k}", camera_id=1,
                          rotation=np.array([1.0, 0, 0, 0]),
                          translation=np.array([0.0, 0.0, 0.1 * k]))
                 for k in range(3)]
        views = ViewSet(cameras={1: CAM}, poses=poses)
        masks = []
        for k, lab in enumerate([5, 5, 9]):
            arr = np.full((60, 60), lab, np.uint8)
            masks.append(SemanticMask(60, 60, arr, f"v{k}"))
        cloud = assign_labels([[0.0, 0.0, 1.0]], views, masks)
        assert cloud.labels[0] == 5
        assert cloud.vote_counts(0) == {5: 2, 9: 1}

    def test_tie_lowest_id(self):
        poses = [ViewPose(view_id=f"v{k}", camera_id=1,
                          rotation=np.array([1.0, 0, 0, 0]),
                          translation=np.array([0.0, 0.0, 0.05 * k]))
                 for k in range(4)]
        views = ViewSet(cameras={1: CAM}, poses=poses)
        masks = []
        for k, lab in enumerate([5, 2, 2, 5]):
            arr = np.full((60, 60), lab, np.uint8)
            masks.append(SemanticMask(60, 60, arr, f"v{k}"))
        cloud = assign_labels([[0.0, 0.0, 1.0]], views, masks)
        assert cloud.labels[0] == 2
        oracle = brute_force_vote(np.array([[0.0, 0.0, 1.0]]), views, masks)
        assert oracle[0] == 2

    def test_no_masks_error(self):
        views = ViewSet(cameras={1: CAM}, poses=[IDENTITY])
        with pytest.raises(ValueError):
            assign_labels([[0, 0, 1.0]], views, [])

    def test_zero_votes_unresolved(self):
        arr = np.full((60, 60), 255, np.uint8)
        mask = SemanticMask(60, 60, arr, "v0")
        views = ViewSet(cameras={1: CAM}, poses=[IDENTITY])
        cloud = assign_labels([[0, 0, 1.0], [0, 0, -1.0]], views, [mask])
        assert list(cloud.labels) == [255, 255]

    def test_matches_oracle_random(self):
        rng = np.random.default_rng(11)
        for trial in range(10):
            n_views = int(rng.integers(1, 6))
            views = _orbit_views(n_views)
            masks = [SemanticMask(60, 60, rng.integers(0, 5, (60, 60))
                                  .astype(np.uint8), f"v{k}")
                     for k in range(n_views)]
            pts = rng.uniform(-1.5, 1.5, size=(int(rng.integers(1, 200)), 3))
            ours = assign_labels(pts, views, masks)
            theirs = brute_force_vote(pts, views, masks)
            assert np.array_equal(ours.labels, theirs)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.integers(1, 6), st.integers(1, 120))
    def test_property_matches_oracle(self, seed, n_views, n_points):
        rng = np.random.default_rng(seed)
        views = _orbit_views(n_views)
        masks = [SemanticMask(60, 60, rng.integers(0, 4, (60, 60))
                              .astype(np.uint8), f"v{k}")
                 for k in range(n_views)]
        pts = rng.uniform(-2, 2, size=(n_points, 3))
        ours = assign_labels(pts, views, masks)
        theirs = brute_force_vote(pts, views, masks)
        assert np.array_equal(ours.labels, theirs)

    def test_zbuffer_visibility_prepass(self):
        # ablation flag: with the pre-pass, a point hidden behind a nearer
        # point at the same pixel does not vote
        arr = np.full((60, 60), 255, np.uint8)
        arr[30, 30] = 4
        mask = SemanticMask(60, 60, arr, "v0")
        views = ViewSet(cameras={1: CAM}, poses=[IDENTITY])
        pts = [[0.0, 0.0, 1.0], [0.0, 0.0, 3.0]]
        plain = assign_labels(pts, views, [mask])
        assert list(plain.labels) == [4, 4]
        gated = assign_labels(pts, views, [mask], zbuffer_visibility=True)
        assert list(gated.labels) == [4, 255]

    def test_permutation_equivariant(self):
        rng = np.random.default_rng(12)
        views = _orbit_views(3)
        masks = [SemanticMask(60, 60, rng.integers(0, 4, (60, 60))
                              .astype(np.uint8), f"v{k}") for k in range(3)]
        pts = rng.uniform(-1.5, 1.5, size=(80, 3))
        perm = rng.permutation(80)
        a = assign_labels(pts, views, masks)
        b = assign_labels(pts[perm], views, masks)
        assert np.array_equal(a.labels[perm], b.labels)


class TestBackproject:
    def test_single_point_disc(self):
        cloud = LabeledCloud(points=np.array([[0.0, 0.0, 2.0]]),
                             labels=np.array([7], np.uint8))
        mask = backproject_mask(cloud, CAM, IDENTITY, splat_radius_px=2.0,
                                fill_limit=3.0)
        assert mask.labels[30, 30] == 7
        assert mask.labels[30, 32] == 7  # inside the 2 px disc
        assert mask.labels[0, 0] == 255  # far beyond the fill limit
        assert set(np.unique(mask.labels)) == {7, 255}

    def test_zbuffer_nearer_wins(self):
        cloud = LabeledCloud(points=np.array([[0, 0, 1.0], [0, 0, 2.0]]),
                             labels=np.array([1, 2], np.uint8))
        mask = backproject_mask(cloud, CAM, IDENTITY, splat_radius_px=1.0)
        assert mask.labels[30, 30] == 1

    def test_radius_validated(self):
        cloud = LabeledCloud(points=np.array([[0, 0, 1.0]]),
                             labels=np.array([1], np.uint8))
        with pytest.raises(ValueError):
            backproject_mask(cloud, CAM, IDENTITY, splat_radius_px=0.2)

    def test_single_class_never_emits_other(self):
        rng = np.random.default_rng(13)
        pts = rng.uniform(-0.8, 0.8, size=(300, 3)) + [0, 0, 3]
        cloud = LabeledCloud(points=pts, labels=np.full(300, 9, np.uint8))
        mask = backproject_mask(cloud, CAM, IDENTITY, splat_radius_px=2.0,
                                fill_limit=64.0)
        assert set(np.unique(mask.labels)) <= {9, 255}

    def test_fill_limit_monotone(self):
        rng = np.random.default_rng(14)
        pts = rng.uniform(-0.5, 0.5, size=(40, 3)) + [0, 0, 3]
        labels = rng.integers(1, 4, size=40).astype(np.uint8)
        cloud = LabeledCloud(points=pts, labels=labels)
        small = backproject_mask(cloud, CAM, IDENTITY, fill_limit=2.0)
        large = backproject_mask(cloud, CAM, IDENTITY, fill_limit=16.0)
        covered_small = small.labels != 255
        assert np.all(large.labels[covered_small] == small.labels[covered_small])

    def test_half_space_boundary(self):
        # dense two-label half spaces on a plane facing the camera
        rng = np.random.default_rng(15)
        n = 4000
        xy = rng.uniform(-1.2, 1.2, size=(n, 2))
        pts = np.column_stack([xy, np.full(n, 2.0)])
        labels = np.where(xy[:, 0] < 0, 1, 2).astype(np.uint8)
        cloud = LabeledCloud(points=pts, labels=labels)
        mask = backproject_mask(cloud, CAM, IDENTITY, splat_radius_px=1.5,
                                fill_limit=8.0)
        # analytic boundary: world x = 0 maps to pixel column cx
        labeled = mask.labels != 255
        cols = np.arange(60)[None, :].repeat(60, axis=0)
        expected = np.where(cols < 30, 1, 2)
        agree = (mask.labels == expected) & labeled
        near_boundary = np.abs(cols - 30) <= 2
        judged = labeled & ~near_boundary
        assert judged.sum() > 500
        assert agree[judged].sum() / judged.sum() >= 0.99


class TestLabeledPly:
    def test_round_trip(self):
        rng = np.random.default_rng(16)
        cloud = LabeledCloud(points=rng.normal(size=(25, 3)),
                             labels=rng.integers(0, 10, 25).astype(np.uint8))
        back = read_labeled_ply(write_labeled_ply(cloud))
        assert np.array_equal(back.labels, cloud.labels)
        assert np.allclose(back.points, cloud.points, atol=1e-6)
