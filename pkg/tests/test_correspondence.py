import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cmlab.correspondence import (
    PointGroup,
    PointGroupSet,
    GroupedEmbeddings,
    mask_miou,
    points_to_groups,
    pool_groups,
    project_points,
)
from cmlab.scene import CameraCalibration, PointCloud, SemanticMaskSet


def simple_calib(fx=100.0, fy=100.0, cx=50.0, cy=50.0):
    return {
        "cam0": CameraCalibration(
            fx=fx, fy=fy, cx=cx, cy=cy, rotation=np.eye(3), translation=np.zeros(3)
        )
    }


class TestProjection:
    def test_optical_axis_hits_principal_point(self):
        pc = PointCloud(data=np.array([[0.0, 0.0, 10.0]]))
        res = project_points(pc, simple_calib(), (100, 100))
        assert res.valid[0]
        assert res.pixel_uv[0] == pytest.approx((50.0, 50.0))
        assert res.cameras[res.camera_index[0]] == "cam0"

    def test_point_behind_camera_invalid(self):
        pc = PointCloud(data=np.array([[0.0, 0.0, -1.0]]))
        res = project_points(pc, simple_calib(), (100, 100))
        assert not res.valid[0]
        assert res.camera_index[0] == -1

    def test_hand_pinhole_arithmetic(self):
        # u = 100 * 1 / 10 + 50 = 60
        pc = PointCloud(data=np.array([[1.0, 0.0, 10.0]]))
        res = project_points(pc, simple_calib(), (100, 100))
        assert res.pixel_uv[0] == pytest.approx((60.0, 50.0))

    def test_lowest_camera_id_wins(self):
        calib = simple_calib()
        calib["cam1"] = calib["cam0"]
        pc = PointCloud(data=np.array([[0.0, 0.0, 5.0]]))
        res = project_points(pc, calib, (100, 100))
        assert res.cameras[res.camera_index[0]] == "cam0"

    def test_out_of_bounds_invalid(self):
        pc = PointCloud(data=np.array([[100.0, 0.0, 10.0]]))  # u = 1050
        res = project_points(pc, simple_calib(), (100, 100))
        assert not res.valid[0]

    @given(st.integers(min_value=0, max_value=2**31))
    @settings(max_examples=30, deadline=None)
    def test_valid_points_reproject_in_bounds(self, seed):
        rng = np.random.default_rng(seed)
        pc = PointCloud(data=rng.uniform(-20, 20, size=(60, 3)))
        res = project_points(pc, simple_calib(), (64, 64))
        uv = res.pixel_uv[res.valid]
        assert np.all(uv[:, 0] >= 0) and np.all(uv[:, 0] < 64)
        assert np.all(uv[:, 1] >= 0) and np.all(uv[:, 1] < 64)


class TestPointGroups:
    def test_single_label_mask_gives_one_group(self):
        pc = PointCloud(data=np.array([[0.0, 0.0, 5.0], [1.0, 1.0, 10.0]]))
        masks = {"cam0": SemanticMaskSet(labels=np.full((100, 100), 7, dtype=np.uint16))}
        groups = points_to_groups(project_points(pc, simple_calib(), (100, 100)), masks)
        assert len(groups) == 1
        g = groups.groups[0]
        assert g.label == 7 and g.camera_id == "cam0"
        assert np.array_equal(g.indices, [0, 1])

    def test_no_valid_points_gives_empty_set(self):
        pc = PointCloud(data=np.array([[0.0, 0.0, -5.0]]))
        masks = {"cam0": SemanticMaskSet(labels=np.zeros((100, 100), dtype=np.uint16))}
        groups = points_to_groups(project_points(pc, simple_calib(), (100, 100)), masks)
        assert len(groups) == 0

    def test_hand_enumerated_two_label_grouping(self):
        # 2x2 image, fx=fy=1, cx=cy=1: x=-1 -> u=0, x=0 -> u=1 (same for v)
        calib = simple_calib(fx=1.0, fy=1.0, cx=1.0, cy=1.0)
        pts = np.array(
            [
                [-1.0, -1.0, 1.0],  # pixel (0, 0) -> label 3
                [0.0, -1.0, 1.0],   # pixel (1, 0) -> label 3
                [-1.0, 0.0, 1.0],   # pixel (0, 1) -> label 5
                [0.0, 0.0, 1.0],    # pixel (1, 1) -> label 5
            ]
        )
        mask = SemanticMaskSet(labels=np.array([[3, 3], [5, 5]], dtype=np.uint16))
        groups = points_to_groups(
            project_points(PointCloud(data=pts), calib, (2, 2)), {"cam0": mask}
        )
        by_label = {g.label: list(g.indices) for g in groups}
        assert by_label == {3: [0, 1], 5: [2, 3]}

    def test_mask_size_mismatch_rejected(self):
        pc = PointCloud(data=np.array([[0.0, 0.0, 5.0]]))
        proj = project_points(pc, simple_calib(), (100, 100))
        with pytest.raises(ValueError, match="larger image"):
            points_to_groups(proj, {"cam0": SemanticMaskSet(labels=np.zeros((10, 10), np.uint16))})

    @given(st.integers(min_value=0, max_value=2**31))
    @settings(max_examples=25, deadline=None)
    def test_groups_partition_valid_points(self, seed):
        rng = np.random.default_rng(seed)
        pc = PointCloud(data=rng.uniform(-15, 15, size=(80, 3)))
        labels = rng.integers(0, 4, size=(64, 64)).astype(np.uint16)
        proj = project_points(pc, simple_calib(fx=30, fy=30, cx=32, cy=32), (64, 64))
        groups = points_to_groups(proj, {"cam0": SemanticMaskSet(labels=labels)})
        members = np.concatenate([g.indices for g in groups]) if len(groups) else np.array([], int)
        assert len(members) == len(set(members.tolist()))  # disjoint
        assert set(members.tolist()) == set(np.flatnonzero(proj.valid).tolist())
        for g in groups:
            assert g.indices.size > 0


class TestPooling:
    def test_identical_rows_pool_to_normalized_row(self):
        v = np.array([[3.0, 4.0], [3.0, 4.0]])
        groups = PointGroupSet(groups=(PointGroup(indices=np.array([0, 1]), label=1),))
        pooled = pool_groups(v, groups)
        assert pooled.features[0] == pytest.approx([0.6, 0.8])
        assert pooled.labels[0] == 1

    def test_two_singleton_groups(self):
        feats = np.array([[2.0, 0.0], [0.0, 5.0]])
        groups = PointGroupSet(
            groups=(
                PointGroup(indices=np.array([0]), label=1),
                PointGroup(indices=np.array([1]), label=2),
            )
        )
        pooled = pool_groups(feats, groups)
        assert pooled.features == pytest.approx(np.eye(2))

    def test_hand_mean_then_normalize(self):
        feats = np.array([[1.0, 0.0], [0.0, 1.0]])
        groups = PointGroupSet(groups=(PointGroup(indices=np.array([0, 1]), label=9),))
        pooled = pool_groups(feats, groups)
        r = 1.0 / math.sqrt(2.0)
        assert pooled.features[0] == pytest.approx([r, r], abs=1e-12)

    def test_zero_mean_group_rejected(self):
        feats = np.array([[1.0, 0.0], [-1.0, 0.0]])
        groups = PointGroupSet(groups=(PointGroup(indices=np.array([0, 1]), label=0),))
        with pytest.raises(ValueError, match="degenerate"):
            pool_groups(feats, groups)

    def test_mask_grid_pooling(self):
        mask = SemanticMaskSet(labels=np.array([[1, 1], [2, 2]], dtype=np.uint16))
        feats = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 2.0], [0.0, 2.0]])
        pooled = pool_groups(feats, mask)
        assert list(pooled.labels) == [1, 2]
        assert pooled.features == pytest.approx(np.eye(2))

    @given(st.integers(min_value=0, max_value=2**31))
    @settings(max_examples=30, deadline=None)
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        feats = rng.standard_normal((10, 5)) + 0.5
        idx = np.arange(6)
        g1 = PointGroupSet(groups=(PointGroup(indices=idx, label=0),))
        perm = rng.permutation(10)
        inv = np.argsort(perm)
        g2 = PointGroupSet(groups=(PointGroup(indices=np.sort(inv[idx]), label=0),))
        p1 = pool_groups(feats, g1)
        p2 = pool_groups(feats[perm], g2)
        assert np.abs(p1.features - p2.features).max() <= 1e-12

    def test_unit_norm_enforced(self):
        with pytest.raises(ValueError, match="unit norm"):
            GroupedEmbeddings(features=np.array([[2.0, 0.0]]), labels=np.array([1]))


def brute_force_miou(a: np.ndarray, b: np.ndarray) -> Fraction:
    labels = sorted(set(a.reshape(-1).tolist()) | set(b.reshape(-1).tolist()))
    total = Fraction(0)
    for label in labels:
        inter = 0
        union = 0
        for i in range(a.shape[0]):
            for j in range(a.shape[1]):
                in_a = a[i, j] == label
                in_b = b[i, j] == label
                inter += int(in_a and in_b)
                union += int(in_a or in_b)
        total += Fraction(inter, union)
    return total / len(labels)


class TestMaskMiou:
    def test_identical_masks_score_one(self):
        m = SemanticMaskSet(labels=np.arange(9, dtype=np.uint16).reshape(3, 3))
        assert mask_miou(m, m) == 1.0

    def test_disjoint_label_sets_score_zero(self):
        a = SemanticMaskSet(labels=np.zeros((2, 2), dtype=np.uint16))
        b = SemanticMaskSet(labels=np.ones((2, 2), dtype=np.uint16))
        assert mask_miou(a, b) == 0.0

    def test_hand_case_seven_twelfths(self):
        a = SemanticMaskSet(labels=np.array([[1, 1], [2, 2]], dtype=np.uint16))
        b = SemanticMaskSet(labels=np.array([[1, 2], [2, 2]], dtype=np.uint16))
        assert mask_miou(a, b) == float(Fraction(7, 12))

    def test_dimension_mismatch_rejected(self):
        a = SemanticMaskSet(labels=np.zeros((2, 2), dtype=np.uint16))
        b = SemanticMaskSet(labels=np.zeros((2, 3), dtype=np.uint16))
        with pytest.raises(ValueError, match="dimensions"):
            mask_miou(a, b)

    @given(
        hnp.arrays(np.uint16, (4, 5), elements=st.integers(0, 3)),
        hnp.arrays(np.uint16, (4, 5), elements=st.integers(0, 3)),
    )
    @settings(max_examples=60, deadline=None)
    def test_symmetry_range_and_oracle(self, a, b):
        ma, mb = SemanticMaskSet(labels=a), SemanticMaskSet(labels=b)
        psi = mask_miou(ma, mb)
        assert 0.0 <= psi <= 1.0
        assert psi == mask_miou(mb, ma)
        assert mask_miou(ma, ma) == 1.0
        assert psi == float(brute_force_miou(a, b))
