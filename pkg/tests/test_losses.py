import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmlab.losses import (
    LossReport,
    PositiveSet,
    SimilarityMatrix,
    cccl_loss,
    combined_objective,
    iccl_loss,
    loss_from_similarity,
    nce_loss,
)
from conftest import fd_gradient, rel_err, unit_rows

TWO_TERM = math.log(1.0 + math.exp(-1.0))  # -log(e / (e + 1)) ~= 0.313262


def rand_labeled(rng, m, d, n_labels):
    return unit_rows(rng, m, d), rng.integers(0, n_labels, size=m)


class TestNce:
    def test_single_pair_is_zero(self):
        q = np.array([[1.0, 0.0]])
        k = np.array([[0.0, 1.0]])
        assert nce_loss(q, k, tau=1.0).value == 0.0

    def test_two_identity_pairs(self):
        eye = np.eye(2)
        rep = nce_loss(eye, eye, tau=1.0)
        assert rep.value == pytest.approx(TWO_TERM, abs=1e-12)
        assert rep.contributing_anchors == 2

    def test_count_mismatch_rejected(self):
        with pytest.raises(ValueError, match="index-aligned"):
            nce_loss(np.eye(2), np.eye(3), tau=1.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            nce_loss(np.zeros((0, 2)), np.zeros((0, 2)), tau=1.0)

    def test_non_positive_temperature_rejected(self):
        with pytest.raises(ValueError, match="temperature"):
            nce_loss(np.eye(2), np.eye(2), tau=0.0)

    @given(st.integers(0, 2**31))
    @settings(max_examples=20, deadline=None)
    def test_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        m, d = int(rng.integers(2, 8)), int(rng.integers(3, 6))
        q, k = unit_rows(rng, m, d), unit_rows(rng, m, d)
        rep = nce_loss(q, k, tau=0.07)
        fq = fd_gradient(lambda x: nce_loss(x, k, tau=0.07).value, q)
        fk = fd_gradient(lambda x: nce_loss(q, x, tau=0.07).value, k)
        assert rel_err(rep.grad_q, fq) < 1e-6
        assert rel_err(rep.grad_k, fk) < 1e-6


class TestCccl:
    def test_unique_aligned_labels_reduce_to_nce(self):
        rng = np.random.default_rng(5)
        a, b = unit_rows(rng, 6, 4), unit_rows(rng, 6, 4)
        labels = rng.permutation(6)
        ca = cccl_loss((a, labels), (b, labels), tau=0.07)
        base = nce_loss(a, b, tau=0.07)
        assert ca.value == pytest.approx(base.value, abs=1e-12)
        assert np.abs(ca.grad_k - base.grad_q).max() <= 1e-12
        assert np.abs(ca.grad_q - base.grad_k).max() <= 1e-12

    def test_two_equal_positives_hand_case(self):
        k = (np.eye(2), np.array([0, 1]))
        q = (np.array([[1.0, 0.0], [1.0, 0.0]]), np.array([0, 0]))
        rep = cccl_loss(k, q, tau=1.0)
        # anchor 0: two positives each -log(e / 2e) = log 2; anchor 1 skipped
        assert rep.value == pytest.approx(math.log(2.0), abs=1e-12)
        assert rep.contributing_anchors == 1

    def test_no_contributing_anchors_flagged(self):
        k = (np.eye(2), np.array([0, 1]))
        q = (np.eye(2), np.array([5, 6]))
        rep = cccl_loss(k, q, tau=1.0)
        assert rep.value == 0.0
        assert rep.contributing_anchors == 0
        assert np.all(rep.grad_q == 0) and np.all(rep.grad_k == 0)

    def test_sum_reduction_flag(self):
        rng = np.random.default_rng(2)
        k = rand_labeled(rng, 5, 4, 2)
        q = rand_labeled(rng, 6, 4, 2)
        mean_rep = cccl_loss(k, q, tau=0.5, reduction="mean")
        sum_rep = cccl_loss(k, q, tau=0.5, reduction="sum")
        assert sum_rep.value == pytest.approx(mean_rep.value * mean_rep.contributing_anchors, rel=1e-12)

    @given(st.integers(0, 2**31))
    @settings(max_examples=20, deadline=None)
    def test_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        mk, mq, d = int(rng.integers(2, 7)), int(rng.integers(2, 7)), 4
        k, lk = rand_labeled(rng, mk, d, 3)
        q, lq = rand_labeled(rng, mq, d, 3)
        rep = cccl_loss((k, lk), (q, lq), tau=0.07)
        fk = fd_gradient(lambda x: cccl_loss((x, lk), (q, lq), tau=0.07).value, k)
        fq = fd_gradient(lambda x: cccl_loss((k, lk), (x, lq), tau=0.07).value, q)
        assert rel_err(rep.grad_k, fk) < 1e-6
        assert rel_err(rep.grad_q, fq) < 1e-6


class TestIccl:
    def test_two_groups_sharing_label_is_exactly_zero(self):
        k = (unit_rows(np.random.default_rng(0), 2, 3), np.array([4, 4]))
        rep = iccl_loss(k, tau=0.07)
        assert rep.value == 0.0
        assert rep.contributing_anchors == 2

    def test_three_group_hand_case(self):
        feats = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        rep = iccl_loss((feats, np.array([0, 0, 1])), tau=1.0)
        assert rep.value == pytest.approx(TWO_TERM, abs=1e-12)
        assert rep.contributing_anchors == 2

    def test_single_group_flagged_zero(self):
        rep = iccl_loss((np.array([[1.0, 0.0]]), np.array([3])), tau=1.0)
        assert rep.value == 0.0
        assert rep.contributing_anchors == 0

    def test_grad_q_absent(self):
        rep = iccl_loss((np.eye(3), np.array([0, 0, 1])), tau=1.0)
        assert rep.grad_q is None

    @given(st.integers(0, 2**31))
    @settings(max_examples=20, deadline=None)
    def test_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        m, d = int(rng.integers(3, 9)), 4
        k, lk = rand_labeled(rng, m, d, 3)
        rep = iccl_loss((k, lk), tau=0.07)
        fk = fd_gradient(lambda x: iccl_loss((x, lk), tau=0.07).value, k)
        assert rel_err(rep.grad_k, fk) < 1e-6

    def test_anchor_self_similarity_is_inert(self):
        rng = np.random.default_rng(1)
        k, lk = rand_labeled(rng, 5, 4, 2)
        sim = SimilarityMatrix(values=k @ k.T, tau=0.07)
        positives = PositiveSet.intra_modal(lk)
        value, grad, contrib = loss_from_similarity(sim, positives)
        garbage = sim.values.copy()
        np.fill_diagonal(garbage, 1e9)
        value2, grad2, contrib2 = loss_from_similarity(
            SimilarityMatrix(values=garbage, tau=0.07), positives
        )
        assert value2 == pytest.approx(value, abs=1e-12)
        assert np.abs(grad2 - grad).max() <= 1e-12
        assert np.all(grad[np.eye(5, dtype=bool)] == 0)
        assert contrib == contrib2

    def test_monotone_conflict_response(self):
        # two same-label groups start antipodal; rotating them together must
        # strictly decrease the loss at every step
        other = unit_rows(np.random.default_rng(3), 2, 2)
        labels = np.array([7, 7, 1, 2])
        values = []
        for t in np.linspace(0.0, 0.45 * math.pi, 6):
            a = np.array([math.cos(t), math.sin(t)])
            b = np.array([-math.cos(t), math.sin(t)])
            feats = np.vstack([a, b, other])
            values.append(iccl_loss((feats, labels), tau=0.5).value)
        assert all(x > y for x, y in zip(values, values[1:]))


class TestLossCore:
    def test_row_shift_invariance(self):
        rng = np.random.default_rng(0)
        vals = rng.standard_normal((3, 4))
        pos = PositiveSet.cross_modal(np.array([0, 1, 2]), np.array([0, 1, 2, 0]))
        v1, _, _ = loss_from_similarity(SimilarityMatrix(values=vals, tau=1.0), pos)
        shifted = vals.copy()
        shifted[1] += 3.7
        v2, _, _ = loss_from_similarity(SimilarityMatrix(values=shifted, tau=1.0), pos)
        assert v2 == pytest.approx(v1, abs=1e-9)

    def test_one_by_one_positive_is_zero(self):
        sim = SimilarityMatrix(values=np.array([[0.3]]), tau=1.0)
        pos = PositiveSet(positive=np.array([[True]]), allowed=np.array([[True]]))
        value, grad, contrib = loss_from_similarity(sim, pos)
        assert value == 0.0 and contrib == 1
        assert grad == pytest.approx(np.zeros((1, 1)))

    def test_matches_direct_log_softmax_evaluation(self):
        rng = np.random.default_rng(9)
        vals = rng.standard_normal((5, 7))
        tau = 0.3
        pos_mask = rng.random((5, 7)) < 0.4
        pos_mask[:, 0] = True  # every row contributes
        pos = PositiveSet(positive=pos_mask, allowed=np.ones_like(pos_mask))
        value, _, contrib = loss_from_similarity(SimilarityMatrix(values=vals, tau=tau), pos)
        z = vals / tau
        expected = []
        for r in range(5):
            logp = z[r] - np.log(np.exp(z[r]).sum())
            expected.append(-logp[pos_mask[r]].mean())
        assert contrib == 5
        assert value == pytest.approx(np.mean(expected), rel=1e-12)

    def test_shape_mismatch_rejected(self):
        sim = SimilarityMatrix(values=np.zeros((2, 2)), tau=1.0)
        pos = PositiveSet.matched_pairs(3)
        with pytest.raises(ValueError, match="shape"):
            loss_from_similarity(sim, pos)

    def test_positive_outside_allowed_rejected(self):
        with pytest.raises(ValueError, match="allowed"):
            PositiveSet(positive=np.array([[True]]), allowed=np.array([[False]]))

    @given(st.integers(0, 2**31))
    @settings(max_examples=30, deadline=None)
    def test_losses_are_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        q, lq = rand_labeled(rng, int(rng.integers(1, 9)), 5, 3)
        k, lk = rand_labeled(rng, int(rng.integers(1, 9)), 5, 3)
        assert cccl_loss((k, lk), (q, lq), tau=0.07).value >= 0.0
        assert iccl_loss((k, lk), tau=0.07).value >= 0.0
        m = min(len(lq), len(lk))
        assert nce_loss(q[:m], k[:m], tau=0.07).value >= 0.0

    @given(st.integers(0, 2**31))
    @settings(max_examples=20, deadline=None)
    def test_permutation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        k, lk = rand_labeled(rng, 6, 4, 3)
        q, lq = rand_labeled(rng, 5, 4, 3)
        rep = cccl_loss((k, lk), (q, lq), tau=0.07)
        pk, pq = rng.permutation(6), rng.permutation(5)
        rep_p = cccl_loss((k[pk], lk[pk]), (q[pq], lq[pq]), tau=0.07)
        assert rep_p.value == pytest.approx(rep.value, abs=1e-12)
        assert np.abs(rep_p.grad_k - rep.grad_k[pk]).max() <= 1e-12
        assert np.abs(rep_p.grad_q - rep.grad_q[pq]).max() <= 1e-12


class TestCombined:
    def setup_method(self):
        rng = np.random.default_rng(4)
        self.q = rand_labeled(rng, 6, 4, 3)
        self.k = rand_labeled(rng, 5, 4, 3)

    def test_cross_only(self):
        combined = combined_objective(self.q, self.k, weights=(1.0, 0.0), tau=0.07)
        alone = cccl_loss(self.k, self.q, tau=0.07)
        assert combined.value == alone.value
        assert np.array_equal(combined.grad_k, alone.grad_k)

    def test_intra_only(self):
        combined = combined_objective(self.q, self.k, weights=(0.0, 1.0), tau=0.07)
        alone = iccl_loss(self.k, tau=0.07)
        assert combined.value == alone.value
        assert np.array_equal(combined.grad_k, alone.grad_k)
        assert np.all(combined.grad_q == 0)

    def test_weighted_sum_is_additive(self):
        combined = combined_objective(self.q, self.k, weights=(1.0, 1.0), tau=0.07)
        cross = cccl_loss(self.k, self.q, tau=0.07)
        intra = iccl_loss(self.k, tau=0.07)
        assert combined.value == pytest.approx(cross.value + intra.value, abs=1e-12)
        assert np.abs(combined.grad_k - (cross.grad_k + intra.grad_k)).max() <= 1e-12
        assert np.abs(combined.grad_q - cross.grad_q).max() <= 1e-12

    def test_zero_weights_rejected(self):
        with pytest.raises(ValueError, match="weight"):
            combined_objective(self.q, self.k, weights=(0.0, 0.0))

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            combined_objective(self.q, self.k, weights=(-1.0, 1.0))


def test_loss_report_rejects_negative_value():
    with pytest.raises(ValueError):
        LossReport(value=-0.5, grad_q=None, grad_k=None, contributing_anchors=0)
