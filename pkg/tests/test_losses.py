import numpy as np
import pytest

from clusiam.autodiff import Tape, finite_diff_check
from clusiam.clustering import PseudoLabels
from clusiam.losses import (
    LossMode,
    MemoryBank,
    compute_centers,
    focal_center_loss,
    instance_loss,
    inter_view_loss,
    soft_assignment_log_probs,
    total_loss,
    update_banks,
)


def labels_of(mapping, epoch=0):
    return PseudoLabels(mapping=mapping, epoch=epoch)


class TestCenters:
    def test_mean_of_two_rows(self):
        bank = np.array([[1.0, 0.0], [0.0, 1.0]])
        centers = compute_centers(bank, labels_of({0: 0, 1: 0}))
        assert np.array_equal(centers, [[0.5, 0.5]])

    def test_singleton_cluster(self):
        bank = np.array([[2.0, 3.0], [9.0, 9.0]])
        centers = compute_centers(bank, labels_of({0: 0}))
        assert np.array_equal(centers[0], [2.0, 3.0])

    def test_matches_grouping_oracle(self):
        rng = np.random.default_rng(0)
        bank = rng.normal(size=(30, 6))
        ids = rng.integers(0, 5, size=30)
        mapping = {i: int(ids[i]) for i in range(30)}
        centers = compute_centers(bank, labels_of(mapping))
        for cid in range(5):
            members = [i for i in range(30) if ids[i] == cid]
            expected = np.mean([bank[i] for i in members], axis=0)
            assert np.abs(centers[cid] - expected).max() < 1e-12

    def test_empty_cluster_id_rejected(self):
        bank = np.ones((3, 2))
        labels = PseudoLabels(mapping={0: 0, 1: 2}, epoch=0, n_clusters=3)
        with pytest.raises(ValueError, match="cluster id 1"):
            compute_centers(bank, labels)


class TestInstanceLoss:
    def test_identical_vectors(self):
        tape = Tape()
        v = np.array([[0.3, 0.4]])
        loss = instance_loss(tape, tape.constant(v), tape.constant(v.copy()))
        assert abs(loss.item() + 1.0) < 1e-12

    def test_orthogonal_vectors(self):
        tape = Tape()
        loss = instance_loss(
            tape, tape.constant([[1.0, 0.0]]), tape.constant([[0.0, 1.0]])
        )
        assert abs(loss.item()) < 1e-15

    def test_hand_example(self):
        tape = Tape()
        loss = instance_loss(
            tape, tape.constant([[1.0, 0.0]]), tape.constant([[1.0, 1.0]])
        )
        assert abs(loss.item() + 1.0 / np.sqrt(2.0)) < 1e-12

    def test_zero_vector_rejected(self):
        tape = Tape()
        with pytest.raises(ValueError, match="zero-norm"):
            instance_loss(tape, tape.constant([[0.0, 0.0]]), tape.constant([[1.0, 0.0]]))

    def test_stop_grad_gives_bitwise_zero_to_target(self):
        tape = Tape()
        z = tape.leaf([[0.5, 1.0]], requires_grad=True)
        x2 = tape.leaf([[1.0, 0.2]], requires_grad=True)
        loss = instance_loss(tape, z, x2, stop_grad=True)
        grads = tape.backward(loss)
        assert grads[x2.node_id].tobytes() == np.zeros((1, 2)).tobytes()
        assert grads[z.node_id].any()

    def test_no_stop_grad_flows_to_both(self):
        tape = Tape()
        z = tape.leaf([[0.5, 1.0]], requires_grad=True)
        x2 = tape.leaf([[1.0, 0.2]], requires_grad=True)
        grads = tape.backward(instance_loss(tape, z, x2, stop_grad=False))
        assert grads[x2.node_id].any() and grads[z.node_id].any()

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(4, 6))
        x2 = rng.normal(size=(4, 6))
        vals = []
        for c in (1.0, 7.3, 0.002):
            tape = Tape()
            vals.append(instance_loss(tape, tape.constant(z * c), tape.constant(x2)).item())
        assert abs(vals[0] - vals[1]) < 1e-12 and abs(vals[0] - vals[2]) < 1e-12


class TestInterViewLoss:
    def test_parallel_center(self):
        tape = Tape()
        centers = np.array([[2.0, 0.0]])
        loss = inter_view_loss(tape, tape.constant([[5.0, 0.0]]), centers, np.array([0]))
        assert abs(loss.item() + 1.0) < 1e-12

    def test_orthogonal_center(self):
        tape = Tape()
        centers = np.array([[0.0, 1.0]])
        loss = inter_view_loss(tape, tape.constant([[1.0, 0.0]]), centers, np.array([0]))
        assert abs(loss.item()) < 1e-15

    def test_zero_center_rejected(self):
        tape = Tape()
        with pytest.raises(ValueError, match="center"):
            inter_view_loss(
                tape, tape.constant([[1.0, 0.0]]), np.zeros((1, 2)), np.array([0])
            )

    def test_unlabeled_rows_excluded(self):
        tape = Tape()
        centers = np.array([[1.0, 0.0]])
        z = tape.constant([[1.0, 0.0], [0.0, 1.0]])
        loss = inter_view_loss(tape, z, centers, np.array([0, -1]))
        assert abs(loss.item() + 1.0) < 1e-12  # only the labeled row counts

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        centers = rng.normal(size=(3, 5))
        labels = np.array([0, 2, 1, -1])

        def fn(tape, z):
            return inter_view_loss(tape, z, centers, labels)

        report = finite_diff_check(fn, rng.normal(size=(4, 5)))
        assert report.passed, report.max_rel_error


class TestFocalCenterLoss:
    def test_single_cluster_is_zero(self):
        tape = Tape()
        centers = np.array([[0.4, 0.6]])
        loss = focal_center_loss(tape, tape.constant([[1.0, 2.0]]), centers, np.array([0]), 0.05)
        assert loss.item() == 0.0

    def test_saturated_softmax_vanishes(self):
        # logits 1/tau and 0: q = 1/(1 + e^-20), term below 1e-15
        tape = Tape()
        centers = np.array([[1.0, 0.0], [0.0, 0.0]])
        feats = tape.constant([[1.0, 123.0]])  # dot with center0 = 1, center1 = 0
        loss = focal_center_loss(tape, feats, centers, np.array([0]), 0.05)
        assert abs(loss.item()) < 1e-15

    def test_symmetric_half_probability(self):
        # two equidistant centers: q = 0.5; one branch contributes
        # -(1-q)^2 ln q = 0.25 * ln 2
        tape = Tape()
        centers = np.array([[1.0, 0.0], [0.0, 1.0]])
        feats = tape.constant([[0.7, 0.7]])
        loss = focal_center_loss(tape, feats, centers, np.array([0]), 0.05)
        expected = 0.25 * np.log(2.0)
        assert abs(loss.item() - expected) < 1e-12

    def test_two_branch_sum_matches_hand_value(self):
        # q = q-tilde = 0.5 on both branches gives -2 * 0.25 * ln 0.5
        tape = Tape()
        centers = np.array([[1.0, 0.0], [0.0, 1.0]])
        feats = tape.constant([[0.7, 0.7]])
        a = focal_center_loss(tape, feats, centers, np.array([0]), 0.05)
        b = focal_center_loss(tape, feats, centers, np.array([0]), 0.05)
        total = tape.add(a, b)
        assert abs(total.item() - (-2.0 * 0.25 * np.log(0.5))) < 1e-12
        assert abs(total.item() - 0.34657359027997264) < 1e-12

    def test_invalid_temperature(self):
        tape = Tape()
        with pytest.raises(ValueError, match="temperature"):
            soft_assignment_log_probs(tape, tape.constant([[1.0]]), np.ones((1, 1)), 0.0)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        tape = Tape()
        feats = tape.constant(rng.normal(size=(6, 4)))
        centers = rng.normal(size=(5, 4))
        log_q = soft_assignment_log_probs(tape, feats, centers, 0.05)
        q = np.exp(log_q.data)
        assert np.abs(q.sum(axis=1) - 1.0).max() < 1e-12
        assert q.min() > 0.0 and q.max() <= 1.0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        centers = rng.normal(size=(4, 5))
        labels = np.array([1, 3, -1])

        def fn(tape, x):
            return focal_center_loss(tape, x, centers, labels, 0.05)

        report = finite_diff_check(fn, rng.normal(size=(3, 5)))
        assert report.passed, report.max_rel_error


class TestTotalLoss:
    def build(self, mode, rng=None, m=3):
        rng = rng or np.random.default_rng(5)
        tape = Tape()
        x = tape.leaf(rng.normal(size=(4, 6)), requires_grad=True)
        x2 = tape.leaf(rng.normal(size=(4, 6)), requires_grad=True)
        w = tape.constant(rng.normal(size=(6, 6)))
        b = tape.constant(rng.normal(size=6))
        z = tape.add(tape.matmul(x, w), b)
        centers1 = rng.normal(size=(m, 6))
        centers2 = rng.normal(size=(m, 6))
        labels = np.array([0, 2, -1, 1])
        total, breakdown = total_loss(
            tape, z=z, x=x, x2=x2, labels_batch=labels,
            centers1=centers1, centers2=centers2, tau=0.05, mode=mode,
        )
        return tape, x, x2, total, breakdown

    def test_additivity_exact(self):
        _, _, _, total, bd = self.build(LossMode())
        assert total.item() == (bd.instance + bd.inter) + bd.intra
        assert total.item() == bd.total

    def test_three_halves(self):
        # three constant terms of 0.5 compose to exactly 1.5
        tape = Tape()
        terms = [tape.constant(np.asarray(0.5)) for _ in range(3)]
        total = tape.add(tape.add(terms[0], terms[1]), terms[2])
        assert total.item() == 1.5

    def test_drop_inter_composition(self):
        _, _, _, total_full, bd_full = self.build(LossMode())
        _, _, _, total_wo, bd_wo = self.build(LossMode(drop_inter=True))
        assert bd_wo.inter == 0.0
        assert bd_wo.instance == bd_full.instance
        assert bd_wo.intra == bd_full.intra
        assert total_wo.item() == bd_wo.instance + bd_wo.intra

    def test_drop_cluster_uses_reduced_form(self):
        _, _, _, _, bd = self.build(LossMode(drop_cluster=True))
        assert bd.inter == 0.0
        assert bd.intra != 0.0  # reduced second-branch term keeps it alive

    def test_branch2_gradient_only_from_its_intra_term(self):
        # with the second branch's assignment term switched off, no gradient
        # may reach the second branch at all (stop-grad covers the rest)
        tape, x, x2, total, _ = self.build(LossMode(intra_branch2=False))
        grads = tape.backward(total)
        assert grads[x2.node_id].tobytes() == np.zeros((4, 6)).tobytes()
        assert grads[x.node_id].any()

    def test_branch2_gradient_present_in_full_mode(self):
        tape, x, x2, total, _ = self.build(LossMode())
        grads = tape.backward(total)
        assert grads[x2.node_id].any()

    def test_no_centers_instance_only(self):
        rng = np.random.default_rng(6)
        tape = Tape()
        x = tape.leaf(rng.normal(size=(2, 4)), requires_grad=True)
        x2 = tape.leaf(rng.normal(size=(2, 4)), requires_grad=True)
        z = tape.mul(x, tape.constant(np.ones((2, 4))))
        total, bd = total_loss(
            tape, z=z, x=x, x2=x2, labels_batch=np.array([-1, -1]),
            centers1=None, centers2=None, tau=0.05, mode=LossMode(),
        )
        assert bd.inter == 0.0 and bd.intra == 0.0
        assert bd.instance == total.item()

    def test_symmetric_mode_trains_second_predictor_path(self):
        rng = np.random.default_rng(7)
        tape = Tape()
        x = tape.leaf(rng.normal(size=(3, 4)), requires_grad=True)
        x2 = tape.leaf(rng.normal(size=(3, 4)), requires_grad=True)
        w1, b1 = tape.constant(rng.normal(size=(4, 4))), tape.constant(rng.normal(size=4))
        w2 = tape.leaf(rng.normal(size=(4, 4)), requires_grad=True)
        b2 = tape.leaf(rng.normal(size=4), requires_grad=True)
        z = tape.add(tape.matmul(x, w1), b1)
        z2 = tape.add(tape.matmul(x2, w2), b2)
        centers1 = rng.normal(size=(2, 4))
        centers2 = rng.normal(size=(2, 4))
        total, _ = total_loss(
            tape, z=z, x=x, x2=x2, labels_batch=np.array([0, 1, 0]),
            centers1=centers1, centers2=centers2, tau=0.05,
            mode=LossMode(symmetric=True), z2=z2,
        )
        grads = tape.backward(total)
        assert grads[w2.node_id].any() and grads[b2.node_id].any()


class TestMemoryBank:
    def test_update_hand_example(self):
        bank = MemoryBank(np.array([[1.0, 0.0]]), momentum=0.2)
        bank.update(np.array([0]), np.array([[0.0, 1.0]]))
        assert np.allclose(bank.features[0], [0.2, 0.8], atol=1e-15)

    def test_momentum_near_one_keeps_bank(self):
        v0 = np.array([[1.0, 2.0]])
        bank = MemoryBank(v0.copy(), momentum=1.0 - 1e-12)
        bank.update(np.array([0]), np.array([[5.0, 5.0]]))
        assert np.abs(bank.features - v0).max() < 1e-9

    def test_geometric_convergence(self):
        rng = np.random.default_rng(8)
        v0 = rng.normal(size=(1, 4))
        x = rng.normal(size=(1, 4))
        bank = MemoryBank(v0.copy(), momentum=0.2)
        d0 = np.linalg.norm(v0 - x)
        for t in range(1, 51):
            bank.update(np.array([0]), x)
            expected = 0.2**t * d0
            assert abs(np.linalg.norm(bank.features - x) - expected) < 1e-9

    def test_index_out_of_range(self):
        bank = MemoryBank(np.zeros((2, 2)), momentum=0.2)
        with pytest.raises(IndexError):
            bank.update(np.array([2]), np.zeros((1, 2)))

    def test_only_batch_rows_change(self):
        rng = np.random.default_rng(9)
        feats = rng.normal(size=(5, 3))
        bank = MemoryBank(feats.copy(), momentum=0.2)
        bank.update(np.array([1, 3]), rng.normal(size=(2, 3)))
        for i in (0, 2, 4):
            assert np.array_equal(bank.features[i], feats[i])

    def test_momentum_validation(self):
        with pytest.raises(ValueError, match="momentum"):
            MemoryBank(np.zeros((1, 2)), momentum=1.0)

    def test_update_banks_pair(self):
        b1 = MemoryBank(np.zeros((3, 2)), momentum=0.2)
        b2 = MemoryBank(np.zeros((3, 2)), momentum=0.2)
        update_banks(b1, b2, np.array([0]), np.ones((1, 2)), 2 * np.ones((1, 2)))
        assert np.allclose(b1.features[0], 0.8)
        assert np.allclose(b2.features[0], 1.6)
