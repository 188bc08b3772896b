import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mogref.gradcheck import finite_difference_grad, max_rel_err
from mogref.matching import (
    Assignment,
    BBox,
    LossWeights,
    assignment_loss,
    giou,
    giou_pairs,
    grounding_loss,
    hungarian,
    iou,
    match_and_loss,
)
from mogref.rng import RngState
from mogref.tensor import Parameter, Tensor, backward, zero_grads


def brute_force_min_cost(cost: np.ndarray) -> float:
    """Exhaustive minimum over all injective assignments of size min(Q, T).

    Sums each candidate in row order so that exact float equality with the
    solver's row-ordered total is meaningful.
    """
    q, t = cost.shape
    if q <= t:
        candidates = (tuple(enumerate(perm)) for perm in itertools.permutations(range(t), q))
    else:
        candidates = (
            tuple(sorted((r, c) for c, r in enumerate(perm)))
            for perm in itertools.permutations(range(q), t)
        )
    return min(sum(cost[r, c] for r, c in pairs) for pairs in candidates)


def random_box(rng: RngState) -> BBox:
    w = rng.uniform_in(0.05, 0.5)
    h = rng.uniform_in(0.05, 0.5)
    cx = rng.uniform_in(w / 2, 1 - w / 2)
    cy = rng.uniform_in(h / 2, 1 - h / 2)
    return BBox(cx, cy, w, h)


class TestBBox:
    def test_field_validation(self):
        with pytest.raises(ValueError, match="cx"):
            BBox(1.2, 0.5, 0.1, 0.1)
        with pytest.raises(ValueError, match="w"):
            BBox(0.5, 0.5, -0.1, 0.1)

    def test_pixel_round_trip(self):
        b = BBox.from_pixel(10, 20, 30, 40, 100, 200)
        assert b.cx == pytest.approx(0.25)
        assert b.cy == pytest.approx(0.2)
        assert b.w == pytest.approx(0.3)
        assert b.h == pytest.approx(0.2)

    def test_degenerate_zero_width_allowed(self):
        assert BBox(0.5, 0.5, 0.0, 0.3).area() == 0.0


class TestIoU:
    def test_self_iou_is_one(self):
        b = BBox(0.4, 0.4, 0.2, 0.3)
        assert iou(b, b) == 1.0

    def test_disjoint_is_zero(self):
        assert iou(BBox(0.1, 0.1, 0.1, 0.1), BBox(0.9, 0.9, 0.1, 0.1)) == 0.0

    def test_hand_third_overlap(self):
        a = BBox(0.25, 0.5, 0.5, 1.0)
        b = BBox(0.5, 0.5, 0.5, 1.0)
        assert iou(a, b) == pytest.approx(1.0 / 3.0, abs=1e-9)

    def test_two_zero_area_boxes(self):
        assert iou(BBox(0.5, 0.5, 0.0, 0.0), BBox(0.5, 0.5, 0.0, 0.0)) == 0.0

    @given(st.integers(0, 100_000))
    def test_symmetry_and_range(self, seed):
        rng = RngState(seed)
        a, b = random_box(rng), random_box(rng)
        v = iou(a, b)
        assert iou(b, a) == v
        assert 0.0 <= v <= 1.0


class TestGIoU:
    def test_identical_boxes(self):
        b = BBox(0.3, 0.6, 0.2, 0.2)
        assert giou(b, b) == pytest.approx(1.0, abs=1e-12)

    def test_hand_far_corners(self):
        a = BBox(0.1, 0.1, 0.2, 0.2)
        b = BBox(0.9, 0.9, 0.2, 0.2)
        assert giou(a, b) == pytest.approx(-0.92, abs=1e-9)

    def test_nested_boxes_equal_iou(self):
        outer = BBox(0.5, 0.5, 0.6, 0.6)
        inner = BBox(0.5, 0.5, 0.2, 0.2)
        assert giou(outer, inner) == pytest.approx(iou(outer, inner), abs=1e-12)

    @given(st.integers(0, 100_000))
    def test_range_and_upper_bound_by_iou(self, seed):
        rng = RngState(seed)
        a, b = random_box(rng), random_box(rng)
        g = giou(a, b)
        assert -1.0 <= g <= 1.0
        assert g <= iou(a, b) + 1e-12

    @given(st.integers(0, 100_000))
    def test_tensor_version_agrees_with_scalar(self, seed):
        rng = RngState(seed)
        boxes_a = [random_box(rng) for _ in range(3)]
        boxes_b = [random_box(rng) for _ in range(3)]
        tens = giou_pairs(
            Tensor(np.stack([b.to_array() for b in boxes_a])),
            Tensor(np.stack([b.to_array() for b in boxes_b])),
        ).data
        scal = [giou(a, b) for a, b in zip(boxes_a, boxes_b)]
        assert np.abs(tens - scal).max() < 1e-12


class TestHungarian:
    def test_diagonal_zeros(self):
        a = hungarian([[0.0, 9.0], [9.0, 0.0]])
        assert a.pairs == ((0, 0), (1, 1))
        assert a.total_cost == 0.0

    def test_hand_two_by_two(self):
        a = hungarian([[4.0, 1.0], [2.0, 3.0]])
        assert a.pairs == ((0, 1), (1, 0))
        assert a.total_cost == 3.0

    def test_empty_matrix(self):
        assert hungarian(np.zeros((0, 3))).pairs == ()
        assert hungarian(np.zeros((3, 0))).pairs == ()

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            hungarian([[np.inf, 1.0], [1.0, 2.0]])

    def test_lexicographic_tie_break(self):
        assert hungarian([[1.0, 1.0], [1.0, 1.0]]).pairs == ((0, 0), (1, 1))
        # row 0 ties between columns 0 and 2; smallest column wins
        a = hungarian([[5.0, 9.0, 5.0], [9.0, 5.0, 9.0], [5.0, 9.0, 5.0]])
        assert a.pairs == ((0, 0), (1, 1), (2, 2))

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
    def test_optimal_vs_brute_force(self, q, t, seed):
        rng = RngState(seed)
        cost = rng.uniform_array((q, t), -5.0, 5.0)
        result = hungarian(cost)
        assert len(result.pairs) == min(q, t)
        rows = [r for r, _ in result.pairs]
        cols = [c for _, c in result.pairs]
        assert len(set(rows)) == len(rows)
        assert len(set(cols)) == len(cols)
        assert result.total_cost == pytest.approx(brute_force_min_cost(cost), abs=0.0)
        assert result.total_cost == sum(cost[r, c] for r, c in result.pairs)

    @given(st.integers(2, 5), st.integers(0, 10_000), st.floats(-100.0, 100.0))
    def test_constant_shift_preserves_argmin(self, n, seed, shift):
        rng = RngState(seed)
        cost = rng.uniform_array((n, n), -5.0, 5.0)
        assert hungarian(cost).pairs == hungarian(cost + shift).pairs

    @given(st.integers(1, 4), st.integers(0, 10_000))
    def test_integer_ties_lexicographically_minimal(self, n, seed):
        # small integer entries force many exactly-optimal assignments; the
        # solver must return the lexicographically smallest one
        rng = RngState(seed)
        cost = np.array([[float(rng.randint(3)) for _ in range(n)] for _ in range(n)])
        result = hungarian(cost)
        totals = {
            perm: sum(cost[r, c] for r, c in enumerate(perm))
            for perm in itertools.permutations(range(n))
        }
        best = min(totals.values())
        assert result.total_cost == best
        optimal_pairs = [tuple(enumerate(p)) for p, t in totals.items() if t == best]
        assert result.pairs == min(optimal_pairs)


class TestMatchAndLoss:
    def test_perfect_prediction_zero_loss(self):
        targets = [BBox(0.3, 0.4, 0.2, 0.2), BBox(0.7, 0.6, 0.1, 0.3)]
        boxes = np.stack([t.to_array() for t in targets] + [[0.5, 0.5, 0.1, 0.1]])
        conf = np.array([1.0, 1.0, 0.0])
        loss, assignment = match_and_loss(Tensor(boxes), Tensor(conf), targets)
        assert loss.item() == pytest.approx(0.0, abs=1e-9)
        assert set(assignment.pairs) == {(0, 0), (1, 1)}

    def test_single_target_yields_one_pair(self):
        rng = RngState(1)
        boxes = Tensor(rng.uniform_array((4, 4), 0.3, 0.7))
        conf = Tensor(rng.uniform_array((4,), 0.2, 0.8))
        _, assignment = match_and_loss(boxes, conf, [BBox(0.5, 0.5, 0.2, 0.2)])
        assert len(assignment.pairs) == 1

    def test_no_targets_rejected(self):
        with pytest.raises(ValueError):
            match_and_loss(Tensor(np.full((2, 4), 0.5)), Tensor(np.full(2, 0.5)), [])

    @given(st.integers(0, 2_000))
    def test_loss_non_negative(self, seed):
        rng = RngState(seed)
        boxes = Tensor(rng.uniform_array((3, 4), 0.05, 0.95))
        conf = Tensor(rng.uniform_array((3,), 0.05, 0.95))
        targets = [random_box(rng) for _ in range(rng.randint(3) + 1)]
        loss, _ = match_and_loss(boxes, conf, targets)
        assert loss.item() >= 0.0

    def test_gradient_matches_finite_differences(self):
        rng = RngState(6)
        boxes = Parameter("boxes", rng.uniform_array((3, 4), 0.25, 0.75))
        conf = Parameter("conf", rng.uniform_array((3,), 0.2, 0.8))
        targets = [random_box(rng) for _ in range(2)]
        _, assignment = match_and_loss(boxes, conf, targets)

        def loss():
            return assignment_loss(boxes, conf, targets, assignment)

        zero_grads([boxes, conf])
        backward(loss())
        for p in (boxes, conf):
            fd = finite_difference_grad(lambda _: loss(), p)
            assert max_rel_err(p.grad, fd) < 1e-4, p.name

    def test_batch_loss_averages_samples(self):
        rng = RngState(8)
        boxes = Tensor(rng.uniform_array((2, 3, 4), 0.3, 0.7))
        conf = Tensor(rng.uniform_array((2, 3), 0.2, 0.8))
        targets = [[random_box(rng)], [random_box(rng), random_box(rng)]]
        total, assignments = grounding_loss(boxes, conf, targets)
        from mogref.tensor import select

        per = [
            match_and_loss(select(boxes, b, 0), select(conf, b, 0), targets[b])[0].item()
            for b in range(2)
        ]
        assert total.item() == pytest.approx(sum(per) / 2.0, abs=1e-12)
        assert len(assignments) == 2

    def test_batch_size_mismatch_rejected(self):
        with pytest.raises(ValueError):
            grounding_loss(Tensor(np.full((2, 1, 4), 0.5)), Tensor(np.full((2, 1), 0.5)),
                           [[BBox(0.5, 0.5, 0.1, 0.1)]])
