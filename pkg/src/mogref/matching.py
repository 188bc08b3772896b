"""Box geometry, Hungarian assignment, and the set-matching loss.

Boxes are normalized center form (cx, cy, w, h) in [0, 1]. IoU/GIoU exist
twice on purpose: scalar versions on :class:`BBox` feed metrics and the
assignment cost matrix, and a Tensor version (:func:`giou_pairs`) feeds the
differentiable loss. The two are tested against each other and against a
rasterized counting oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from mogref.tensor import (
    Tensor,
    absolute,
    log,
    maximum,
    minimum,
    select,
    take_rows,
    tsum,
)


@dataclass(frozen=True)
class BBox:
    """Normalized box: center (cx, cy) and extent (w, h), all in [0, 1]."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for field in ("cx", "cy", "w", "h"):
            v = getattr(self, field)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"BBox.{field} = {v} outside [0, 1]")

    def corners(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )

    def area(self) -> float:
        return self.w * self.h

    def to_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @staticmethod
    def from_pixel(x: float, y: float, w: float, h: float, image_w: float, image_h: float) -> "BBox":
        """Convert a top-left pixel box to normalized center form."""
        return BBox((x + w / 2.0) / image_w, (y + h / 2.0) / image_h, w / image_w, h / image_h)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union in [0, 1]; two zero-area boxes give 0."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.area() + b.area() - inter
    return inter / union if union > 0.0 else 0.0


def giou(a: BBox, b: BBox) -> float:
    """Generalized IoU in [-1, 1]: IoU minus the enclosing-box dead space."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.area() + b.area() - inter
    enclose = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    if enclose <= 0.0:
        return iou(a, b)
    base = inter / union if union > 0.0 else 0.0
    return base - (enclose - union) / enclose


# ---------------------------------------------------------------------------
# Hungarian assignment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Assignment:
    """Injective prediction-to-target pairs of size min(Q, T)."""

    pairs: tuple[tuple[int, int], ...]
    total_cost: float


def _solve_square(rows: list[list[float]]) -> list[int]:
    """Min-cost perfect matching on a square cost matrix (potentials +
    shortest augmenting path, O(n^3)). Returns the column of each row."""
    n = len(rows)
    if n == 0:
        return []
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    match = [0] * (n + 1)  # match[j] = row occupying column j, 1-based
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = inf
            j1 = -1
            row = rows[i0 - 1]
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    out = [0] * n
    for j in range(1, n + 1):
        if match[j] > 0:
            out[match[j] - 1] = j - 1
    return out


def _optimal_total(rows: list[list[float]]) -> float:
    """Cost of an optimal matching, summed in row order."""
    if not rows:
        return 0.0
    cols = _solve_square(rows)
    return sum(rows[r][cols[r]] for r in range(len(rows)))


def hungarian(cost) -> Assignment:
    """Minimum-cost bipartite assignment of predictions (rows) to targets.

    Rectangular inputs are padded to square with a uniform sentinel one
    unit above the largest entry magnitude (finite, so arithmetic stays
    total; uniform, so it cannot distort which real pairs win). Among
    cost-equal optima the lexicographically smallest (row, col) list is
    returned, which makes matches reproducible.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {c.shape}")
    num_pred, num_tgt = c.shape
    if num_pred == 0 or num_tgt == 0:
        return Assignment((), 0.0)
    if not np.isfinite(c).all():
        raise ValueError("cost matrix entries must be finite")
    n = max(num_pred, num_tgt)
    sentinel = float(np.abs(c).max()) + 1.0
    square = np.full((n, n), sentinel, dtype=np.float64)
    square[:num_pred, :num_tgt] = c
    rows = square.tolist()

    # Fix rows greedily: for each row take the smallest column whose best
    # completion achieves the minimum total. Candidate totals are sums in
    # row order, so equal assignments compare exactly equal.
    used: set[int] = set()
    prefix = 0.0
    chosen_cols: list[int] = []
    for r in range(n):
        avail = [j for j in range(n) if j not in used]
        best_j = avail[0]
        best_total = None
        for j in avail:
            rest = [j2 for j2 in avail if j2 != j]
            sub = [[rows[r2][j2] for j2 in rest] for r2 in range(r + 1, n)]
            total = prefix + rows[r][j] + _optimal_total(sub)
            if best_total is None or total < best_total:
                best_total = total
                best_j = j
        used.add(best_j)
        chosen_cols.append(best_j)
        prefix += rows[r][best_j]

    pairs = tuple(
        (r, j) for r, j in enumerate(chosen_cols) if r < num_pred and j < num_tgt
    )
    total_cost = float(sum(c[r, j] for r, j in pairs))
    return Assignment(pairs, total_cost)


# ---------------------------------------------------------------------------
# differentiable loss
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    """DETR-convention weights for the matching cost and loss terms."""

    l1: float = 5.0
    giou: float = 2.0
    conf: float = 1.0


def _corner_columns(boxes: Tensor):
    cx = select(boxes, 0, axis=1)
    cy = select(boxes, 1, axis=1)
    w = select(boxes, 2, axis=1)
    h = select(boxes, 3, axis=1)
    return cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5


def giou_pairs(a: Tensor, b: Tensor) -> Tensor:
    """Rowwise GIoU of two (M, 4) center-form box tensors; differentiable."""
    ax1, ay1, ax2, ay2 = _corner_columns(a)
    bx1, by1, bx2, by2 = _corner_columns(b)
    iw = maximum(minimum(ax2, bx2) - maximum(ax1, bx1), 0.0)
    ih = maximum(minimum(ay2, by2) - maximum(ay1, by1), 0.0)
    inter = iw * ih
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    union = area_a + area_b - inter
    enclose = (maximum(ax2, bx2) - minimum(ax1, bx1)) * (maximum(ay2, by2) - minimum(ay1, by1))
    return inter / union - (enclose - union) / enclose


def grounding_cost(boxes: np.ndarray, confidence: np.ndarray, targets: Sequence[BBox],
                   weights: LossWeights = LossWeights()) -> np.ndarray:
    """(Q, T) matching cost: weighted L1 + (1 - GIoU) - confidence bonus."""
    num_q = boxes.shape[0]
    cost = np.empty((num_q, len(targets)), dtype=np.float64)
    for qi in range(num_q):
        pb = BBox(*np.clip(boxes[qi], 0.0, 1.0))
        for ti, tgt in enumerate(targets):
            l1 = float(np.abs(boxes[qi] - tgt.to_array()).sum())
            cost[qi, ti] = (
                weights.l1 * l1
                + weights.giou * (1.0 - giou(pb, tgt))
                - weights.conf * float(confidence[qi])
            )
    return cost


def assignment_loss(pred_boxes: Tensor, confidence: Tensor, targets: Sequence[BBox],
                    assignment: Assignment,
                    weights: LossWeights = LossWeights()) -> Tensor:
    """Loss of one sample under a fixed assignment; differentiable.

    L1 + (1 - GIoU) averaged over the matched pairs, plus a binary
    confidence log-loss (matched queries should say 1, the rest 0) averaged
    over all queries.
    """
    matched_q = np.array([q for q, _ in assignment.pairs], dtype=np.intp)
    matched_t = np.stack([targets[t].to_array() for _, t in assignment.pairs])
    num_matched = len(assignment.pairs)
    num_q = pred_boxes.shape[0]

    picked = take_rows(pred_boxes, matched_q)  # (M, 4)
    target_tensor = Tensor(matched_t)
    l1_term = tsum(absolute(picked - target_tensor)) / num_matched
    giou_term = tsum(1.0 - giou_pairs(picked, target_tensor)) / num_matched

    unmatched_q = np.array([q for q in range(num_q) if q not in set(matched_q.tolist())],
                           dtype=np.intp)
    conf_matched = take_rows(confidence, matched_q)
    conf_unmatched = take_rows(confidence, unmatched_q)
    conf_term = (tsum(-log(conf_matched)) + tsum(-log(1.0 - conf_unmatched))) / num_q

    return weights.l1 * l1_term + weights.giou * giou_term + weights.conf * conf_term


def match_and_loss(pred_boxes: Tensor, confidence: Tensor, targets: Sequence[BBox],
                   weights: LossWeights = LossWeights()) -> tuple[Tensor, Assignment]:
    """Hungarian-match one sample's predictions to its targets, then score.

    ``pred_boxes`` is (Q, 4) and ``confidence`` (Q,), both in [0, 1]. The
    assignment is computed on detached values and held fixed, so the loss
    is differentiable in the predictions.
    """
    if len(targets) == 0:
        raise ValueError("match_and_loss needs at least one target box")
    cost = grounding_cost(pred_boxes.data, confidence.data, targets, weights)
    assignment = hungarian(cost)
    return assignment_loss(pred_boxes, confidence, targets, assignment, weights), assignment


def grounding_loss(boxes: Tensor, confidence: Tensor, targets_per_sample: Sequence[Sequence[BBox]],
                   weights: LossWeights = LossWeights()) -> tuple[Tensor, list[Assignment]]:
    """Batch mean of :func:`match_and_loss` over (B, Q, 4) / (B, Q) tensors."""
    batch = boxes.shape[0]
    if len(targets_per_sample) != batch:
        raise ValueError(f"got {len(targets_per_sample)} target lists for batch of {batch}")
    total: Tensor | None = None
    assignments = []
    for b in range(batch):
        loss_b, assign_b = match_and_loss(
            select(boxes, b, axis=0), select(confidence, b, axis=0),
            targets_per_sample[b], weights,
        )
        assignments.append(assign_b)
        total = loss_b if total is None else total + loss_b
    assert total is not None
    return total / batch, assignments
