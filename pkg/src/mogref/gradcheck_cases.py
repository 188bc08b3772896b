"""Named finite-difference cases covering every differentiable operation.

Each case builds a deterministic scalar loss over a few small Parameters
(entries in [-1, 1] unless the op needs a restricted domain) so that
``backward`` can be compared against the central-difference oracle. The
registry is shared by the gradcheck CLI command, the unit tests, and the
acceptance suite.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from mogref import matching, mog, tensor
from mogref.rng import RngState
from mogref.tensor import Parameter, Tensor

Case = tuple[Callable[[], Tensor], list[Parameter]]


def _param(rng: RngState, name: str, shape, lo: float = -1.0, hi: float = 1.0) -> Parameter:
    return Parameter(name, rng.uniform_array(shape, lo, hi))


def _proj(rng: RngState, shape) -> Tensor:
    """Fixed random projection used to reduce an op output to a scalar."""
    return Tensor(rng.uniform_array(shape, -1.0, 1.0))


def case_matmul(rng: RngState) -> Case:
    a = _param(rng, "a", (2, 3, 4))
    b = _param(rng, "b", (4, 5))
    w = _proj(rng, (2, 3, 5))
    return (lambda: tensor.tsum(tensor.matmul(a, b) * w)), [a, b]


def case_add_mul_broadcast(rng: RngState) -> Case:
    a = _param(rng, "a", (3, 4))
    b = _param(rng, "bias", (4,))
    w = _proj(rng, (3, 4))
    return (lambda: tensor.tsum((a + b) * (a * b) * w)), [a, b]


def case_sub_neg_div(rng: RngState) -> Case:
    a = _param(rng, "a", (2, 5))
    b = _param(rng, "b", (2, 5), 1.0, 2.0)  # denominator away from zero
    w = _proj(rng, (2, 5))
    return (lambda: tensor.tsum((-a - b / a.shape[0] + a / b) * w)), [a, b]


def case_reshape_transpose_concat(rng: RngState) -> Case:
    a = _param(rng, "a", (2, 6))
    b = _param(rng, "b", (3, 4))
    w = _proj(rng, (2, 3, 4))

    def loss():
        left = tensor.reshape(a, (1, 3, 4))
        right = tensor.transpose(tensor.reshape(b, (3, 1, 4)), (1, 0, 2))
        return tensor.tsum(tensor.concat([left, right], axis=0) * w)

    return loss, [a, b]


def case_select_take_rows(rng: RngState) -> Case:
    table = _param(rng, "table", (5, 3))
    idx = np.array([0, 2, 2, 4])
    w = _proj(rng, (4, 3))
    w2 = _proj(rng, (5,))

    def loss():
        gathered = tensor.take_rows(table, idx)
        col = tensor.select(table, 1, axis=1)
        return tensor.tsum(gathered * w) + tensor.tsum(col * w2)

    return loss, [table]


def case_reductions(rng: RngState) -> Case:
    a = _param(rng, "a", (3, 4, 2))
    w = _proj(rng, (3, 2))
    return (lambda: tensor.tsum(tensor.mean(a, axis=1) * w) + tensor.tsum(a) / 7.0), [a]


def case_absolute(rng: RngState) -> Case:
    a = _param(rng, "a", (3, 5))
    w = _proj(rng, (3, 5))
    return (lambda: tensor.tsum(tensor.absolute(a) * w)), [a]


def case_log(rng: RngState) -> Case:
    a = _param(rng, "a", (3, 5), 0.5, 1.5)
    w = _proj(rng, (3, 5))
    return (lambda: tensor.tsum(tensor.log(a) * w)), [a]


def case_sigmoid(rng: RngState) -> Case:
    a = _param(rng, "a", (3, 5))
    w = _proj(rng, (3, 5))
    return (lambda: tensor.tsum(tensor.sigmoid(a) * w)), [a]


def case_gelu(rng: RngState) -> Case:
    a = _param(rng, "a", (3, 5))
    w = _proj(rng, (3, 5))
    return (lambda: tensor.tsum(tensor.gelu(a) * w)), [a]


def case_maximum_minimum(rng: RngState) -> Case:
    a = _param(rng, "a", (4, 4))
    b = _param(rng, "b", (4, 4))
    w = _proj(rng, (4, 4))
    return (lambda: tensor.tsum((tensor.maximum(a, b) + tensor.minimum(a, 0.25)) * w)), [a, b]


def case_softmax(rng: RngState) -> Case:
    a = _param(rng, "a", (3, 6))
    w = _proj(rng, (3, 6))
    return (lambda: tensor.tsum(tensor.softmax(a) * w)), [a]


def case_masked_softmax(rng: RngState) -> Case:
    a = _param(rng, "a", (2, 3, 6))
    bits = mog.build_mask(6, 2).bits[:3]
    w = _proj(rng, (2, 3, 6))
    return (lambda: tensor.tsum(tensor.masked_softmax(a, bits) * w)), [a]


def case_layernorm(rng: RngState) -> Case:
    a = _param(rng, "a", (3, 7))
    w = _proj(rng, (3, 7))
    return (lambda: tensor.tsum(tensor.layernorm(a) * w)), [a]


def _toy_attention(rng: RngState) -> tuple[Parameter, mog.MoGAttention]:
    cfg = mog.MoGConfig(model_dim=4, num_heads=2, dilations=(1, 2, 3))
    attn = mog.MoGAttention(cfg, rng, "attn")
    # non-trivial gate so its gradient path is exercised
    attn.gate.w.data = rng.uniform_array(attn.gate.w.shape, -0.5, 0.5)
    attn.gate.b.data = rng.uniform_array(attn.gate.b.shape, -0.5, 0.5)
    x = _param(rng, "x", (2, 6, 4))
    return x, attn


def case_gate_weights(rng: RngState) -> Case:
    x, attn = _toy_attention(rng)
    w = _proj(rng, (2, 3))
    return (lambda: tensor.tsum(mog.gate_weights(x, attn.gate) * w)), [x, attn.gate.w, attn.gate.b]


def case_branch_attention(rng: RngState) -> Case:
    x, attn = _toy_attention(rng)
    bits = mog.build_mask(6, 2).bits
    w = _proj(rng, (2, 6, 4))

    def loss():
        _, _, v, logits = mog.attention_logits(x, attn)
        return tensor.tsum(mog.branch_attention(logits, bits, v) * w)

    return loss, [x, attn.w_q, attn.w_k, attn.w_v]


def case_mog_forward(rng: RngState) -> Case:
    x, attn = _toy_attention(rng)
    w = _proj(rng, (2, 6, 4))
    return (lambda: tensor.tsum(mog.mog_forward(x, attn) * w)), [x, *attn.parameters()]


def case_giou_pairs(rng: RngState) -> Case:
    a = _param(rng, "boxes_a", (4, 4), 0.3, 0.6)
    b = Tensor(rng.uniform_array((4, 4), 0.35, 0.65))
    w = _proj(rng, (4,))
    return (lambda: tensor.tsum(matching.giou_pairs(a, b) * w)), [a]


def case_match_and_loss(rng: RngState) -> Case:
    boxes = _param(rng, "boxes", (3, 4), 0.25, 0.75)
    conf = _param(rng, "conf", (3,), 0.2, 0.8)
    targets = [
        matching.BBox(rng.uniform_in(0.3, 0.7), rng.uniform_in(0.3, 0.7),
                      rng.uniform_in(0.2, 0.4), rng.uniform_in(0.2, 0.4))
        for _ in range(2)
    ]
    return (lambda: matching.match_and_loss(boxes, conf, targets)[0]), [boxes, conf]


def case_scs_end_to_end(rng: RngState) -> Case:
    """Whole pipeline: forward + set loss, assignments frozen at the base point."""
    from mogref import data, model

    cfg = model.ModelConfig(
        model_dim=8, num_heads=2, dilations=(1, 2), sce_blocks=1, scd_blocks=1,
        ssd_blocks=1, num_queries=2, ffn_dim=12, image_size=16, patch_size=4,
        vocab_size=len(data.default_vocab()),
    )
    vocab = data.default_vocab()
    net = model.SCSModel(cfg, vocab, rng.derive(1))

    spec = data.SyntheticSceneSpec(image_size=16, num_distractors=1)
    scenes = [data.generate_scene_full(spec, rng.derive(10 + i), f"gc-{i}") for i in range(2)]
    images = np.stack([s.image for s in scenes])
    ids = [data.tokenize(s.expression, vocab) for s in scenes]
    width = max(len(t) for t in ids)
    token_ids = np.array([t + [vocab.pad_id] * (width - len(t)) for t in ids])
    targets = [
        [matching.BBox.from_pixel(*b, s.record.image_w, s.record.image_h)
         for b in s.record.target_boxes]
        for s in scenes
    ]

    base = net.forward(images, token_ids)
    frozen = []
    for b in range(len(scenes)):
        cost = matching.grounding_cost(base.boxes.data[b], base.confidence.data[b], targets[b])
        frozen.append(matching.hungarian(cost))

    def loss():
        pred = net.forward(images, token_ids)
        total = None
        for b in range(len(scenes)):
            term = matching.assignment_loss(
                tensor.select(pred.boxes, b, axis=0),
                tensor.select(pred.confidence, b, axis=0),
                targets[b], frozen[b],
            )
            total = term if total is None else total + term
        return total / len(scenes)

    return loss, net.parameters()


_CASES = [
    ("matmul", case_matmul),
    ("add_mul_broadcast", case_add_mul_broadcast),
    ("sub_neg_div", case_sub_neg_div),
    ("reshape_transpose_concat", case_reshape_transpose_concat),
    ("select_take_rows", case_select_take_rows),
    ("reductions", case_reductions),
    ("absolute", case_absolute),
    ("log", case_log),
    ("sigmoid", case_sigmoid),
    ("gelu", case_gelu),
    ("maximum_minimum", case_maximum_minimum),
    ("softmax", case_softmax),
    ("masked_softmax", case_masked_softmax),
    ("layernorm", case_layernorm),
    ("gate_weights", case_gate_weights),
    ("branch_attention", case_branch_attention),
    ("mog_forward", case_mog_forward),
    ("giou_pairs", case_giou_pairs),
    ("match_and_loss", case_match_and_loss),
    ("scs_end_to_end", case_scs_end_to_end),
]


def all_cases(seed: int = 0):
    """Yield (name, builder) pairs; each builder uses its own derived stream."""
    root = RngState(seed)
    for i, (name, fn) in enumerate(_CASES):
        yield name, (lambda fn=fn, i=i: fn(root.derive(1000 + i)))
