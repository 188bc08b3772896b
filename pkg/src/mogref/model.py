"""Toy referring-grounding network.

Pipeline: token projector -> scale-comprehensive encoder (SCE, transformer
blocks whose attention is the mixture-of-granularity module) -> two-stage
query decoding: a coarse decoder (SCD) whose cross-attention into the
encoder memory is granularity-masked, then a refining decoder (SSD) of
plain MHSA/MHCA/FFN blocks that reads a learned softmax-weighted fusion of
every encoder block's output -> a small regression head mapping each query
to a sigmoid box and confidence.

The projector is deliberately tiny: a linear patch embedding over synthetic
rasters plus an embedding table over a closed vocabulary, with sinusoidal
positions and per-modality type vectors. All blocks are pre-norm residual,
so zeroing the output projections turns every stage into the identity.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from mogref.data import ValidationError, Vocab
from mogref.mog import (
    MoGAttention,
    MoGConfig,
    merge_heads,
    mog_forward,
    split_heads,
)
from mogref.rng import RngState
from mogref.tensor import (
    Parameter,
    Tensor,
    concat,
    gelu,
    layernorm,
    matmul,
    reshape,
    select,
    sigmoid,
    softmax,
    take_rows,
    transpose,
)

CHECKPOINT_FORMAT = "mogref.checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    model_dim: int = 64
    num_heads: int = 4
    dilations: tuple[int, ...] = (1, 2, 3, 4)
    sce_blocks: int = 2
    scd_blocks: int = 1
    ssd_blocks: int = 1
    num_queries: int = 4
    ffn_dim: int = 128
    image_size: int = 64
    patch_size: int = 8
    vocab_size: int = 24

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if min(self.sce_blocks, self.scd_blocks, self.ssd_blocks) < 1:
            raise ValueError("all block counts must be >= 1")
        if self.num_queries < 1:
            raise ValueError("num_queries must be >= 1")
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.vocab_size < 2:
            raise ValueError("vocab_size must cover at least pad and unk")
        MoGConfig(self.model_dim, self.num_heads, self.dilations)  # validates the rest

    @property
    def mog(self) -> MoGConfig:
        return MoGConfig(self.model_dim, self.num_heads, self.dilations)

    @property
    def num_visual_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_json(self) -> dict:
        out = asdict(self)
        out["dilations"] = list(self.dilations)
        return out

    @staticmethod
    def from_json(obj: dict) -> "ModelConfig":
        obj = dict(obj)
        obj["dilations"] = tuple(obj["dilations"])
        return ModelConfig(**obj)


@dataclass
class TokenSequence:
    """Concatenated multimodal tokens, always visual first then linguistic."""

    tokens: Tensor  # (B, N_v + N_l, D)
    num_visual: int
    num_text: int


@dataclass
class Prediction:
    boxes: Tensor  # (B, Q, 4) center-form, sigmoid outputs
    confidence: Tensor  # (B, Q), sigmoid outputs

    def best_box(self, sample: int):
        """Highest-confidence box of one sample as a plain array."""
        q = int(np.argmax(self.confidence.data[sample]))
        return self.boxes.data[sample, q], float(self.confidence.data[sample, q])


_POSITION_CACHE: dict[tuple[int, int], np.ndarray] = {}


def sinusoidal_positions(n: int, dim: int) -> np.ndarray:
    """Standard interleaved sin/cos position table, deterministic in (n, dim)."""
    key = (n, dim)
    table = _POSITION_CACHE.get(key)
    if table is None:
        pos = np.arange(n, dtype=np.float64)[:, None]
        idx = np.arange(0, dim, 2, dtype=np.float64)[None, :]
        angle = pos / np.power(10000.0, idx / dim)
        table = np.zeros((n, dim), dtype=np.float64)
        table[:, 0::2] = np.sin(angle)
        table[:, 1::2] = np.cos(angle)
        table.setflags(write=False)
        _POSITION_CACHE[key] = table
    return table


class Linear:
    def __init__(self, name: str, n_in: int, n_out: int, rng: RngState, bias: bool = True):
        scale = 1.0 / np.sqrt(n_in)
        self.w = Parameter(f"{name}.w", rng.uniform_array((n_in, n_out), -scale, scale))
        self.b = Parameter(f"{name}.b", np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.w)
        return y + self.b if self.b is not None else y

    def parameters(self) -> list[Parameter]:
        return [self.w] if self.b is None else [self.w, self.b]


class MultiHeadAttention:
    """Plain scaled dot-product attention, the non-gated baseline."""

    def __init__(self, model_dim: int, num_heads: int, rng: RngState, name: str):
        scale = 1.0 / np.sqrt(model_dim)
        self.num_heads = num_heads
        self.head_dim = model_dim // num_heads
        self.w_q = Parameter(f"{name}.w_q", rng.uniform_array((model_dim, model_dim), -scale, scale))
        self.w_k = Parameter(f"{name}.w_k", rng.uniform_array((model_dim, model_dim), -scale, scale))
        self.w_v = Parameter(f"{name}.w_v", rng.uniform_array((model_dim, model_dim), -scale, scale))

    def __call__(self, x: Tensor, memory: Tensor | None = None) -> Tensor:
        kv = x if memory is None else memory
        q = split_heads(matmul(x, self.w_q), self.num_heads)
        k = split_heads(matmul(kv, self.w_k), self.num_heads)
        v = split_heads(matmul(kv, self.w_v), self.num_heads)
        logits = matmul(q * (1.0 / np.sqrt(self.head_dim)), transpose(k, (0, 1, 3, 2)))
        return merge_heads(matmul(softmax(logits), v))

    def parameters(self) -> list[Parameter]:
        return [self.w_q, self.w_k, self.w_v]


class TokenProjector:
    """Patch-embed rasters, look up word embeddings, add positions and types."""

    def __init__(self, config: ModelConfig, rng: RngState, name: str = "projector"):
        d = config.model_dim
        patch_dim = config.patch_size * config.patch_size * 3
        self.config = config
        self.patch = Linear(f"{name}.patch", patch_dim, d, rng)
        scale = 1.0 / np.sqrt(d)
        self.word_embed = Parameter(
            f"{name}.word_embed", rng.uniform_array((config.vocab_size, d), -scale, scale)
        )
        self.type_embed = Parameter(f"{name}.type_embed", rng.uniform_array((2, d), -0.02, 0.02))

    def parameters(self) -> list[Parameter]:
        return [*self.patch.parameters(), self.word_embed, self.type_embed]

    def _patchify(self, images: np.ndarray) -> np.ndarray:
        b, h, w, c = images.shape
        p = self.config.patch_size
        if h != self.config.image_size or w != self.config.image_size or c != 3:
            raise ValidationError(
                f"expected images of shape (B, {self.config.image_size}, "
                f"{self.config.image_size}, 3), got {images.shape}"
            )
        gh, gw = h // p, w // p
        tiles = images.reshape(b, gh, p, gw, p, c).transpose(0, 1, 3, 2, 4, 5)
        return tiles.reshape(b, gh * gw, p * p * c)

    def __call__(self, images: np.ndarray, token_ids: np.ndarray) -> TokenSequence:
        images = np.asarray(images, dtype=np.float64)
        token_ids = np.asarray(token_ids, dtype=np.intp)
        if token_ids.ndim != 2 or token_ids.shape[0] != images.shape[0]:
            raise ValidationError(
                f"token_ids must be (B, L) matching images batch, got {token_ids.shape}"
            )
        if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= self.config.vocab_size):
            raise ValidationError(
                f"token id out of vocabulary (size {self.config.vocab_size})"
            )
        visual = self.patch(Tensor(self._patchify(images)))
        visual = visual + reshape(select(self.type_embed, 0, axis=0), (1, 1, self.config.model_dim))
        num_visual = visual.shape[1]
        num_text = token_ids.shape[1]
        if num_text:
            text = take_rows(self.word_embed, token_ids)
            text = text + reshape(select(self.type_embed, 1, axis=0), (1, 1, self.config.model_dim))
            tokens = concat([visual, text], axis=1)
        else:
            tokens = visual
        n = num_visual + num_text
        tokens = tokens + Tensor(sinusoidal_positions(n, self.config.model_dim))
        return TokenSequence(tokens, num_visual, num_text)


class EncoderBlock:
    def __init__(self, config: ModelConfig, rng: RngState, name: str):
        d = config.model_dim
        self.attn = MoGAttention(config.mog, rng, f"{name}.attn")
        self.attn_out = Linear(f"{name}.attn_out", d, d, rng)
        self.ffn_in = Linear(f"{name}.ffn_in", d, config.ffn_dim, rng)
        self.ffn_out = Linear(f"{name}.ffn_out", config.ffn_dim, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn_out(mog_forward(layernorm(x), self.attn))
        x = x + self.ffn_out(gelu(self.ffn_in(layernorm(x))))
        return x

    def parameters(self) -> list[Parameter]:
        return [
            *self.attn.parameters(),
            *self.attn_out.parameters(),
            *self.ffn_in.parameters(),
            *self.ffn_out.parameters(),
        ]


class CoarseDecoderBlock:
    """Query self-attention, granularity-masked cross-attention, FFN."""

    def __init__(self, config: ModelConfig, rng: RngState, name: str):
        d = config.model_dim
        self.self_attn = MultiHeadAttention(d, config.num_heads, rng, f"{name}.self_attn")
        self.self_out = Linear(f"{name}.self_out", d, d, rng)
        self.cross_attn = MoGAttention(config.mog, rng, f"{name}.cross_attn")
        self.cross_out = Linear(f"{name}.cross_out", d, d, rng)
        self.ffn_in = Linear(f"{name}.ffn_in", d, config.ffn_dim, rng)
        self.ffn_out = Linear(f"{name}.ffn_out", config.ffn_dim, d, rng)

    def __call__(self, queries: Tensor, memory: Tensor) -> Tensor:
        queries = queries + self.self_out(self.self_attn(layernorm(queries)))
        queries = queries + self.cross_out(
            mog_forward(layernorm(queries), self.cross_attn, memory=memory)
        )
        queries = queries + self.ffn_out(gelu(self.ffn_in(layernorm(queries))))
        return queries

    def parameters(self) -> list[Parameter]:
        return [
            *self.self_attn.parameters(),
            *self.self_out.parameters(),
            *self.cross_attn.parameters(),
            *self.cross_out.parameters(),
            *self.ffn_in.parameters(),
            *self.ffn_out.parameters(),
        ]


class RefineDecoderBlock:
    """Plain MHSA + MHCA + FFN refinement stage."""

    def __init__(self, config: ModelConfig, rng: RngState, name: str):
        d = config.model_dim
        self.self_attn = MultiHeadAttention(d, config.num_heads, rng, f"{name}.self_attn")
        self.self_out = Linear(f"{name}.self_out", d, d, rng)
        self.cross_attn = MultiHeadAttention(d, config.num_heads, rng, f"{name}.cross_attn")
        self.cross_out = Linear(f"{name}.cross_out", d, d, rng)
        self.ffn_in = Linear(f"{name}.ffn_in", d, config.ffn_dim, rng)
        self.ffn_out = Linear(f"{name}.ffn_out", config.ffn_dim, d, rng)

    def __call__(self, queries: Tensor, memory: Tensor) -> Tensor:
        queries = queries + self.self_out(self.self_attn(layernorm(queries)))
        queries = queries + self.cross_out(self.cross_attn(layernorm(queries), memory=memory))
        queries = queries + self.ffn_out(gelu(self.ffn_in(layernorm(queries))))
        return queries

    def parameters(self) -> list[Parameter]:
        return [
            *self.self_attn.parameters(),
            *self.self_out.parameters(),
            *self.cross_attn.parameters(),
            *self.cross_out.parameters(),
            *self.ffn_in.parameters(),
            *self.ffn_out.parameters(),
        ]


class FuseHierarchy:
    """Learned softmax weights over encoder block outputs, then layernorm."""

    def __init__(self, num_blocks: int, name: str = "fuse"):
        self.logits = Parameter(f"{name}.block_logits", np.zeros(num_blocks))

    def __call__(self, per_block: Sequence[Tensor]) -> Tensor:
        if not per_block:
            raise ValueError("fuse_hierarchy needs at least one block output")
        if len(per_block) != self.logits.size:
            raise ValueError(
                f"got {len(per_block)} block outputs for {self.logits.size} fusion weights"
            )
        weights = softmax(self.logits)
        out: Tensor | None = None
        for k, block_out in enumerate(per_block):
            term = select(weights, k, axis=0) * block_out
            out = term if out is None else out + term
        assert out is not None
        return layernorm(out)

    def parameters(self) -> list[Parameter]:
        return [self.logits]


class RegressionHead:
    """Per-query MLP to 4 sigmoid box coordinates plus a sigmoid confidence."""

    def __init__(self, model_dim: int, rng: RngState, name: str = "head"):
        self.box_hidden = Linear(f"{name}.box_hidden", model_dim, model_dim, rng)
        self.box_out = Linear(f"{name}.box_out", model_dim, 4, rng)
        self.conf_out = Linear(f"{name}.conf_out", model_dim, 1, rng)

    def __call__(self, states: Tensor) -> Prediction:
        boxes = sigmoid(self.box_out(gelu(self.box_hidden(states))))
        conf = sigmoid(self.conf_out(states))
        b, q, _ = conf.shape
        return Prediction(boxes, reshape(conf, (b, q)))

    def parameters(self) -> list[Parameter]:
        return [
            *self.box_hidden.parameters(),
            *self.box_out.parameters(),
            *self.conf_out.parameters(),
        ]


class SCSModel:
    """End-to-end grounding model over raster + token-id batches."""

    def __init__(self, config: ModelConfig, vocab: Vocab, rng: RngState):
        if len(vocab) != config.vocab_size:
            raise ValueError(
                f"config.vocab_size {config.vocab_size} != len(vocab) {len(vocab)}"
            )
        self.config = config
        self.vocab = vocab
        self.projector = TokenProjector(config, rng)
        self.sce = [EncoderBlock(config, rng, f"sce.{i}") for i in range(config.sce_blocks)]
        self.fuse = FuseHierarchy(config.sce_blocks)
        scale = 1.0 / np.sqrt(config.model_dim)
        self.queries = Parameter(
            "queries", rng.uniform_array((config.num_queries, config.model_dim), -scale, scale)
        )
        self.scd = [CoarseDecoderBlock(config, rng, f"scd.{i}") for i in range(config.scd_blocks)]
        self.ssd = [RefineDecoderBlock(config, rng, f"ssd.{i}") for i in range(config.ssd_blocks)]
        self.head = RegressionHead(config.model_dim, rng)

    # -- stages ------------------------------------------------------------

    def project_tokens(self, images: np.ndarray, token_ids: np.ndarray) -> TokenSequence:
        return self.projector(images, token_ids)

    def sce_forward(self, tokens: TokenSequence) -> tuple[Tensor, list[Tensor]]:
        x = tokens.tokens
        per_block = []
        for block in self.sce:
            x = block(x)
            per_block.append(x)
        return x, per_block

    def fuse_hierarchy(self, per_block: Sequence[Tensor]) -> Tensor:
        return self.fuse(per_block)

    def scd_forward(self, memory: Tensor) -> Tensor:
        q = reshape(self.queries, (1, self.config.num_queries, self.config.model_dim))
        for block in self.scd:
            q = block(q, memory)
        return q

    def ssd_forward(self, coarse_queries: Tensor, fused_memory: Tensor) -> Tensor:
        q = coarse_queries
        for block in self.ssd:
            q = block(q, fused_memory)
        return q

    def forward(self, images: np.ndarray, token_ids: np.ndarray) -> Prediction:
        tokens = self.project_tokens(images, token_ids)
        memory, per_block = self.sce_forward(tokens)
        fused = self.fuse_hierarchy(per_block)
        coarse = self.scd_forward(memory)
        refined = self.ssd_forward(coarse, fused)
        return self.head(refined)

    __call__ = forward

    # -- parameters and checkpoints -----------------------------------------

    def parameters(self) -> list[Parameter]:
        params = [*self.projector.parameters()]
        for block in self.sce:
            params.extend(block.parameters())
        params.extend(self.fuse.parameters())
        params.append(self.queries)
        for block in self.scd:
            params.extend(block.parameters())
        for block in self.ssd:
            params.extend(block.parameters())
        params.extend(self.head.parameters())
        names = [p.name for p in params]
        assert len(set(names)) == len(names), "parameter names must be unique"
        return params

    def save(self, path) -> None:
        doc = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_json(),
            "vocab": self.vocab.content_words(),
            "params": {
                p.name: {"shape": list(p.shape), "data": p.data.reshape(-1).tolist()}
                for p in self.parameters()
            },
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)
            fh.write("\n")

    @staticmethod
    def load(path, expect_config: ModelConfig | None = None) -> "SCSModel":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: not valid JSON: {exc}") from exc
        if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
            raise ValidationError(
                f"{path}: expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, "
                f"got {doc.get('format')!r} v{doc.get('version')!r}"
            )
        config = ModelConfig.from_json(doc["config"])
        if expect_config is not None and expect_config != config:
            raise ValidationError(
                f"{path}: checkpoint config {config} does not match requested {expect_config}"
            )
        model = SCSModel(config, Vocab(doc["vocab"]), RngState(0))
        stored = doc["params"]
        params = {p.name: p for p in model.parameters()}
        if set(stored) != set(params):
            missing = set(params) - set(stored)
            extra = set(stored) - set(params)
            raise ValidationError(
                f"{path}: parameter set mismatch (missing {sorted(missing)}, extra {sorted(extra)})"
            )
        for name, p in params.items():
            shape = tuple(stored[name]["shape"])
            if shape != p.shape:
                raise ValidationError(
                    f"{path}: parameter {name} has shape {shape}, expected {p.shape}"
                )
            p.data = np.array(stored[name]["data"], dtype=np.float64).reshape(shape)
            p.grad = np.zeros_like(p.data)
        return model
