"""Per-frame detector: tiny strided CNN backbone, deformable-attention
encoder over the feature grid, query decoder, and shared prediction heads.

A frame is a [3, H0, W0] float array with values in [0, 1]. The backbone
reduces it by a fixed stride of 8 into a [C, H, W] feature map; the encoder
refines that map into the frame's memory encoding; the decoder turns N
learned object queries into N detection slots, each with a normalized
reference point derived from its embedding once and kept fixed across
layers. Prediction heads are shared by every query, frame, and decoder
stage, including the temporal decoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import attention as att
from .autodiff import Node, Parameter, ShapeError
from .boxes import BoxCS

BACKBONE_STRIDE = 8


@dataclass
class MemoryEncoding:
    """Encoder output for one frame: feature grid plus its position code."""

    features: Node  # [C, H, W]
    positional: np.ndarray  # [C, H, W], constant
    frame_index: int


@dataclass
class QueryBatch:
    """A set of object queries: contents [N, C], reference points [N, 2]
    in normalized coordinates, and the frame index each query came from."""

    content: Node
    refs: Node
    origins: np.ndarray

    def __len__(self) -> int:
        return self.content.value.shape[0]


@dataclass
class Detection:
    """One decoded slot: raw class logits, a center-size box, and the id of
    the query that produced it. Score is the max class sigmoid."""

    class_logits: np.ndarray
    box: BoxCS
    query_id: int

    @property
    def score(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.class_logits.max())))

    @property
    def class_id(self) -> int:
        return int(self.class_logits.argmax())


def detections_from_arrays(logits: np.ndarray, boxes: np.ndarray) -> list[Detection]:
    return [
        Detection(class_logits=logits[i].copy(), box=BoxCS(*boxes[i]), query_id=i)
        for i in range(logits.shape[0])
    ]


# ---------------------------------------------------------------------------
# convolution plumbing

_COL_INDEX_CACHE: dict[tuple, np.ndarray] = {}


def _im2col_indices(cin, hp, wp, kh, kw, stride):
    key = (cin, hp, wp, kh, kw, stride)
    cached = _COL_INDEX_CACHE.get(key)
    if cached is not None:
        return cached
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    oy, ox = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    base = (oy * stride * wp + ox * stride).reshape(-1)
    ci, ky, kx = np.meshgrid(np.arange(cin), np.arange(kh), np.arange(kw), indexing="ij")
    patch = ((ci * hp + ky) * wp + kx).reshape(-1)
    idx = base[:, None] + patch[None, :]
    _COL_INDEX_CACHE[key] = idx
    return idx


def conv2d(x: Node, weight: Node, bias: Node, stride: int, pad: int) -> Node:
    """2-d convolution of [Cin, H, W] with weight [Cin*kh*kw, Cout].

    The kernel size is recovered from the weight shape (square kernels).
    """
    cin, h, w = x.value.shape
    k = int(round(np.sqrt(weight.value.shape[0] / cin)))
    if cin * k * k != weight.value.shape[0]:
        raise ShapeError(
            f"conv2d: weight rows {weight.value.shape[0]} not Cin*k*k for Cin={cin}"
        )
    padded = ad.pad2d(x, pad) if pad > 0 else x
    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < k or wp < k:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {k}")
    idx = _im2col_indices(cin, hp, wp, k, k, stride)
    cols = ad.gather_flat(padded, idx)
    out = ad.add_bias(ad.matmul(cols, weight), bias)
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    return att.tokens_to_map(out, ho, wo)


def group_norm(x: Node, gain: Node, bias: Node, groups: int) -> Node:
    """Normalize a [C, H, W] map within channel groups, then apply a
    per-channel affine."""
    c, h, w = x.value.shape
    if c % groups != 0:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    rows = ad.reshape(x, (groups, (c // groups) * h * w))
    normed = ad.reshape(ad.row_normalize(rows), (c, h * w))
    affine = ad.shift_rows(ad.scale_rows(normed, gain), bias)
    return ad.reshape(affine, (c, h, w))


class Backbone:
    """Three stride-2 conv stages (total stride 8) with group norm + relu."""

    def __init__(self, name: str, dim: int, rng: np.random.Generator):
        widths = [3, max(8, dim // 4), max(8, dim // 2), dim]
        self.stages = []
        for i, (cin, cout) in enumerate(zip(widths[:-1], widths[1:])):
            fan_in = cin * 9
            self.stages.append(
                {
                    "w": Parameter(f"{name}.conv{i}.w", att.xavier_uniform(rng, fan_in, cout)),
                    "b": Parameter(f"{name}.conv{i}.b", np.zeros(cout)),
                    "gn_g": Parameter(f"{name}.conv{i}.gn_g", np.ones(cout)),
                    "gn_b": Parameter(f"{name}.conv{i}.gn_b", np.zeros(cout)),
                }
            )

    def parameters(self) -> list[Parameter]:
        out = []
        for s in self.stages:
            out.extend([s["w"], s["b"], s["gn_g"], s["gn_b"]])
        return out

    def __call__(self, pixels: np.ndarray) -> Node:
        if pixels.ndim != 3 or pixels.shape[0] != 3:
            raise ShapeError(f"backbone: expected [3, H, W] frame, got {pixels.shape}")
        if pixels.shape[1] < BACKBONE_STRIDE or pixels.shape[2] < BACKBONE_STRIDE:
            raise ShapeError(
                f"backbone: frame {pixels.shape} smaller than stride {BACKBONE_STRIDE}"
            )
        x = ad.constant(pixels)
        for s in self.stages:
            x = conv2d(x, s["w"].node, s["b"].node, stride=2, pad=1)
            x = group_norm(x, s["gn_g"].node, s["gn_b"].node, groups=4)
            x = ad.relu(x)
        return x


# ---------------------------------------------------------------------------
# encoder / decoder layers


class EncoderLayer:
    def __init__(self, name: str, dim: int, heads: int, points: int, hidden: int, rng):
        self.attn = att.DeformableParams(f"{name}.attn", dim, heads, points, rng)
        self.ln = att.LayerNormParams(f"{name}.ln", dim)
        self.ffn = att.FFNParams(f"{name}.ffn", dim, hidden, rng)

    def parameters(self):
        return [*self.attn.parameters(), *self.ln.parameters(), *self.ffn.parameters()]


class DecoderLayer:
    def __init__(self, name: str, dim: int, heads: int, points: int, hidden: int, rng):
        self.self_attn = att.AttentionParams(f"{name}.self_attn", dim, heads, rng)
        self.ln1 = att.LayerNormParams(f"{name}.ln1", dim)
        self.cross = att.DeformableParams(f"{name}.cross", dim, heads, points, rng)
        self.ln2 = att.LayerNormParams(f"{name}.ln2", dim)
        self.ffn = att.FFNParams(f"{name}.ffn", dim, hidden, rng)

    def parameters(self):
        return [
            *self.self_attn.parameters(),
            *self.ln1.parameters(),
            *self.cross.parameters(),
            *self.ln2.parameters(),
            *self.ffn.parameters(),
        ]


class PredictionHeads:
    """Shared classification and box heads.

    Classification is a linear map to per-class logits read through sigmoid
    (no background class); its bias starts at the focal-style low prior.
    The box head is a 3-layer MLP whose sigmoid output is the absolute
    normalized (cx, cy, w, h).
    """

    def __init__(self, name: str, dim: int, num_classes: int, rng, prior: float = 0.01):
        self.num_classes = num_classes
        self.cls_w = Parameter(f"{name}.cls_w", att.xavier_uniform(rng, dim, num_classes))
        self.cls_b = Parameter(
            f"{name}.cls_b", np.full(num_classes, -np.log((1.0 - prior) / prior))
        )
        self.box_w1 = Parameter(f"{name}.box_w1", att.xavier_uniform(rng, dim, dim))
        self.box_b1 = Parameter(f"{name}.box_b1", np.zeros(dim))
        self.box_w2 = Parameter(f"{name}.box_w2", att.xavier_uniform(rng, dim, dim))
        self.box_b2 = Parameter(f"{name}.box_b2", np.zeros(dim))
        self.box_w3 = Parameter(f"{name}.box_w3", att.xavier_uniform(rng, dim, 4))
        self.box_b3 = Parameter(f"{name}.box_b3", np.zeros(4))

    def parameters(self):
        return [
            self.cls_w,
            self.cls_b,
            self.box_w1,
            self.box_b1,
            self.box_w2,
            self.box_b2,
            self.box_w3,
            self.box_b3,
        ]

    def __call__(self, contents: Node) -> tuple[Node, Node]:
        logits = ad.add_bias(ad.matmul(contents, self.cls_w.node), self.cls_b.node)
        h = ad.relu(ad.add_bias(ad.matmul(contents, self.box_w1.node), self.box_b1.node))
        h = ad.relu(ad.add_bias(ad.matmul(h, self.box_w2.node), self.box_b2.node))
        boxes = ad.sigmoid(ad.add_bias(ad.matmul(h, self.box_w3.node), self.box_b3.node))
        return logits, boxes


# ---------------------------------------------------------------------------
# full per-frame detector


@dataclass
class SpatialOutput:
    memory: MemoryEncoding
    queries: list[QueryBatch]  # one entry per decoder layer
    detections: list[tuple[Node, Node]]  # (logits [N,K], boxes [N,4]) per layer


class SpatialDetector:
    def __init__(
        self,
        dim: int,
        heads: int,
        points: int,
        num_queries: int,
        enc_layers: int,
        dec_layers: int,
        num_classes: int,
        rng: np.random.Generator,
        name: str = "spatial",
    ):
        if dim % 4 != 0:
            raise ShapeError(f"spatial detector: dim {dim} must be divisible by 4")
        self.dim = dim
        self.num_queries = num_queries
        self.num_classes = num_classes
        hidden = 4 * dim
        self.backbone = Backbone(f"{name}.backbone", dim, rng)
        self.encoder = [
            EncoderLayer(f"{name}.encoder.{i}", dim, heads, points, hidden, rng)
            for i in range(enc_layers)
        ]
        self.query_embed = Parameter(f"{name}.query_embed", rng.normal(size=(num_queries, dim)))
        self.ref_w = Parameter(f"{name}.ref_w", att.xavier_uniform(rng, dim, 2))
        self.ref_b = Parameter(f"{name}.ref_b", np.zeros(2))
        self.decoder = [
            DecoderLayer(f"{name}.decoder.{i}", dim, heads, points, hidden, rng)
            for i in range(dec_layers)
        ]
        self.heads = PredictionHeads(f"{name}.heads", dim, num_classes, rng)
        self._pos_cache: dict[tuple[int, int], np.ndarray] = {}

    def parameters(self) -> list[Parameter]:
        out = self.backbone.parameters()
        for layer in self.encoder:
            out.extend(layer.parameters())
        out.extend([self.query_embed, self.ref_w, self.ref_b])
        for layer in self.decoder:
            out.extend(layer.parameters())
        out.extend(self.heads.parameters())
        return out

    def positional(self, height: int, width: int) -> np.ndarray:
        key = (height, width)
        if key not in self._pos_cache:
            self._pos_cache[key] = att.sine_positional_embedding(height, width, self.dim)
        return self._pos_cache[key]

    def encode(self, pixels: np.ndarray, frame_index: int) -> MemoryEncoding:
        feats = self.backbone(pixels)
        _, h, w = feats.value.shape
        pos = self.positional(h, w)
        pos_tokens = ad.constant(pos.reshape(self.dim, h * w).T)
        grid_refs = ad.constant(att.positions_grid(h, w))
        tokens = att.map_to_tokens(feats)
        for layer in self.encoder:
            fmap = att.tokens_to_map(tokens, h, w)
            z = ad.add(tokens, pos_tokens)
            out = att.deformable_attention(z, grid_refs, fmap, layer.attn)
            tokens = att.residual_layer_norm(tokens, out, layer.ln)
            tokens = att.transformer_ffn(tokens, layer.ffn)
        return MemoryEncoding(
            features=att.tokens_to_map(tokens, h, w), positional=pos, frame_index=frame_index
        )

    def query_references(self) -> Node:
        """Reference points from the learned embeddings, fixed across layers."""
        return ad.sigmoid(
            ad.add_bias(ad.matmul(self.query_embed.node, self.ref_w.node), self.ref_b.node)
        )

    def decode(self, memory: MemoryEncoding) -> list[QueryBatch]:
        content = self.query_embed.node
        refs = self.query_references()
        origins = np.full(self.num_queries, memory.frame_index, dtype=np.intp)
        out = []
        for layer in self.decoder:
            sa = att.multi_head_attention(content, content, layer.self_attn)
            content = att.residual_layer_norm(content, sa, layer.ln1)
            ca = att.deformable_attention(content, refs, memory.features, layer.cross)
            content = att.residual_layer_norm(content, ca, layer.ln2)
            content = att.transformer_ffn(content, layer.ffn)
            out.append(QueryBatch(content=content, refs=refs, origins=origins.copy()))
        return out

    def forward_frame(self, pixels: np.ndarray, frame_index: int = 0) -> SpatialOutput:
        memory = self.encode(pixels, frame_index)
        queries = self.decode(memory)
        detections = [self.heads(q.content) for q in queries]
        return SpatialOutput(memory=memory, queries=queries, detections=detections)
