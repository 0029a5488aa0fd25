"""Temporal aggregation on top of the per-frame detector: fuse frame
memories with multi-frame deformable attention, refine the current frame's
object queries against confidence-selected reference queries, and decode
the refined queries into current-frame detections.

Frame order inside a clip is positional: reference frames first, the
current frame last. Learned frame-index embeddings (optional) are the only
source of frame-order sensitivity; with them disabled the reference pool
behaves as a set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import attention as att
from .autodiff import Node, Parameter, ShapeError
from .spatial import MemoryEncoding, PredictionHeads, QueryBatch, SpatialDetector, SpatialOutput


def validate_schedule(schedule, pool_size: int | None = None) -> tuple[int, ...]:
    """Check a per-layer keep-count schedule: positive, non-increasing, and
    (when the pool size is known) starting within the pool."""
    schedule = tuple(int(k) for k in schedule)
    for k in schedule:
        if k <= 0:
            raise ValueError(f"selection schedule must be positive, got {schedule}")
    if any(a < b for a, b in zip(schedule, schedule[1:])):
        raise ValueError(f"selection schedule must be non-increasing, got {schedule}")
    if pool_size is not None and schedule and schedule[0] > pool_size:
        raise ValueError(
            f"selection schedule {schedule} starts above the reference pool size {pool_size}"
        )
    return schedule


def tqe_select(confidences: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k most confident pool entries, in pool order.

    Ties break toward the lower pool index (pools are laid out frame-major,
    so this is ascending (frame, query)). Pure and deterministic.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    if k > conf.shape[0]:
        raise ValueError(f"cannot select {k} queries from a pool of {conf.shape[0]}")
    order = np.argsort(-conf, kind="stable")
    return np.sort(order[:k])


class ScoringFFN:
    """Small feed-forward net predicting class logits used only to rank
    reference queries; trained with the same focal objective as the heads."""

    def __init__(self, name: str, dim: int, num_classes: int, rng, prior: float = 0.01):
        self.w1 = Parameter(f"{name}.w1", att.xavier_uniform(rng, dim, dim))
        self.b1 = Parameter(f"{name}.b1", np.zeros(dim))
        self.w2 = Parameter(f"{name}.w2", att.xavier_uniform(rng, dim, num_classes))
        self.b2 = Parameter(f"{name}.b2", np.full(num_classes, -np.log((1.0 - prior) / prior)))

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, contents: Node) -> Node:
        h = ad.relu(ad.add_bias(ad.matmul(contents, self.w1.node), self.b1.node))
        return ad.add_bias(ad.matmul(h, self.w2.node), self.b2.node)


def tqe_score(logits: Node) -> np.ndarray:
    """Scalar confidence per query: max class sigmoid of the scoring logits."""
    probs = 1.0 / (1.0 + np.exp(-logits.value))
    return probs.max(axis=1)


class TemporalEncoderLayer:
    def __init__(self, name: str, dim: int, heads: int, points: int, frames: int, hidden, rng):
        self.attn = att.DeformableParams(f"{name}.attn", dim, heads, points, rng, frames=frames)
        self.ln = att.LayerNormParams(f"{name}.ln", dim)
        self.ffn = att.FFNParams(f"{name}.ffn", dim, hidden, rng)

    def parameters(self):
        return [*self.attn.parameters(), *self.ln.parameters(), *self.ffn.parameters()]


class TemporalQueryLayer:
    def __init__(self, name: str, dim: int, heads: int, hidden: int, rng):
        self.self_attn = att.AttentionParams(f"{name}.self_attn", dim, heads, rng)
        self.ln1 = att.LayerNormParams(f"{name}.ln1", dim)
        self.cross = att.AttentionParams(f"{name}.cross", dim, heads, rng)
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


class TemporalDecoderLayer:
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


def tdte(
    memories: list[MemoryEncoding],
    layers: list[TemporalEncoderLayer],
    frame_embed: Node | None = None,
) -> list[Node]:
    """Fuse per-frame memories: every position of every frame queries all
    frames' maps through multi-frame deformable attention, then an FFN.

    With zero layers the input feature maps pass through untouched. When
    ``frame_embed`` is given, row t is added to frame t's queries before
    attention.
    """
    if not memories:
        raise ShapeError("tdte: empty memory list")
    dim = memories[0].features.value.shape[0]
    for mem in memories:
        if mem.features.value.shape[0] != dim:
            raise ShapeError("tdte: memories disagree on channel count")
    if not layers:
        return [mem.features for mem in memories]

    shapes = [mem.features.value.shape for mem in memories]
    tokens = [att.map_to_tokens(mem.features) for mem in memories]
    pos_tokens = [
        ad.constant(mem.positional.reshape(dim, s[1] * s[2]).T)
        for mem, s in zip(memories, shapes)
    ]
    grids = [ad.constant(att.positions_grid(s[1], s[2])) for s in shapes]
    refs = ad.concat(grids, axis=0) if len(grids) > 1 else grids[0]
    sizes = [s[1] * s[2] for s in shapes]

    for layer in layers:
        maps = [att.tokens_to_map(t, s[1], s[2]) for t, s in zip(tokens, shapes)]
        queries = []
        for t, (tok, pos) in enumerate(zip(tokens, pos_tokens)):
            z = ad.add(tok, pos)
            if frame_embed is not None:
                z = ad.add_bias(z, ad.reshape(ad.narrow(frame_embed, 0, t, 1), (dim,)))
            queries.append(z)
        all_q = ad.concat(queries, axis=0) if len(queries) > 1 else queries[0]
        all_t = ad.concat(tokens, axis=0) if len(tokens) > 1 else tokens[0]
        out = att.temporal_deformable_attention(all_q, refs, maps, layer.attn)
        merged = att.residual_layer_norm(all_t, out, layer.ln)
        merged = att.transformer_ffn(merged, layer.ffn)
        tokens = []
        start = 0
        for size in sizes:
            tokens.append(ad.narrow(merged, 0, start, size))
            start += size
    return [att.tokens_to_map(t, s[1], s[2]) for t, s in zip(tokens, shapes)]


def tqe_layer(current: QueryBatch, selected: Node | None, layer: TemporalQueryLayer) -> QueryBatch:
    """One refinement step: self-attention over the current queries, then
    cross-attention into the selected reference queries (skipped when the
    selection is empty), then the FFN. Reference points pass through."""
    content = current.content
    sa = att.multi_head_attention(content, content, layer.self_attn)
    content = att.residual_layer_norm(content, sa, layer.ln1)
    if selected is not None and selected.value.shape[0] > 0:
        ca = att.multi_head_attention(content, selected, layer.cross)
        content = att.residual_layer_norm(content, ca, layer.ln2)
    content = att.transformer_ffn(content, layer.ffn)
    return QueryBatch(content=content, refs=current.refs, origins=current.origins)


def tqe(
    current: QueryBatch,
    pool: Node | None,
    confidences: np.ndarray | None,
    schedule: tuple[int, ...],
    layers: list[TemporalQueryLayer],
) -> tuple[QueryBatch, list[np.ndarray]]:
    """Coarse-to-fine query refinement.

    Layer i selects the top schedule[i] entries of the (fixed) reference
    pool by confidence and refines the current queries against them. The
    schedule must be non-increasing and no longer than the pool.
    """
    if len(schedule) != len(layers):
        raise ValueError(f"schedule length {len(schedule)} != layer count {len(layers)}")
    if pool is None or pool.value.shape[0] == 0:
        validate_schedule(schedule, pool_size=0 if schedule else None)
        selections: list[np.ndarray] = []
        for layer in layers:
            current = tqe_layer(current, None, layer)
            selections.append(np.array([], dtype=np.intp))
        return current, selections
    validate_schedule(schedule, pool_size=pool.value.shape[0])
    selections = []
    for k, layer in zip(schedule, layers):
        idx = tqe_select(confidences, k)
        selections.append(idx)
        current = tqe_layer(current, ad.gather_rows(pool, idx), layer)
    return current, selections


def tdtd(
    queries: QueryBatch,
    fused_current: Node,
    layers: list[TemporalDecoderLayer],
    heads: PredictionHeads,
) -> list[tuple[Node, Node]]:
    """Decode temporal queries against the current frame's fused memory.

    Returns per-layer (logits, boxes); with zero layers the heads run on
    the incoming queries directly.
    """
    content = queries.content
    if not layers:
        return [heads(content)]
    detections = []
    for layer in layers:
        sa = att.multi_head_attention(content, content, layer.self_attn)
        content = att.residual_layer_norm(content, sa, layer.ln1)
        ca = att.deformable_attention(content, queries.refs, fused_current, layer.cross)
        content = att.residual_layer_norm(content, ca, layer.ln2)
        content = att.transformer_ffn(content, layer.ffn)
        detections.append(heads(content))
    return detections


@dataclass
class VideoOutput:
    spatial: list[SpatialOutput]  # one per frame, clip order
    fused: list[Node]  # fused feature maps, clip order
    pool_origins: np.ndarray  # frame index of each pool entry
    score_logits: Node | None  # scoring-FFN logits over the pool
    confidences: np.ndarray | None
    selections: list[np.ndarray]
    detections: list[tuple[Node, Node]]  # per temporal-decoder layer


class VideoDetector:
    """Spatial detector plus temporal fusion; consumes a clip of
    ``ref_frames`` reference frames followed by the current frame."""

    def __init__(
        self,
        dim: int,
        heads: int,
        points: int,
        num_queries: int,
        enc_layers: int,
        dec_layers: int,
        num_classes: int,
        ref_frames: int,
        tdte_layers: int,
        tqe_schedule: tuple[int, ...],
        tdtd_layers: int,
        rng: np.random.Generator,
        use_frame_embeddings: bool = True,
    ):
        if ref_frames < 0:
            raise ValueError(f"ref_frames must be >= 0, got {ref_frames}")
        schedule = validate_schedule(tqe_schedule, pool_size=ref_frames * num_queries or None)
        if ref_frames == 0 and schedule:
            raise ValueError("a selection schedule needs at least one reference frame")
        self.spatial = SpatialDetector(
            dim, heads, points, num_queries, enc_layers, dec_layers, num_classes, rng
        )
        self.num_frames = ref_frames + 1
        self.ref_frames = ref_frames
        self.schedule = schedule
        self.use_frame_embeddings = use_frame_embeddings
        hidden = 4 * dim
        self.frame_embed = Parameter(
            "temporal.frame_embed", 0.1 * rng.normal(size=(self.num_frames, dim))
        )
        self.scoring = ScoringFFN("temporal.scoring", dim, num_classes, rng)
        self.tdte_layers = [
            TemporalEncoderLayer(
                f"temporal.tdte.{i}", dim, heads, points, self.num_frames, hidden, rng
            )
            for i in range(tdte_layers)
        ]
        self.tqe_layers = [
            TemporalQueryLayer(f"temporal.tqe.{i}", dim, heads, hidden, rng)
            for i in range(len(schedule))
        ]
        self.tdtd_layers = [
            TemporalDecoderLayer(f"temporal.tdtd.{i}", dim, heads, points, hidden, rng)
            for i in range(tdtd_layers)
        ]
        # temporal sub-blocks start as near-pass-throughs (zero output
        # projections) so a warm-started spatial detector keeps working at
        # temporal step 0 and the fusion layers learn deviations gradually
        for layer in self.tdte_layers + self.tqe_layers + self.tdtd_layers:
            for p in layer.parameters():
                if p.name.endswith((".wo", ".ffn.w2")):
                    p.value = np.zeros_like(p.value)

    def temporal_parameters(self) -> list[Parameter]:
        out = [self.frame_embed, *self.scoring.parameters()]
        for layer in self.tdte_layers + self.tqe_layers + self.tdtd_layers:
            out.extend(layer.parameters())
        return out

    def parameters(self) -> list[Parameter]:
        return self.spatial.parameters() + self.temporal_parameters()

    def forward_clip(self, frames: list[np.ndarray]) -> VideoOutput:
        if len(frames) != self.num_frames:
            raise ShapeError(
                f"expected {self.num_frames} frames (refs + current), got {len(frames)}"
            )
        spatial_outputs = [self.spatial.forward_frame(f, t) for t, f in enumerate(frames)]
        memories = [s.memory for s in spatial_outputs]
        embed = self.frame_embed.node if self.use_frame_embeddings else None
        fused = tdte(memories, self.tdte_layers, embed)

        current = spatial_outputs[-1].queries[-1]
        ref_batches = [s.queries[-1] for s in spatial_outputs[:-1]]
        if ref_batches:
            pool = ad.concat([q.content for q in ref_batches], axis=0)
            pool_origins = np.concatenate([q.origins for q in ref_batches])
            if self.use_frame_embeddings:
                pool = ad.add(pool, ad.gather_rows(self.frame_embed.node, pool_origins))
            score_logits = self.scoring(pool)
            confidences = tqe_score(score_logits)
        else:
            pool = None
            pool_origins = np.array([], dtype=np.intp)
            score_logits = None
            confidences = None

        refined, selections = tqe(current, pool, confidences, self.schedule, self.tqe_layers)
        detections = tdtd(refined, fused[-1], self.tdtd_layers, self.spatial.heads)
        return VideoOutput(
            spatial=spatial_outputs,
            fused=fused,
            pool_origins=pool_origins,
            score_logits=score_logits,
            confidences=confidences,
            selections=selections,
            detections=detections,
        )
