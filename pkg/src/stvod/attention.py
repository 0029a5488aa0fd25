"""Attention building blocks: dense multi-head attention, single-map and
multi-frame deformable attention, bilinear sampling, sinusoidal positions.

Conventions used throughout:

* Query/key matrices are [N, C] with one row per element.
* Feature maps are [C, H, W]; sample points are (x, y) in pixel coordinates
  where integer coordinates are pixel centers. Out-of-bounds samples read
  zeros (zero padding).
* Reference points are normalized to [0, 1]^2, (0, 0) top-left and (1, 1)
  bottom-right; they are rescaled per target map so 1 lands on the center of
  the last pixel.
* Weight matrices are stored [in, out] (applied as ``x @ w``).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Parameter, ShapeError


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def sine_positional_embedding(height: int, width: int, dim: int) -> np.ndarray:
    """Deterministic 2-d sinusoidal position code, shape [dim, H, W].

    Half the channels encode the row index, half the column index, each as
    interleaved (sin, cos) pairs over a geometric frequency ladder with
    temperature 10000. All values lie in [-1, 1] and distinct grid positions
    receive distinct codes.
    """
    if dim % 4 != 0:
        raise ShapeError(f"positional embedding needs dim divisible by 4, got {dim}")
    quarter = dim // 4
    freqs = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    ys = np.arange(height, dtype=np.float64)
    xs = np.arange(width, dtype=np.float64)
    out = np.zeros((dim, height, width))
    y_phase = ys[None, :] * freqs[:, None]  # [quarter, H]
    x_phase = xs[None, :] * freqs[:, None]  # [quarter, W]
    out[0 : 2 * quarter : 2] = np.sin(y_phase)[:, :, None]
    out[1 : 2 * quarter : 2] = np.cos(y_phase)[:, :, None]
    out[2 * quarter :: 2] = np.sin(x_phase)[:, None, :]
    out[2 * quarter + 1 :: 2] = np.cos(x_phase)[:, None, :]
    return out


def positions_grid(height: int, width: int) -> np.ndarray:
    """Normalized (x, y) of every grid cell, row-major, shape [H*W, 2]."""
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    px = xs.reshape(-1) / max(width - 1, 1)
    py = ys.reshape(-1) / max(height - 1, 1)
    return np.stack([px, py], axis=1).astype(np.float64)


def map_to_tokens(fmap: Node) -> Node:
    """[C, H, W] -> [H*W, C] row-major over positions."""
    c = fmap.shape[0]
    return ad.transpose(ad.reshape(fmap, (c, fmap.shape[1] * fmap.shape[2])))


def tokens_to_map(tokens: Node, height: int, width: int) -> Node:
    """[H*W, C] -> [C, H, W]."""
    return ad.reshape(ad.transpose(tokens), (tokens.shape[1], height, width))


# ---------------------------------------------------------------------------
# bilinear sampling


def bilinear_sample(fmap: Node, points: Node) -> Node:
    """Sample a [C, H, W] map at fractional (x, y) points [P, 2] -> [P, C].

    Standard 4-neighbor blend; neighbors outside the map contribute zero.
    Differentiable in both the map values and the points, except where a
    coordinate sits exactly on the integer lattice.
    """
    if fmap.value.ndim != 3:
        raise ShapeError(f"bilinear_sample: map must be [C,H,W], got {fmap.shape}")
    if points.value.ndim != 2 or points.value.shape[1] != 2:
        raise ShapeError(f"bilinear_sample: points must be [P,2], got {points.shape}")
    c, h, w = fmap.value.shape
    x = points.value[:, 0]
    y = points.value[:, 1]
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    fx = x - x0
    fy = y - y0

    # corner order: (x0,y0), (x0+1,y0), (x0,y0+1), (x0+1,y0+1)
    cx = np.stack([x0, x0 + 1, x0, x0 + 1])  # [4, P]
    cy = np.stack([y0, y0, y0 + 1, y0 + 1])
    valid = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
    idx = np.clip(cy, 0, h - 1) * w + np.clip(cx, 0, w - 1)
    vals = fmap.value.reshape(c, h * w).T[idx]  # [4, P, C]
    vals *= valid[:, :, None]
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy])
    out = np.einsum("kp,kpc->pc", wts, vals)

    dwx = np.stack([-(1 - fy), (1 - fy), -fy, fy])
    dwy = np.stack([-(1 - fx), -fx, (1 - fx), fx])

    def bw(g):
        if fmap.requires_grad:
            contrib = np.einsum("kp,pc->kpc", wts * valid, g)
            flat_idx = (idx[:, :, None] * c + np.arange(c)).reshape(-1)
            buf = np.bincount(flat_idx, weights=contrib.reshape(-1), minlength=h * w * c)
            ad._acc(
                fmap,
                np.ascontiguousarray(buf.reshape(h * w, c).T).reshape(c, h, w),
            )
        if points.requires_grad:
            dot = np.einsum("pc,kpc->kp", g, vals)
            gp = np.stack(
                [np.einsum("kp,kp->p", dwx, dot), np.einsum("kp,kp->p", dwy, dot)], axis=1
            )
            ad._acc(points, gp)

    return ad._make(out, (fmap, points), bw)


def rescale_reference(refs: Node, height: int, width: int) -> Node:
    """Map normalized [0,1]^2 reference points onto a map's pixel grid."""
    scale = ad.constant(np.array([max(width - 1, 1), max(height - 1, 1)], dtype=np.float64))
    return ad.scale_cols(refs, scale)


# ---------------------------------------------------------------------------
# dense multi-head attention


class AttentionParams:
    """Projections for dense multi-head attention, stored stacked: columns
    [m*C/M, (m+1)*C/M) of wq / wk / wv are head m's query, key, and value
    maps, and the matching row block of wo is head m's output map."""

    def __init__(self, name: str, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ShapeError(f"{name}: dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Parameter(f"{name}.wq", xavier_uniform(rng, dim, dim))
        self.wk = Parameter(f"{name}.wk", xavier_uniform(rng, dim, dim))
        self.wv = Parameter(f"{name}.wv", xavier_uniform(rng, dim, dim))
        self.wo = Parameter(f"{name}.wo", xavier_uniform(rng, dim, dim))

    def parameters(self) -> list[Parameter]:
        return [self.wq, self.wk, self.wv, self.wo]


def multi_head_attention(
    queries: Node,
    keys: Node,
    params: AttentionParams,
    return_weights: bool = False,
):
    """Dense attention of queries [Nq, C] over keys/values [Nk, C].

    Per head, weights are softmax(q . k / sqrt(C/M)) over keys (each row sums
    to 1); the per-head value mixtures are concatenated and mapped back to C.
    Any positional terms must already be summed into the inputs by the caller.
    """
    if queries.value.ndim != 2 or keys.value.ndim != 2:
        raise ShapeError(
            f"attention: queries {queries.shape} and keys {keys.shape} must be 2-d"
        )
    if queries.value.shape[1] != params.dim or keys.value.shape[1] != params.dim:
        raise ShapeError(
            f"attention: inputs {queries.shape} / {keys.shape} do not match dim {params.dim}"
        )
    inv_sqrt = 1.0 / np.sqrt(params.head_dim)
    hd = params.head_dim
    q_all = ad.matmul(queries, params.wq.node)
    k_all = ad.matmul(keys, params.wk.node)
    v_all = ad.matmul(keys, params.wv.node)
    mixed = []
    weights = []
    for m in range(params.heads):
        q = ad.narrow(q_all, 1, m * hd, hd)
        k = ad.narrow(k_all, 1, m * hd, hd)
        v = ad.narrow(v_all, 1, m * hd, hd)
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), inv_sqrt)
        attn = ad.softmax(scores, axis=1)
        if return_weights:
            weights.append(np.array(attn.value))
        mixed.append(ad.matmul(attn, v))
    stacked = mixed[0] if params.heads == 1 else ad.concat(mixed, axis=1)
    out = ad.matmul(stacked, params.wo.node)
    if return_weights:
        return out, weights
    return out


# ---------------------------------------------------------------------------
# deformable attention (single map and multi-frame)


class DeformableParams:
    """Projections for deformable attention over ``frames`` feature maps.

    A single linear layer of 3*M*L*K channels maps each query to 2*M*L*K
    sampling offsets plus M*L*K weight logits; the logits of one head are
    softmax-normalized jointly over its L*K samples. The value and output
    projections are stored stacked like :class:`AttentionParams` (column
    block m of wv is head m's value map, row block m of wo its output map).
    Offset weights start at zero with biases forming a ring of radius 1..K
    pixels around the reference (per head direction 2*pi*m/M), logit biases
    at zero, which makes the initial attention uniform.
    """

    def __init__(
        self,
        name: str,
        dim: int,
        heads: int,
        points: int,
        rng: np.random.Generator,
        frames: int = 1,
    ):
        if dim % heads != 0:
            raise ShapeError(f"{name}: dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.points = points
        self.frames = frames
        self.head_dim = dim // heads
        self.wv = Parameter(f"{name}.wv", xavier_uniform(rng, dim, dim))
        self.wo = Parameter(f"{name}.wo", xavier_uniform(rng, dim, dim))
        total = 3 * heads * frames * points
        self.samp_w = Parameter(f"{name}.samp_w", np.zeros((dim, total)))
        bias = np.zeros(total)
        for m in range(heads):
            angle = 2.0 * np.pi * m / heads
            for l in range(frames):
                for k in range(points):
                    base = ((m * frames + l) * points + k) * 2
                    bias[base] = np.cos(angle) * (k + 1)
                    bias[base + 1] = np.sin(angle) * (k + 1)
        self.samp_b = Parameter(f"{name}.samp_b", bias)

    def parameters(self) -> list[Parameter]:
        return [self.wv, self.wo, self.samp_w, self.samp_b]


def temporal_deformable_attention(
    queries: Node,
    refs: Node,
    maps: list[Node],
    params: DeformableParams,
    return_weights: bool = False,
):
    """Deformable attention of queries [Nq, C] over L feature maps.

    Each head samples K points per map at (rescaled reference + learned
    offset), reads them bilinearly, applies the head's value projection, and
    mixes them with weights softmax-normalized jointly over all L*K samples.
    Map spatial sizes may differ; channel counts must equal C.
    """
    if not maps:
        raise ShapeError("temporal_deformable_attention: empty frame list")
    if len(maps) != params.frames:
        raise ShapeError(
            f"temporal_deformable_attention: got {len(maps)} maps, "
            f"params built for {params.frames}"
        )
    for fmap in maps:
        if fmap.value.ndim != 3 or fmap.value.shape[0] != params.dim:
            raise ShapeError(
                f"temporal_deformable_attention: map shape {fmap.shape} "
                f"incompatible with dim {params.dim}"
            )
    n_q = queries.value.shape[0]
    heads, frames, points = params.heads, params.frames, params.points
    hd = params.head_dim
    group = frames * points
    chunk = n_q * points  # rows per (head, frame) block of samples

    proj = ad.add_bias(ad.matmul(queries, params.samp_w.node), params.samp_b.node)

    # value-project each map once (projection commutes with bilinear
    # interpolation), then sample the small per-head value maps
    value_maps: list[list[Node]] = []
    bases = []
    for fmap in maps:
        _, h, w = fmap.value.shape
        vtokens = ad.matmul(map_to_tokens(fmap), params.wv.node)  # [H*W, C]
        value_maps.append(
            [tokens_to_map(ad.narrow(vtokens, 1, m * hd, hd), h, w) for m in range(heads)]
        )
        bases.append(ad.repeat_rows(rescale_reference(refs, h, w), points))

    head_mix = []
    weights = []
    for m in range(heads):
        logits = ad.narrow(proj, 1, 2 * heads * group + m * group, group)
        attn = ad.softmax(logits, axis=1)  # [Nq, L*K], rows sum to 1
        if return_weights:
            weights.append(np.array(attn.value))
        sampled = []
        for l in range(frames):
            block = ad.narrow(proj, 1, ((m * frames + l) * points) * 2, 2 * points)
            pts = ad.add(ad.reshape(block, (chunk, 2)), bases[l])
            sampled.append(bilinear_sample(value_maps[l][m], pts))  # [Nq*K, C/M]
        stacked = sampled[0] if frames == 1 else ad.concat(sampled, axis=0)
        if frames == 1:
            attn_flat = ad.reshape(attn, (chunk,))
        else:
            # sample rows are frame-major; reorder the (query, frame, point)
            # weight layout to match
            attn_flat = ad.reshape(
                ad.permute(ad.reshape(attn, (n_q, frames, points)), (1, 0, 2)),
                (frames * chunk,),
            )
        mixed = ad.scale_rows(stacked, attn_flat)
        head_mix.append(
            ad.sum_axis(ad.sum_axis(ad.reshape(mixed, (frames, n_q, points, hd)), 0), 1)
        )
    stacked_heads = head_mix[0] if heads == 1 else ad.concat(head_mix, axis=1)
    out = ad.matmul(stacked_heads, params.wo.node)
    if return_weights:
        return out, weights
    return out


def deformable_attention(
    queries: Node,
    refs: Node,
    fmap: Node,
    params: DeformableParams,
    return_weights: bool = False,
):
    """Single-map deformable attention; the L=1 case of the temporal form."""
    if params.frames != 1:
        raise ShapeError(f"deformable_attention: params built for {params.frames} frames")
    return temporal_deformable_attention(queries, refs, [fmap], params, return_weights)


# ---------------------------------------------------------------------------
# feed-forward block and layer norm


class LayerNormParams:
    def __init__(self, name: str, dim: int):
        self.gain = Parameter(f"{name}.gain", np.ones(dim))
        self.bias = Parameter(f"{name}.bias", np.zeros(dim))

    def parameters(self) -> list[Parameter]:
        return [self.gain, self.bias]


def residual_layer_norm(x: Node, sub: Node, ln: LayerNormParams) -> Node:
    """Post-norm residual: layer_norm(x + sub)."""
    return ad.layer_norm(ad.add(x, sub), ln.gain.node, ln.bias.node)


class FFNParams:
    """Two-layer feed-forward block with residual and post-layer-norm."""

    def __init__(self, name: str, dim: int, hidden: int, rng: np.random.Generator):
        self.w1 = Parameter(f"{name}.w1", xavier_uniform(rng, dim, hidden))
        self.b1 = Parameter(f"{name}.b1", np.zeros(hidden))
        self.w2 = Parameter(f"{name}.w2", xavier_uniform(rng, hidden, dim))
        self.b2 = Parameter(f"{name}.b2", np.zeros(dim))
        self.ln = LayerNormParams(f"{name}.ln", dim)

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2, *self.ln.parameters()]


def transformer_ffn(x: Node, params: FFNParams) -> Node:
    """layer_norm(x + W2 relu(W1 x + b1) + b2), applied row-wise to [N, C]."""
    inner = ad.add_bias(ad.matmul(x, params.w1.node), params.b1.node)
    inner = ad.add_bias(ad.matmul(ad.relu(inner), params.w2.node), params.b2.node)
    return residual_layer_norm(x, inner, params.ln)
