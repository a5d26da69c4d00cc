"""Query decoder: corner-aware sampling, position-aware feature mixing,
baseline attention variants, box heads, and the loss formulas.

Sampling points are placed at the four box corners (sign pattern cycling
with the point index) scaled by the current box estimate and rotated by its
heading, so rotating the box rotates every sampling offset with it. Sampled
features are fused with sinusoidal embeddings of their absolute sampling
locations and decoded through adaptive channel and spatial mixing.

Box estimates feeding the geometry of the next layer are detached; gradients
reach the regression head through per-layer supervision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import val
from .geometry import BevGrid
from .tensor import LinearMap, linear_apply, sinusoid_freqs

# corner sign pattern, cycled by point index i -> corner j = i mod 4
CORNER_SIGNS = np.array([(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)])

ATTENTION_MODES = ("geometry_aware", "deformable_center",
                   "deformable_scaled_rotated", "standard")

ENC_DIM = 8  # (du, dv, z, log l, log w, log h, sin yaw, cos yaw)


@dataclass(frozen=True)
class AttentionParams:
    """Projections of one multi-head attention block."""

    w_q: LinearMap
    w_k: LinearMap
    w_v: LinearMap
    w_o: LinearMap


@dataclass(frozen=True)
class DecoderParams:
    n_layers: int
    n_points: int
    n_heads: int
    pe_dim: int
    offset_gen: LinearMap        # [C -> 2*N_p]
    point_weight_gen: LinearMap  # [C -> N_p], deformable baselines only
    deform_out_proj: LinearMap   # [C -> C], deformable baselines only
    pos_embed_proj: LinearMap    # [pe_dim -> C]
    channel_mix_gen: LinearMap   # [C -> C*C]
    spatial_mix_gen: LinearMap   # [C -> N_p*N_p]
    out_proj: LinearMap          # [N_p*C -> C]
    self_attn: tuple             # AttentionParams per layer
    cross_attn: AttentionParams  # standard-attention baseline only
    ffn1: LinearMap              # [C -> 2C]
    ffn2: LinearMap              # [2C -> C]
    reg_head: LinearMap          # [C -> 8]
    cls_head: LinearMap          # [C -> n_classes]

    def __post_init__(self):
        C = self.offset_gen.in_dim
        if self.n_points % 4 != 0:
            raise ValueError("n_points must be divisible by 4 (corner cycling)")
        if self.pe_dim % 4 != 0:
            raise ValueError("pe_dim must be divisible by 4")
        if C % self.n_heads != 0:
            raise ValueError("feature dim must be divisible by n_heads")
        if self.offset_gen.out_dim != 2 * self.n_points:
            raise ValueError("offset_gen must output 2*n_points values")
        if len(self.self_attn) != self.n_layers:
            raise ValueError("one self-attention block per layer required")
        if self.reg_head.out_dim != ENC_DIM:
            raise ValueError(f"reg_head must output {ENC_DIM} values")

    @property
    def channels(self):
        return self.offset_gen.in_dim

    @property
    def n_classes(self):
        return self.cls_head.out_dim


@dataclass
class BoxPrediction:
    """Raw regression-head output for one query, in encoded space."""

    ref_point: tuple       # (u, v) cells
    center_delta: object   # (du, dv) cells
    z: float
    log_dims: object       # (log l, log w, log h)
    heading: object        # (sin yaw, cos yaw), normalized on decode
    cls_logits: object

    def encoded(self):
        """The 8-vector the regression head was trained to produce."""
        return np.concatenate([val(self.center_delta), [val(self.z)],
                               val(self.log_dims), val(self.heading)])

    def to_box(self):
        """Decode to (x_c, y_c cells, z m, l, w, h m, yaw rad); a zero-norm
        heading decodes to yaw 0."""
        d = val(self.center_delta)
        ld = val(self.log_dims)
        s, c = val(self.heading)
        return (self.ref_point[0] + float(d[0]), self.ref_point[1] + float(d[1]),
                float(val(self.z)), float(np.exp(ld[0])), float(np.exp(ld[1])),
                float(np.exp(ld[2])), float(np.arctan2(s, c)))


def encode_box(center_cells, z, dims, yaw, ref_point):
    """Encode a ground-truth box against a reference point: the regression
    target vector (center delta in cells, z, log-dims, sin/cos heading)."""
    l, w, h = dims
    if min(l, w, h) <= 0:
        raise ValueError("box dims must be positive to encode")
    return np.array([center_cells[0] - ref_point[0], center_cells[1] - ref_point[1],
                     z, math.log(l), math.log(w), math.log(h),
                     math.sin(yaw), math.cos(yaw)])


# ---------------------------------------------------------------------------
# sampling geometry


def _corner_points_batch(feats, boxes, params: DecoderParams, grid: BevGrid,
                         mode="geometry_aware"):
    """Sampling points for a batch of queries, [Nq, N_p, 2] in cell units.

    boxes: dict of arrays (xc, yc cells; l, w meters; yaw rad), possibly
    traced. Modes:
      geometry_aware          corners +- l/2, w/2 plus offsets, rotated
      deformable_scaled_rotated  offsets scaled by l/2, w/2, rotated
      deformable_center       raw offsets around the center
    """
    n_p = params.n_points
    nq = np.shape(val(feats))[0]
    raw = ad.reshape(linear_apply(params.offset_gen, feats), (nq, n_p, 2))
    raw_x = ad.getitem(raw, (slice(None), slice(None), 0))
    raw_y = ad.getitem(raw, (slice(None), slice(None), 1))

    cell = grid.cell_size_x  # square cells assumed for metric conversion
    half_l = ad.reshape(ad.mul(ad.div(boxes["l"], cell), 0.5), (nq, 1))
    half_w = ad.reshape(ad.mul(ad.div(boxes["w"], cell), 0.5), (nq, 1))
    signs = np.tile(CORNER_SIGNS, (n_p // 4, 1))  # [N_p, 2]

    if mode == "geometry_aware":
        px = ad.add(ad.mul(half_l, signs[None, :, 0]), raw_x)
        py = ad.add(ad.mul(half_w, signs[None, :, 1]), raw_y)
    elif mode == "deformable_scaled_rotated":
        px = ad.mul(half_l, raw_x)
        py = ad.mul(half_w, raw_y)
    elif mode == "deformable_center":
        px, py = raw_x, raw_y
    else:
        raise ValueError(f"unknown sampling mode: {mode}")

    if mode == "deformable_center":
        dx, dy = px, py
    else:
        c = ad.reshape(ad.cos(boxes["yaw"]), (nq, 1))
        s = ad.reshape(ad.sin(boxes["yaw"]), (nq, 1))
        dx = ad.sub(ad.mul(px, c), ad.mul(py, s))
        dy = ad.add(ad.mul(px, s), ad.mul(py, c))

    x = ad.add(dx, ad.reshape(boxes["xc"], (nq, 1)))
    y = ad.add(dy, ad.reshape(boxes["yc"], (nq, 1)))
    return ad.stack([x, y], axis=2), ad.stack([dx, dy], axis=2)


def corner_offsets(query, params: DecoderParams, grid: BevGrid):
    """Corner-aware sampling points of a single query.

    Returns (points [N_p, 2], offsets [N_p, 2]) in cell units; the box (with
    l, w in meters) is converted to cells before the corner expansion.
    """
    xc, yc, _z, l, w, _h, yaw = query.box
    boxes = {"xc": np.array([xc]), "yc": np.array([yc]),
             "l": np.array([l]), "w": np.array([w]), "yaw": np.array([yaw])}
    feats = ad.reshape(query.feature, (1, np.shape(val(query.feature))[0]))
    pts, offs = _corner_points_batch(feats, boxes, params, grid)
    return val(pts)[0], val(offs)[0]


def corner_sample(bev_fuse, points):
    """Bilinear-sample the fused BEV map at every sampling point
    (zero-padding outside the grid). points: [..., 2] cell coords."""
    shp = np.shape(val(points))
    n = int(np.prod(shp[:-1]))
    flat = ad.reshape(points, (n, 2))
    xs = ad.getitem(flat, (slice(None), 0))
    ys = ad.getitem(flat, (slice(None), 1))
    feats, _ = ad.bilinear_gather(bev_fuse, xs, ys)
    C = np.shape(val(bev_fuse))[0]
    return ad.reshape(feats, shp[:-1] + (C,))


# ---------------------------------------------------------------------------
# feature mixing and attention


def _position_embed(points, params: DecoderParams, grid: BevGrid):
    """Sinusoidal embeddings of absolute sampling points normalized by the
    grid extent, projected to the feature dim. points: [Nq, N_p, 2]."""
    nq, n_p, _ = np.shape(val(points))
    freqs = sinusoid_freqs(params.pe_dim)
    blocks = []
    for axis, extent in ((0, grid.width), (1, grid.height)):
        coord = ad.div(ad.getitem(points, (slice(None), slice(None), axis)),
                       float(extent))
        phase = ad.mul(ad.reshape(coord, (nq, n_p, 1)), freqs[None, None, :])
        inter = ad.stack([ad.sin(phase), ad.cos(phase)], axis=3)
        blocks.append(ad.reshape(inter, (nq, n_p, params.pe_dim // 2)))
    pe = ad.concat(blocks, axis=2)
    e = linear_apply(params.pos_embed_proj,
                     ad.reshape(pe, (nq * n_p, params.pe_dim)))
    return ad.reshape(e, (nq, n_p, params.channels))


def _position_aware_mix_batch(feats, sampled, points, params: DecoderParams,
                              grid: BevGrid):
    """Adaptive channel then spatial mixing of position-augmented samples."""
    nq = np.shape(val(feats))[0]
    C = params.channels
    n_p = params.n_points

    G = ad.add(sampled, _position_embed(points, params, grid))  # [Nq, N_p, C]
    w_c = ad.reshape(linear_apply(params.channel_mix_gen, feats), (nq, C, C))
    G_c = ad.relu(ad.layer_norm(ad.matmul(G, w_c)))
    w_s = ad.reshape(linear_apply(params.spatial_mix_gen, feats), (nq, n_p, n_p))
    G_cs = ad.relu(ad.layer_norm(ad.matmul(ad.transpose(G_c, (0, 2, 1)), w_s)))
    # flatten spatial-major: entry p*C + c
    flat = ad.reshape(ad.transpose(G_cs, (0, 2, 1)), (nq, n_p * C))
    return ad.add(feats, linear_apply(params.out_proj, flat))


def position_aware_mix(query_feature, sampled, points, params: DecoderParams,
                       grid: BevGrid):
    """Single-query mixing: refine a query feature from its N_p sampled
    features and their sampling locations."""
    C = np.shape(val(query_feature))[0]
    out = _position_aware_mix_batch(
        ad.reshape(query_feature, (1, C)),
        ad.reshape(sampled, (1, params.n_points, C)),
        ad.reshape(points, (1, params.n_points, 2)),
        params, grid)
    return ad.reshape(out, (C,))


def _mha(q_in, kv_in, attn: AttentionParams, n_heads):
    """Multi-head softmax attention; returns the pre-residual output."""
    nq, C = np.shape(val(q_in))
    nk = np.shape(val(kv_in))[0]
    dh = C // n_heads

    def split(x, n):
        return ad.transpose(ad.reshape(x, (n, n_heads, dh)), (1, 0, 2))

    q = split(linear_apply(attn.w_q, q_in), nq)
    k = split(linear_apply(attn.w_k, kv_in), nk)
    v = split(linear_apply(attn.w_v, kv_in), nk)
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    ctx = ad.matmul(ad.softmax(scores, axis=-1), v)  # [heads, Nq, dh]
    merged = ad.reshape(ad.transpose(ctx, (1, 0, 2)), (nq, C))
    return linear_apply(attn.w_o, merged)


def self_attention(feats, attn: AttentionParams, n_heads):
    """Standard residual multi-head self-attention among query features."""
    return ad.add(feats, _mha(feats, feats, attn, n_heads))


# ---------------------------------------------------------------------------
# box heads


def decode_box(query, params: DecoderParams) -> BoxPrediction:
    """Run the regression and classification heads on one query feature."""
    enc = val(linear_apply(params.reg_head, query.feature))
    cls = val(linear_apply(params.cls_head, query.feature))
    return BoxPrediction(ref_point=tuple(query.ref_point),
                         center_delta=enc[0:2], z=enc[2], log_dims=enc[3:6],
                         heading=enc[6:8], cls_logits=cls)


def _decode_state(enc, ref_points):
    """Detached box arrays for the next layer's sampling geometry."""
    e = val(enc)
    return {
        "xc": ref_points[:, 0] + e[:, 0],
        "yc": ref_points[:, 1] + e[:, 1],
        "z": e[:, 2],
        "l": np.exp(e[:, 3]),
        "w": np.exp(e[:, 4]),
        "h": np.exp(e[:, 5]),
        "yaw": np.arctan2(e[:, 6], e[:, 7]),
    }


def _initial_state(ref_points):
    """First-layer boxes: center on the reference point, l = w = yaw = 0."""
    nq = ref_points.shape[0]
    z = np.zeros(nq)
    return {"xc": ref_points[:, 0].copy(), "yc": ref_points[:, 1].copy(),
            "z": z, "l": z.copy(), "w": z.copy(), "h": z.copy(),
            "yaw": z.copy()}


# ---------------------------------------------------------------------------
# decoder stack


def decoder_layer(feats, ref_points, boxes, bev_fuse, params: DecoderParams,
                  layer_idx, grid: BevGrid, mode="geometry_aware"):
    """One decoder layer over a batch of queries.

    feats: [Nq, C]; ref_points: [Nq, 2] plain; boxes: detached state dict
    from the previous layer (or the initial state). Returns
    (new feats, encoded predictions [Nq, 8], class logits, next box state).
    """
    if layer_idx >= params.n_layers:
        raise ValueError("layer_idx out of range")
    if mode not in ATTENTION_MODES:
        raise ValueError(f"unknown attention mode: {mode}")

    feats = self_attention(feats, params.self_attn[layer_idx], params.n_heads)

    if mode == "standard":
        C, H, W = np.shape(val(bev_fuse))
        bev_flat = ad.transpose(ad.reshape(bev_fuse, (C, H * W)), (1, 0))
        feats = ad.add(feats, _mha(feats, bev_flat, params.cross_attn,
                                   params.n_heads))
    else:
        points, _ = _corner_points_batch(feats, boxes, params, grid, mode=mode)
        sampled = corner_sample(bev_fuse, points)
        if mode == "geometry_aware":
            feats = _position_aware_mix_batch(feats, sampled, points, params, grid)
        else:
            w = ad.softmax(linear_apply(params.point_weight_gen, feats), axis=-1)
            nq, n_p = np.shape(val(w))
            agg = ad.sum_(ad.mul(sampled, ad.reshape(w, (nq, n_p, 1))), axis=1)
            feats = ad.add(feats, linear_apply(params.deform_out_proj, agg))

    hidden = ad.relu(linear_apply(params.ffn1, feats))
    feats = ad.add(feats, linear_apply(params.ffn2, hidden))

    enc = linear_apply(params.reg_head, feats)
    cls = linear_apply(params.cls_head, feats)
    return feats, enc, cls, _decode_state(enc, ref_points)


def run_decoder(feats, ref_points, bev_fuse, params: DecoderParams,
                grid: BevGrid, mode="geometry_aware"):
    """Full decoder stack. Returns a list, one entry per layer, of dicts
    with encoded predictions, class logits, and decoded box state."""
    boxes = _initial_state(ref_points)
    layers = []
    for li in range(params.n_layers):
        feats, enc, cls, boxes = decoder_layer(
            feats, ref_points, boxes, bev_fuse, params, li, grid, mode=mode)
        layers.append({"enc": enc, "cls": cls, "boxes": boxes})
    return layers


# ---------------------------------------------------------------------------
# losses


def focal_loss(pred_logits, labels, gamma=2.0, alpha=0.25):
    """Alpha-balanced focal loss on sigmoid probabilities, mean over the
    first axis (queries). labels: int class ids [N] for [N, K] logits, or a
    binary array matching the logits."""
    lv = val(pred_logits)
    labels = np.asarray(labels)
    if labels.shape != lv.shape:
        y = np.zeros_like(lv)
        y[np.arange(lv.shape[0]), labels.astype(int)] = 1.0
    else:
        y = labels.astype(float)
    p = ad.clip(ad.sigmoid(pred_logits), 1e-12, 1.0 - 1e-12)
    one_m_p = ad.sub(1.0, p)
    pos = ad.mul(ad.mul(ad.power(one_m_p, gamma), ad.log(p)), -alpha * y)
    neg = ad.mul(ad.mul(ad.power(p, gamma), ad.log(one_m_p)),
                 -(1.0 - alpha) * (1.0 - y))
    n = lv.shape[0]
    return ad.div(ad.sum_(ad.add(pos, neg)), float(n))


def gaussian_focal_loss(pred_heatmap, target_heatmap, alpha=2.0, beta=4.0):
    """Penalty-reduced focal loss for Gaussian center heatmaps.

    Positives are cells where the target is exactly 1; the loss is
    normalized by the positive count (at least 1)."""
    t = np.asarray(val(target_heatmap))
    pos = t == 1.0
    n_pos = max(int(pos.sum()), 1)
    p = ad.clip(pred_heatmap, 1e-12, 1.0 - 1e-12)
    one_m_p = ad.sub(1.0, p)
    pos_term = ad.mul(ad.mul(ad.power(one_m_p, alpha), ad.log(p)),
                      -1.0 * pos)
    neg_term = ad.mul(ad.mul(ad.power(p, alpha), ad.log(one_m_p)),
                      -((1.0 - t) ** beta) * (~pos))
    return ad.div(ad.add(ad.sum_(pos_term), ad.sum_(neg_term)), float(n_pos))


def l1_encoded(pred_enc, target_enc):
    """Mean absolute error between encoded prediction and target vectors."""
    return ad.mean(ad.absolute(ad.sub(pred_enc, target_enc)))


def l1_box_loss(pred: BoxPrediction, target_box, grid: BevGrid):
    """L1 regression loss for one matched (prediction, ground-truth) pair,
    computed in encoded space. target_box: a scene Box (world meters)."""
    from .geometry import world_to_cell

    u, v = world_to_cell(grid, target_box.center[0], target_box.center[1])
    tgt = encode_box((u, v), target_box.center[2], target_box.dims,
                     target_box.yaw, pred.ref_point)
    return float(val(l1_encoded(pred.encoded(), tgt)))
