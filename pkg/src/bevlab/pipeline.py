"""End-to-end forward pass and the desk-scale fitting routine.

The forward pass wires view transformation -> fusion -> query selection ->
decoder according to the configured ablation modes. Fitting is plain
gradient descent on a Gaussian-focal heatmap loss, an L1 box loss on
greedily matched predictions, and an auxiliary L1 height-supervision term
(a harness-only substitute for full detection training: without it the
height generators cannot be trained in desk time).
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import val
from .decoder import (AttentionParams, DecoderParams, encode_box, run_decoder,
                      gaussian_focal_loss, l1_encoded, ATTENTION_MODES)
from .geometry import BevGrid, world_to_cell
from .query_select import (GroupEmbeddings, GroupSpec, HeatmapHead,
                           init_queries, predict_heatmaps, topk_keypoints,
                           gaussian_target)
from .scene_sim import rasterize_lidar_bev, render_camera_features, ray_smear_metric
from .tensor import LinearMap
from .view_transform import (VtParams, VtOutput, adaptive_project,
                             adaptive_sample, fuse_bev, vanilla_vt_output)

VT_MODES = ("asap", "as_only", "ap_only", "vanilla")
QUERY_INIT_MODES = ("mixed_groupwise", "mixed_instancewise", "learnable", "heatmap")


@dataclass(frozen=True)
class PipelineConfig:
    grid: BevGrid
    channels: int = 32
    n_heights: int = 4
    strides: tuple = (4, 8)
    image_size: tuple = (128, 128)
    n_cameras: int = 6
    groups: GroupSpec = field(default_factory=GroupSpec)
    n_points: int = 16
    n_layers: int = 6
    n_heads: int = 8
    pe_dim: int = 0  # 0: derive from channels
    vt_mode: str = "asap"
    query_init: str = "mixed_groupwise"
    attention_mode: str = "geometry_aware"

    def __post_init__(self):
        if self.vt_mode not in VT_MODES:
            raise ValueError(f"vt_mode must be one of {VT_MODES}")
        if self.query_init not in QUERY_INIT_MODES:
            raise ValueError(f"query_init must be one of {QUERY_INIT_MODES}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"attention_mode must be one of {ATTENTION_MODES}")
        if self.pe_dim == 0:
            object.__setattr__(self, "pe_dim", max(4, 4 * ((self.channels + 3) // 4)))

    @property
    def n_scales(self):
        return len(self.strides)


@dataclass(frozen=True)
class PipelineParams:
    vt: VtParams
    head: HeatmapHead
    group_embeds: GroupEmbeddings
    instance_embeds: object   # [n_queries, C]
    learnable_points: object  # [n_queries, 2] cell coords
    decoder: DecoderParams


def _init_linear(rng, out_dim, in_dim, scale):
    if scale == 0.0:
        return LinearMap.zeros(out_dim, in_dim)
    w = rng.normal(0.0, scale / np.sqrt(in_dim), size=(out_dim, in_dim))
    return LinearMap(w, np.zeros(out_dim))


def init_params(config: PipelineConfig, seed, scale=0.5) -> PipelineParams:
    """Seeded parameter initialization; scale=0 gives the all-zero model."""
    rng = np.random.default_rng(seed)
    C = config.channels
    n_h, n_s = config.n_heights, config.n_scales
    n_p = config.n_points
    k = config.groups.n_classes

    vt = VtParams(
        n_heights=n_h, n_scales=n_s,
        height_gen=_init_linear(rng, n_h, C, scale),
        weight_gen=_init_linear(rng, n_s * n_h, C, scale),
        kernel_gen=_init_linear(rng, C * C, C, scale),
        fuse=_init_linear(rng, C, 2 * C, scale),
        z_min=config.grid.z_range[0], z_max=config.grid.z_range[1])
    head = HeatmapHead(scorer=_init_linear(rng, k, C, scale))

    n_q = config.groups.n_queries
    if scale == 0.0:
        group_table = np.zeros((config.groups.n_groups, C))
        inst_table = np.zeros((n_q, C))
    else:
        group_table = rng.normal(0.0, scale, size=(config.groups.n_groups, C))
        inst_table = rng.normal(0.0, scale, size=(n_q, C))
    pts = np.stack([rng.uniform(0, config.grid.width - 1, size=n_q),
                    rng.uniform(0, config.grid.height - 1, size=n_q)], axis=1)

    dec = DecoderParams(
        n_layers=config.n_layers, n_points=n_p, n_heads=config.n_heads,
        pe_dim=config.pe_dim,
        offset_gen=_init_linear(rng, 2 * n_p, C, scale),
        point_weight_gen=_init_linear(rng, n_p, C, scale),
        deform_out_proj=_init_linear(rng, C, C, scale),
        pos_embed_proj=_init_linear(rng, C, config.pe_dim, scale),
        channel_mix_gen=_init_linear(rng, C * C, C, scale),
        spatial_mix_gen=_init_linear(rng, n_p * n_p, C, scale),
        out_proj=_init_linear(rng, C, n_p * C, scale),
        self_attn=tuple(
            AttentionParams(_init_linear(rng, C, C, scale),
                            _init_linear(rng, C, C, scale),
                            _init_linear(rng, C, C, scale),
                            _init_linear(rng, C, C, scale))
            for _ in range(config.n_layers)),
        cross_attn=AttentionParams(_init_linear(rng, C, C, scale),
                                   _init_linear(rng, C, C, scale),
                                   _init_linear(rng, C, C, scale),
                                   _init_linear(rng, C, C, scale)),
        ffn1=_init_linear(rng, 2 * C, C, scale),
        ffn2=_init_linear(rng, C, 2 * C, scale),
        reg_head=_init_linear(rng, 8, C, scale),
        cls_head=_init_linear(rng, k, C, scale))
    return PipelineParams(vt=vt, head=head,
                          group_embeds=GroupEmbeddings(group_table),
                          instance_embeds=inst_table,
                          learnable_points=pts, decoder=dec)


def vanilla_heights(grid: BevGrid, n_heights):
    """Cell-independent baseline heights, evenly spread over the z-range
    (bin centers; the midpoint for a single height)."""
    k = np.arange(n_heights)
    return grid.z_range[0] + (k + 0.5) * grid.z_span / n_heights


def _run_vt(config: PipelineConfig, params: PipelineParams, lidar, pyramids,
            cams, n_threads=1, cached_vanilla=None):
    """Camera-branch BEV map per the configured mode, plus diagnostics.

    cached_vanilla: a precomputed VtOutput for the parameter-independent
    vanilla sampling stage (it is constant across fitting steps).
    """
    grid = config.grid
    mode = config.vt_mode
    if mode in ("asap", "as_only"):
        diag = adaptive_sample(params.vt, lidar, pyramids, cams, grid,
                               n_threads=n_threads)
    elif cached_vanilla is not None:
        diag = cached_vanilla
    else:
        fixed = vanilla_heights(grid, config.n_heights)
        diag = vanilla_vt_output(pyramids, cams, grid, fixed,
                                 n_threads=n_threads)
    if mode in ("asap", "ap_only"):
        bev_camera = adaptive_project(params.vt, diag.bev, lidar)
    else:
        bev_camera = diag.bev
    return bev_camera, diag


def _query_features(config: PipelineConfig, params: PipelineParams,
                    bev_fuse, heatmaps):
    """Query features [Nq, C], reference points [Nq, 2], and group ids,
    per the configured initialization mode."""
    spec = config.groups
    k = spec.queries_per_group
    group_ids = np.repeat(np.arange(spec.n_groups), k)

    if config.query_init == "learnable":
        ref = val(params.learnable_points).copy()
        return params.instance_embeds, ref, group_ids

    kps = topk_keypoints(val(heatmaps), spec)
    ref = np.concatenate([pos for pos, _ in kps], axis=0)

    if config.query_init == "mixed_groupwise":
        feats = ad.getitem(params.group_embeds.table, (group_ids,))
    elif config.query_init == "mixed_instancewise":
        feats = params.instance_embeds
    else:  # heatmap: raw bilinear feature sampling at the keypoints
        from .decoder import corner_sample
        feats = corner_sample(bev_fuse, ref)
    return feats, ref, group_ids


@dataclass
class DetectionOutput:
    """Per-layer predictions of one forward pass; the last layer is final."""

    ref_points: np.ndarray
    group_ids: np.ndarray
    layers: list  # dicts: enc [Nq,8], cls_probs [Nq,K], boxes (state arrays)

    @property
    def n_layers(self):
        return len(self.layers)

    @property
    def final(self):
        return self.layers[-1]

    def to_json_dict(self, grid: BevGrid):
        out = []
        for li, layer in enumerate(self.layers):
            boxes = layer["boxes"]
            preds = []
            for qi in range(self.ref_points.shape[0]):
                u, vv = boxes["xc"][qi], boxes["yc"][qi]
                x = grid.x_range[0] + (u + 0.5) * grid.cell_size_x
                y = grid.y_range[0] + (vv + 0.5) * grid.cell_size_y
                preds.append({
                    "query": int(qi),
                    "group": int(self.group_ids[qi]),
                    "box": {"x": float(x), "y": float(y),
                            "z": float(boxes["z"][qi]),
                            "l": float(boxes["l"][qi]),
                            "w": float(boxes["w"][qi]),
                            "h": float(boxes["h"][qi]),
                            "yaw": float(boxes["yaw"][qi])},
                    "scores": [float(s) for s in layer["cls_probs"][qi]],
                })
            out.append({"layer": li, "final": li == len(self.layers) - 1,
                        "predictions": preds})
        return out


def forward(config: PipelineConfig, params: PipelineParams, scene,
            n_threads=1):
    """Full pipeline on one scene.

    Returns (DetectionOutput, VtOutput, extras) where extras carries the
    intermediate maps and per-stage wall times.
    """
    grid = config.grid
    extras = {}
    t0 = time.perf_counter()
    lidar = rasterize_lidar_bev(scene, grid)
    pyramids = render_camera_features(scene, grid, config.strides)
    t_scene = time.perf_counter()

    bev_camera, diag = _run_vt(config, params, lidar, pyramids, scene.cameras,
                               n_threads=n_threads)
    t_vt = time.perf_counter()
    bev_fuse = fuse_bev(params.vt, bev_camera, lidar)
    t_fuse = time.perf_counter()

    heatmaps = None
    if config.query_init != "learnable":
        heatmaps = predict_heatmaps(params.head, bev_fuse)
    feats, ref, group_ids = _query_features(config, params, bev_fuse, heatmaps)
    t_select = time.perf_counter()

    layers = run_decoder(feats, ref, bev_fuse, params.decoder, grid,
                         mode=config.attention_mode)
    t_decoder = time.perf_counter()

    out_layers = []
    for layer in layers:
        probs = 1.0 / (1.0 + np.exp(-val(layer["cls"])))
        out_layers.append({"enc": val(layer["enc"]), "cls_probs": probs,
                           "boxes": layer["boxes"]})
    det = DetectionOutput(ref_points=ref, group_ids=group_ids, layers=out_layers)

    extras["lidar"] = lidar
    extras["bev_camera"] = val(bev_camera)
    extras["bev_fuse"] = val(bev_fuse)
    extras["heatmaps"] = None if heatmaps is None else val(heatmaps)
    extras["stage_times"] = {
        "vt": t_vt - t_scene, "fuse": t_fuse - t_vt,
        "select": t_select - t_fuse, "decoder": t_decoder - t_select,
        "scene_gen": t_scene - t0,
    }
    return det, diag, extras


# ---------------------------------------------------------------------------
# fitting


def greedy_match(pred_centers, gt_centers):
    """Nearest-center greedy matching: pairs sorted by distance, each side
    used at most once. Returns a list of (query_idx, gt_idx)."""
    if len(gt_centers) == 0 or len(pred_centers) == 0:
        return []
    d = np.linalg.norm(pred_centers[:, None, :] - gt_centers[None, :, :], axis=2)
    order = np.argsort(d, axis=None, kind="stable")
    used_q, used_g, pairs = set(), set(), []
    for flat in order:
        qi, gi = divmod(int(flat), d.shape[1])
        if qi in used_q or gi in used_g:
            continue
        pairs.append((qi, gi))
        used_q.add(qi)
        used_g.add(gi)
        if len(used_g) == d.shape[1]:
            break
    return pairs


def _scene_constants(config: PipelineConfig, scene):
    """Everything about a scene that is constant across fitting steps."""
    grid = config.grid
    lidar = rasterize_lidar_bev(scene, grid)
    pyramids = render_camera_features(scene, grid, config.strides)
    targets, _ = gaussian_target(scene.boxes, grid, config.groups.n_classes)
    C = scene.channels
    occ = lidar[C - 1].ravel() > 0.5
    occ_idx = np.nonzero(occ)[0]
    z_true = lidar[C - 2].ravel()[occ_idx]
    gt_cells = np.array([world_to_cell(grid, b.center[0], b.center[1])
                         for b in scene.boxes]).reshape(-1, 2)
    return {"scene": scene, "lidar": lidar, "pyramids": pyramids,
            "heatmap_targets": targets, "occ_idx": occ_idx, "z_true": z_true,
            "gt_cells": gt_cells}


def _lidar_flat(lidar):
    C = lidar.shape[0]
    return lidar.reshape(C, -1).T


def _scene_losses(config: PipelineConfig, params: PipelineParams, consts,
                  weights):
    """Loss components for one scene; omitted components are skipped."""
    grid = config.grid
    scene = consts["scene"]
    losses = {}

    if weights.get("height", 0.0) > 0 and len(consts["occ_idx"]):
        from .view_transform import _heights_from_raw
        from .tensor import linear_apply
        rows = _lidar_flat(consts["lidar"])[consts["occ_idx"]]
        raw = linear_apply(params.vt.height_gen, rows)
        h = _heights_from_raw(raw, params.vt.z_min, params.vt.z_max)
        diff = ad.absolute(ad.sub(h, consts["z_true"][:, None]))
        losses["height"] = ad.mean(diff)

    need_fuse = weights.get("heatmap", 0.0) > 0 or weights.get("box", 0.0) > 0
    if not need_fuse:
        return losses

    bev_camera, _diag = _run_vt(config, params, consts["lidar"],
                                consts["pyramids"], scene.cameras)
    bev_fuse = fuse_bev(params.vt, bev_camera, consts["lidar"])
    heatmaps = predict_heatmaps(params.head, bev_fuse)

    if weights.get("heatmap", 0.0) > 0:
        losses["heatmap"] = gaussian_focal_loss(heatmaps, consts["heatmap_targets"])

    if weights.get("box", 0.0) > 0 and len(scene.boxes):
        feats, ref, _gids = _query_features(config, params, bev_fuse, heatmaps)
        layers = run_decoder(feats, ref, bev_fuse, params.decoder, grid,
                             mode=config.attention_mode)
        per_layer = []
        for layer in layers:
            boxes = layer["boxes"]
            centers = np.stack([boxes["xc"], boxes["yc"]], axis=1)
            pairs = greedy_match(centers, consts["gt_cells"])
            if not pairs:
                continue
            q_idx = [q for q, _ in pairs]
            tgt = np.stack([
                encode_box(consts["gt_cells"][g], scene.boxes[g].center[2],
                           scene.boxes[g].dims, scene.boxes[g].yaw,
                           (ref[q][0], ref[q][1]))
                for q, g in pairs])
            pred_rows = ad.getitem(layer["enc"], (np.array(q_idx),))
            per_layer.append(l1_encoded(pred_rows, tgt))
        if per_layer:
            acc = per_layer[0]
            for term in per_layer[1:]:
                acc = ad.add(acc, term)
            losses["box"] = ad.div(acc, float(len(per_layer)))

    return losses


@dataclass
class FitResult:
    params: PipelineParams
    curve: list  # dicts: step, total, and per-component values
    monotone_trend_ok: bool


def fit_generators(config: PipelineConfig, params: PipelineParams, scenes,
                   steps, lr, loss_weights=None, batch_size=None,
                   lr_half_life=None) -> FitResult:
    """Plain gradient descent of the pipeline generators on synthetic scenes.

    loss_weights: {"heatmap": w, "box": w, "height": w}; zero disables a
    component (and its forward stages). lr_half_life, when set, decays the
    step size as lr / (1 + step / half_life), which removes the limit cycle
    constant-step descent exhibits on L1 terms. Scenes are visited in fixed
    round-robin batches, so runs are deterministic. Raises RuntimeError on
    divergence (total loss above 1e6 or non-finite).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    weights = {"heatmap": 1.0, "box": 1.0, "height": 1.0}
    if loss_weights is not None:
        weights.update(loss_weights)

    consts = [_scene_constants(config, s) for s in scenes]
    lifted, train_vars = ad.lift_tree(params)
    n = len(scenes)
    bs = n if batch_size is None else min(batch_size, n)

    curve = []
    for step in range(steps):
        idx = [(step * bs + j) % n for j in range(bs)]
        total = None
        comps = {k: 0.0 for k in weights}
        for i in idx:
            losses = _scene_losses(config, lifted, consts[i], weights)
            for key, term in losses.items():
                comps[key] += float(val(term)) / len(idx)
                w_term = ad.mul(term, weights[key] / len(idx))
                total = w_term if total is None else ad.add(total, w_term)
        total_val = float(val(total)) if total is not None else 0.0
        if not np.isfinite(total_val) or total_val > 1e6:
            raise RuntimeError(
                f"fit diverged at step {step}: total loss {total_val}")
        if isinstance(total, ad.Var):
            total.backward()
            step_lr = lr if lr_half_life is None else lr / (1.0 + step / lr_half_life)
            ad.sgd_step(train_vars, step_lr)
        curve.append({"step": step, "total": total_val, **comps})

    # trend check: every later 50-step window must stay within slack of the
    # best window so far (2% relative plus 1% of the starting level, which
    # tolerates jitter at the convergence floor)
    totals = np.array([c["total"] for c in curve])
    window = 50
    ok = True
    if totals.size >= 2 * window:
        means = [totals[i:i + window].mean()
                 for i in range(0, totals.size - window + 1, window)]
        best = means[0]
        for m in means[1:]:
            if m > best * 1.02 + 0.01 * means[0]:
                ok = False
            best = min(best, m)
    return FitResult(params=ad.unlift_tree(lifted), curve=curve,
                     monotone_trend_ok=ok)


def write_loss_curve_csv(path, curve):
    keys = list(curve[0].keys()) if curve else ["step", "total"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(curve)


# ---------------------------------------------------------------------------
# held-out evaluation helpers


def eval_heatmap_loss(config: PipelineConfig, params: PipelineParams, scene):
    """Gaussian-focal heatmap loss of the fitted model on one scene."""
    consts = _scene_constants(config, scene)
    losses = _scene_losses(config, params, consts, {"heatmap": 1.0})
    return float(val(losses["heatmap"]))


def eval_ray_smear(config: PipelineConfig, params: PipelineParams, scene):
    """Energy concentration of the camera-branch BEV map on one scene."""
    consts = _scene_constants(config, scene)
    bev_camera, _ = _run_vt(config, params, consts["lidar"], consts["pyramids"],
                            scene.cameras)
    return ray_smear_metric(val(bev_camera), scene, config.grid)


def eval_box_l1(config: PipelineConfig, params: PipelineParams, scene):
    """Mean final-layer encoded-space L1 over greedily matched boxes."""
    det, _diag, _extras = forward(config, params, scene)
    boxes = det.final["boxes"]
    centers = np.stack([boxes["xc"], boxes["yc"]], axis=1)
    consts = _scene_constants(config, scene)
    pairs = greedy_match(centers, consts["gt_cells"])
    if not pairs:
        return float("nan")
    vals = []
    for q, g in pairs:
        tgt = encode_box(consts["gt_cells"][g], scene.boxes[g].center[2],
                         scene.boxes[g].dims, scene.boxes[g].yaw,
                         (det.ref_points[q][0], det.ref_points[q][1]))
        vals.append(np.mean(np.abs(det.final["enc"][q] - tgt)))
    return float(np.mean(vals))
