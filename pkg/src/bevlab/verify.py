"""Verification suites behind the `verify` CLI command.

oracle: naive reimplementations (scalar loops, full sorts) checked against
        the vectorized modules.
grad:   analytic gradients of every differentiable path checked against
        central finite differences at small configs.
props:  algebraic invariants (softmax pooling, rotation equivariance,
        residual identity, determinism).

Each check returns (name, passed, detail); the CLI prints the table.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import autodiff as ad
from .autodiff import val
from .decoder import (AttentionParams, DecoderParams, decoder_layer,
                      focal_loss, gaussian_focal_loss, l1_encoded,
                      _corner_points_batch, _initial_state,
                      _position_aware_mix_batch, corner_sample)
from .geometry import BevGrid, FeaturePyramid, cell_to_world, project_to_image
from .query_select import GroupSpec, HeatmapHead, predict_heatmaps, topk_keypoints
from .scene_sim import SceneConfig, make_scene, rasterize_lidar_bev
from .tensor import LinearMap, bilinear_sample, finite_diff_grad, layer_norm, softmax
from .view_transform import (VtParams, adaptive_project, adaptive_sample,
                             fuse_bev, vanilla_vt)


# ---------------------------------------------------------------------------
# naive oracles


def naive_adaptive_sample(params: VtParams, lidar, pyramids, cams, grid):
    """Quadruple-loop reimplementation of the adaptive sampler, built from
    the scalar primitives only."""
    lidar = np.asarray(val(lidar))
    C, H, W = lidar.shape
    n_h, n_s = params.n_heights, params.n_scales
    mid = 0.5 * (params.z_min + params.z_max)
    half = 0.5 * (params.z_max - params.z_min)
    hw, hb = val(params.height_gen.weight), val(params.height_gen.bias)
    ww, wb = val(params.weight_gen.weight), val(params.weight_gen.bias)
    out = np.zeros((C, H, W))
    for v in range(H):
        for u in range(W):
            feat = lidar[:, v, u]
            z = mid + np.tanh(hw @ feat + hb) * half
            logits = ww @ feat + wb
            e = np.exp(logits - logits.max())
            wts = e / e.sum()
            X, Y = cell_to_world(grid, u, v)
            acc = np.zeros(C)
            for j in range(n_s):
                for i in range(n_h):
                    ssum = np.zeros(C)
                    cnt = 0
                    for cam, pyr in zip(cams, pyramids):
                        x, y, ok = project_to_image(cam, (X, Y, z[i]))
                        if not ok:
                            continue
                        stride, fmap = pyr.levels[j]
                        f, okb = bilinear_sample(np.asarray(val(fmap)),
                                                 (x / stride, y / stride))
                        if not okb:
                            continue
                        ssum = ssum + f
                        cnt += 1
                    acc = acc + wts[j * n_h + i] * (ssum / max(cnt, 1))
            out[:, v, u] = acc
    return out


def naive_topk(heatmaps, spec: GroupSpec):
    """Full-sort top-k with explicitly looped 3x3 suppression."""
    hm = np.asarray(val(heatmaps))
    _, H, W = hm.shape
    results = []
    for group in spec.groups:
        gmap = np.max(np.stack([hm[c] for c in group]), axis=0)
        cells = []
        for v in range(H):
            for u in range(W):
                suppressed = False
                for dv in (-1, 0, 1):
                    for du in (-1, 0, 1):
                        if dv == 0 and du == 0:
                            continue
                        nv, nu = v + dv, u + du
                        if 0 <= nv < H and 0 <= nu < W and gmap[v, u] < gmap[nv, nu]:
                            suppressed = True
                cells.append((suppressed, -gmap[v, u], v * W + u, u, v))
        cells.sort()
        top = cells[:spec.queries_per_group]
        pos = np.array([[float(c[3]), float(c[4])] for c in top])
        scores = np.array([-c[1] for c in top])
        results.append((pos, scores))
    return results


def naive_gaussian_target(boxes, grid, n_classes):
    """Cell-by-cell loop version of the Gaussian heatmap targets."""
    from .geometry import world_to_cell

    H, W = grid.height, grid.width
    out = np.zeros((n_classes, H, W))
    for box in boxes:
        u, v = world_to_cell(grid, box.center[0], box.center[1])
        u0, v0 = int(round(u)), int(round(v))
        if not (0 <= u0 < W and 0 <= v0 < H):
            continue
        sigma = max(1.0, min(box.dims[0], box.dims[1]) / (3.0 * grid.cell_size_x))
        for vv in range(H):
            for uu in range(W):
                g = math.exp(-((uu - u0) ** 2 + (vv - v0) ** 2) / (2 * sigma ** 2))
                out[box.class_id, vv, uu] = max(out[box.class_id, vv, uu], g)
    return out


# ---------------------------------------------------------------------------
# fixture builders


def _rand_linear(rng, out_dim, in_dim, scale=0.6):
    return LinearMap(rng.normal(0, scale / np.sqrt(in_dim), (out_dim, in_dim)),
                     rng.normal(0, 0.1, out_dim))


def random_vt_instance(rng, C=None, H=None, n_h=None, n_s=None, n_cams=2):
    """A random small view-transform problem with dense pyramids."""
    C = int(rng.integers(2, 9)) if C is None else C
    H = int(rng.integers(4, 17)) if H is None else H
    n_h = int(rng.integers(1, 5)) if n_h is None else n_h
    n_s = int(rng.integers(1, 3)) if n_s is None else n_s
    grid = BevGrid((-8.0, 8.0), (-8.0, 8.0), (-3.0, 3.0), (H, H))
    params = VtParams(
        n_heights=n_h, n_scales=n_s,
        height_gen=_rand_linear(rng, n_h, C),
        weight_gen=_rand_linear(rng, n_s * n_h, C),
        kernel_gen=_rand_linear(rng, C * C, C),
        fuse=_rand_linear(rng, C, 2 * C),
        z_min=grid.z_range[0], z_max=grid.z_range[1])
    lidar = rng.normal(size=(C, H, H))
    from .scene_sim import camera_ring

    img = 32
    cams = camera_ring(n_cams, (img, img), 80.0, 1.5)
    strides = (2, 4)[:n_s]
    pyramids = []
    for _ in cams:
        levels = tuple((s, rng.normal(size=(C, img // s, img // s)))
                       for s in strides)
        pyramids.append(FeaturePyramid(levels))
    return params, lidar, pyramids, cams, grid


def _tiny_decoder_params(rng, C=4, n_p=4, n_layers=1, n_heads=2, n_classes=3):
    return DecoderParams(
        n_layers=n_layers, n_points=n_p, n_heads=n_heads, pe_dim=4,
        offset_gen=_rand_linear(rng, 2 * n_p, C),
        point_weight_gen=_rand_linear(rng, n_p, C),
        deform_out_proj=_rand_linear(rng, C, C),
        pos_embed_proj=_rand_linear(rng, C, 4),
        channel_mix_gen=_rand_linear(rng, C * C, C),
        spatial_mix_gen=_rand_linear(rng, n_p * n_p, C),
        out_proj=_rand_linear(rng, C, n_p * C),
        self_attn=tuple(AttentionParams(*(_rand_linear(rng, C, C) for _ in range(4)))
                        for _ in range(n_layers)),
        cross_attn=AttentionParams(*(_rand_linear(rng, C, C) for _ in range(4))),
        ffn1=_rand_linear(rng, 2 * C, C),
        ffn2=_rand_linear(rng, C, 2 * C),
        reg_head=_rand_linear(rng, 8, C),
        cls_head=_rand_linear(rng, n_classes, C))


def _gradcheck_tree(build_loss, params_obj, extra_arrays=None, eps=1e-6,
                    rtol=1e-4):
    """Check every ndarray leaf of a parameter dataclass (plus extra named
    arrays) against finite differences. build_loss(params, extras) -> scalar.
    Returns the worst relative error."""
    extra_arrays = extra_arrays or {}
    lifted, tvars = ad.lift_tree(params_obj)
    extras_v = {k: ad.Var(v, requires_grad=True) for k, v in extra_arrays.items()}
    out = build_loss(lifted, extras_v)
    out.backward()

    leaves = []

    def collect(obj, path):
        if isinstance(obj, ad.Var):
            leaves.append((path, obj))
        elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            for f in dataclasses.fields(obj):
                collect(getattr(obj, f.name), f"{path}.{f.name}")
        elif isinstance(obj, (list, tuple)):
            for i, x in enumerate(obj):
                collect(x, f"{path}[{i}]")

    collect(lifted, "params")
    worst = 0.0
    for path, leaf in leaves + [(k, v) for k, v in extras_v.items()]:
        base = leaf.data.copy()

        def f(x, _leaf=leaf):
            keep = _leaf.data
            _leaf.data = x
            try:
                probe = {k: v for k, v in extras_v.items()}
                return float(val(build_loss(lifted, probe)))
            finally:
                _leaf.data = keep

        num = finite_diff_grad(f, base, eps)
        ana = leaf.grad if leaf.grad is not None else np.zeros_like(base)
        scale = max(float(np.max(np.abs(num))), 1e-8)
        err = float(np.max(np.abs(ana - num)) / scale)
        if err >= rtol:
            raise AssertionError(f"{path}: gradient rel err {err:.3e} >= {rtol}")
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# suites


def _run_checks(checks):
    results = []
    for name, fn in checks:
        try:
            detail = fn()
            results.append((name, True, detail if isinstance(detail, str) else "ok"))
        except Exception as exc:  # a failed check, not a crash of the suite
            results.append((name, False, f"{type(exc).__name__}: {exc}"))
    return results


def run_oracle_suite(seed=0, n_instances=8):
    rng = np.random.default_rng(seed)

    def vt_equivalence():
        worst = 0.0
        for _ in range(n_instances):
            params, lidar, pyramids, cams, grid = random_vt_instance(rng)
            fast = val(adaptive_sample(params, lidar, pyramids, cams, grid).bev)
            slow = naive_adaptive_sample(params, lidar, pyramids, cams, grid)
            worst = max(worst, float(np.max(np.abs(fast - slow))))
        assert worst < 1e-12, f"max deviation {worst:.3e}"
        return f"max deviation {worst:.2e} over {n_instances} instances"

    def bilinear_vectorized():
        fmap = rng.normal(size=(3, 9, 11))
        xs = rng.uniform(-2, 12, size=60)
        ys = rng.uniform(-2, 10, size=60)
        fast, valid = ad.bilinear_gather(fmap, xs, ys)
        for i in range(60):
            ref, ok = bilinear_sample(fmap, (xs[i], ys[i]))
            assert ok == bool(valid[i])
            assert np.max(np.abs(fast[i] - ref)) < 1e-12
        return "60 points"

    def topk_matches():
        spec = GroupSpec(((0,), (1, 2)), 5)
        for _ in range(20):
            hm = rng.uniform(size=(3, 12, 12))
            fast = topk_keypoints(hm, spec)
            slow = naive_topk(hm, spec)
            for (fp, fs), (sp, ss) in zip(fast, slow):
                assert np.array_equal(fp, sp) and np.allclose(fs, ss)
        return "20 heatmaps"

    def gaussian_targets_match():
        from .query_select import gaussian_target

        grid = BevGrid((-8.0, 8.0), (-8.0, 8.0), (-3.0, 3.0), (16, 16))
        scene = make_scene(SceneConfig(grid=grid, channels=4, n_boxes=4,
                                       image_size=(32, 32), strides=(4,),
                                       n_cameras=2, fixed_dims=(3.0, 1.5, 1.5)),
                           seed=int(rng.integers(1000)))
        fast, _ = gaussian_target(scene.boxes, grid, 10)
        slow = naive_gaussian_target(scene.boxes, grid, 10)
        assert np.max(np.abs(fast - slow)) < 1e-12
        return "ok"

    return _run_checks([
        ("oracle.vt_equivalence", vt_equivalence),
        ("oracle.bilinear_vectorized", bilinear_vectorized),
        ("oracle.topk", topk_matches),
        ("oracle.gaussian_target", gaussian_targets_match),
    ])


def run_grad_suite(seed=0):
    rng = np.random.default_rng(seed)
    grid = BevGrid((-8.0, 8.0), (-8.0, 8.0), (-3.0, 3.0), (8, 8))

    def as_path():
        params, lidar, pyramids, cams, g = random_vt_instance(
            rng, C=4, H=8, n_h=2, n_s=2)

        def loss(p, extras):
            pyr = [FeaturePyramid(((pyramids[0].strides[0], extras["f0"]),
                                   (pyramids[0].strides[1], extras["f1"]))),
                   pyramids[1]]
            out = adaptive_sample(p, extras["lidar"], pyr, cams, g)
            return ad.sum_(ad.mul(out.bev, 0.3))

        worst = _gradcheck_tree(
            loss, params,
            {"lidar": lidar, "f0": val(pyramids[0].levels[0][1]),
             "f1": val(pyramids[0].levels[1][1])})
        return f"worst rel err {worst:.2e}"

    def ap_and_fuse_path():
        params, lidar, pyramids, cams, g = random_vt_instance(
            rng, C=4, H=8, n_h=2, n_s=1)
        bev_as = rng.normal(size=(4, 8, 8))

        def loss(p, extras):
            cam_bev = adaptive_project(p, extras["bev_as"], extras["lidar"])
            fused = fuse_bev(p, cam_bev, extras["lidar"])
            return ad.sum_(ad.mul(fused, 0.2))

        worst = _gradcheck_tree(loss, params, {"bev_as": bev_as, "lidar": lidar})
        return f"worst rel err {worst:.2e}"

    def heatmap_path():
        head = HeatmapHead(_rand_linear(rng, 3, 4))
        fuse = rng.normal(size=(4, 6, 6))
        target = np.zeros((3, 6, 6))
        target[0, 2, 3] = 1.0
        target[1, 4, 1] = 1.0

        def loss(p, extras):
            return gaussian_focal_loss(predict_heatmaps(p, extras["fuse"]), target)

        worst = _gradcheck_tree(loss, head, {"fuse": fuse})
        return f"worst rel err {worst:.2e}"

    def decoder_layer_path():
        params = _tiny_decoder_params(rng)
        feats = rng.normal(size=(3, 4))
        bev = rng.normal(size=(4, 8, 8))
        ref = rng.uniform(2, 6, size=(3, 2))
        boxes = {"xc": ref[:, 0] + rng.normal(0, 0.3, 3),
                 "yc": ref[:, 1] + rng.normal(0, 0.3, 3),
                 "z": rng.normal(0, 0.5, 3), "l": rng.uniform(1, 3, 3),
                 "w": rng.uniform(0.5, 1.5, 3), "h": rng.uniform(1, 2, 3),
                 "yaw": rng.uniform(-2, 2, 3)}

        def loss(p, extras):
            box_vars = {k: extras[f"box_{k}"] for k in ("l", "w", "yaw")}
            box_vars.update({k: boxes[k] for k in ("xc", "yc", "z", "h")})
            pts, _ = _corner_points_batch(extras["feats"], box_vars, p, grid)
            sampled = corner_sample(extras["bev"], pts)
            out = _position_aware_mix_batch(extras["feats"], sampled, pts, p, grid)
            return ad.sum_(ad.mul(out, 0.1))

        worst = _gradcheck_tree(
            loss, params,
            {"feats": feats, "bev": bev, "box_l": boxes["l"],
             "box_w": boxes["w"], "box_yaw": boxes["yaw"]})
        return f"worst rel err {worst:.2e}"

    def full_layer_path():
        params = _tiny_decoder_params(rng)
        feats = rng.normal(size=(2, 4))
        bev = rng.normal(size=(4, 8, 8))
        ref = np.array([[3.0, 3.5], [5.0, 4.0]])
        state = _initial_state(ref)

        def loss(p, extras):
            new_feats, enc, cls, _ = decoder_layer(
                extras["feats"], ref, state, extras["bev"], p, 0, grid)
            return ad.add(ad.sum_(ad.mul(enc, 0.2)),
                          ad.add(ad.sum_(ad.mul(cls, 0.1)),
                                 ad.sum_(ad.mul(new_feats, 0.05))))

        worst = _gradcheck_tree(loss, params, {"feats": feats, "bev": bev})
        return f"worst rel err {worst:.2e}"

    def loss_paths():
        logits = rng.normal(size=(6, 3))
        labels = rng.integers(0, 3, size=6)
        hm = 1 / (1 + np.exp(-rng.normal(size=(2, 5, 5))))
        tgt = np.zeros((2, 5, 5))
        tgt[0, 2, 2] = 1.0
        tgt[1, 1, 3] = 0.5
        enc_t = rng.normal(size=(4, 8))

        def focal_l(_p, extras):
            return focal_loss(extras["logits"], labels)

        def gf_l(_p, extras):
            return gaussian_focal_loss(extras["hm"], tgt)

        def l1_l(_p, extras):
            return l1_encoded(extras["enc"], enc_t)

        dummy = LinearMap.zeros(1, 1)
        w1 = _gradcheck_tree(focal_l, dummy, {"logits": logits})
        w2 = _gradcheck_tree(gf_l, dummy, {"hm": hm})
        w3 = _gradcheck_tree(l1_l, dummy, {"enc": rng.normal(size=(4, 8)) + 0.1})
        return f"worst rel errs {max(w1, w2, w3):.2e}"

    return _run_checks([
        ("grad.adaptive_sampling_incl_heights", as_path),
        ("grad.adaptive_projection_fusion", ap_and_fuse_path),
        ("grad.heatmap_head", heatmap_path),
        ("grad.corner_offsets_position_mixing", decoder_layer_path),
        ("grad.full_decoder_layer", full_layer_path),
        ("grad.losses", loss_paths),
    ])


def run_props_suite(seed=0):
    rng = np.random.default_rng(seed)

    def softmax_props():
        for _ in range(1000):
            v = rng.normal(size=int(rng.integers(1, 10))) * 8
            out = softmax(v)
            assert abs(out.sum() - 1.0) < 1e-12
            assert np.allclose(out, softmax(v + rng.normal() * 3), atol=1e-12)
        return "1000 trials"

    def layer_norm_props():
        # scaled to sample variance >= 25 so the 1e-5 epsilon guard stays
        # below the 1e-6 variance tolerance
        for _ in range(200):
            v = rng.normal(size=int(rng.integers(4, 40)))
            v = v / v.std() * rng.uniform(5, 20)
            out = layer_norm(v)
            assert abs(out.mean()) < 1e-9 and abs(out.var() - 1.0) < 1e-6
        return "200 trials"

    def pooling_weights_sum():
        params, lidar, pyramids, cams, grid = random_vt_instance(
            rng, C=4, H=8, n_h=3, n_s=2)
        out = adaptive_sample(params, lidar, pyramids, cams, grid)
        sums = out.per_cell_weights.sum(axis=0)
        assert np.max(np.abs(sums - 1.0)) < 1e-9
        assert out.per_cell_weights.min() > 0 and out.per_cell_weights.max() < 1
        assert out.per_cell_heights.min() >= grid.z_range[0] - 1e-12
        assert out.per_cell_heights.max() <= grid.z_range[1] + 1e-12
        return "ok"

    def rotation_equivariance():
        params = _tiny_decoder_params(rng, n_p=8)
        grid = BevGrid((-16.0, 16.0), (-16.0, 16.0), (-3.0, 3.0), (32, 32))
        for _ in range(100):
            feat = rng.normal(size=(1, 4))
            l, w = rng.uniform(0.5, 6, size=2)
            theta = rng.uniform(-np.pi, np.pi)
            phi = rng.uniform(-np.pi, np.pi)
            base = {"xc": np.array([0.0]), "yc": np.array([0.0]),
                    "l": np.array([l]), "w": np.array([w]),
                    "yaw": np.array([theta])}
            rot = dict(base, yaw=np.array([theta + phi]))
            _, off1 = _corner_points_batch(feat, base, params, grid)
            _, off2 = _corner_points_batch(feat, rot, params, grid)
            c, s = math.cos(phi), math.sin(phi)
            R = np.array([[c, -s], [s, c]])
            rotated = val(off1)[0] @ R.T
            assert np.max(np.abs(val(off2)[0] - rotated)) < 1e-9
        return "100 trials"

    def residual_identity():
        rng2 = np.random.default_rng(seed + 1)
        params = _tiny_decoder_params(rng2, n_layers=6)
        zero = LinearMap.zeros
        params = dataclasses.replace(
            params,
            out_proj=zero(4, 16), ffn2=zero(4, 8),
            self_attn=tuple(dataclasses.replace(a, w_o=zero(4, 4))
                            for a in params.self_attn))
        feats = rng2.normal(size=(3, 4))
        bev = rng2.normal(size=(4, 8, 8))
        ref = rng2.uniform(2, 6, size=(3, 2))
        grid = BevGrid((-8.0, 8.0), (-8.0, 8.0), (-3.0, 3.0), (8, 8))
        from .decoder import run_decoder

        cur = feats.copy()
        state = _initial_state(ref)
        for li in range(6):
            cur, _, _, state = decoder_layer(cur, ref, state, bev, params,
                                             li, grid)
        assert np.array_equal(cur, feats)
        return "bit-identical through 6 layers"

    def engine_thread_determinism():
        params, lidar, pyramids, cams, grid = random_vt_instance(
            rng, C=4, H=8, n_h=2, n_s=2)
        a = val(adaptive_sample(params, lidar, pyramids, cams, grid,
                                n_threads=1).bev)
        b = val(adaptive_sample(params, lidar, pyramids, cams, grid,
                                n_threads=4).bev)
        assert np.array_equal(a, b)
        return "1 vs 4 threads bit-identical"

    return _run_checks([
        ("props.softmax", softmax_props),
        ("props.layer_norm", layer_norm_props),
        ("props.pooling_weights", pooling_weights_sum),
        ("props.rotation_equivariance", rotation_equivariance),
        ("props.residual_identity", residual_identity),
        ("props.thread_determinism", engine_thread_determinism),
    ])


def run_suites(which="all", seed=0):
    out = []
    if which in ("all", "oracle"):
        out.extend(run_oracle_suite(seed))
    if which in ("all", "grad"):
        out.extend(run_grad_suite(seed))
    if which in ("all", "props"):
        out.extend(run_props_suite(seed))
    return out
