"""Corner-aware sampling, position-aware mixing, decoder stack, and losses."""

import dataclasses
import math

import numpy as np
import pytest

from bevlab import autodiff as ad
from bevlab.autodiff import val
from bevlab.decoder import (AttentionParams, BoxPrediction, DecoderParams,
                            corner_offsets, corner_sample, decode_box,
                            decoder_layer, encode_box, focal_loss,
                            gaussian_focal_loss, l1_box_loss, l1_encoded,
                            position_aware_mix, run_decoder, self_attention,
                            _corner_points_batch, _initial_state)
from bevlab.geometry import BevGrid
from bevlab.query_select import ObjectQuery
from bevlab.scene_sim import Box
from bevlab.tensor import LinearMap, bilinear_sample, sinusoidal_encode
from helpers import gradcheck

# unit cells make the hand cases read directly in meters
GRID = BevGrid((-16.0, 16.0), (-16.0, 16.0), (-5.0, 3.0), (32, 32))


def tiny_params(rng=None, C=2, n_p=4, n_layers=1, n_heads=1, n_classes=2,
                scale=0.0):
    def lm(out_d, in_d):
        if scale == 0.0 or rng is None:
            return LinearMap.zeros(out_d, in_d)
        return LinearMap(rng.normal(0, scale / np.sqrt(in_d), (out_d, in_d)),
                         rng.normal(0, 0.1, out_d))

    return DecoderParams(
        n_layers=n_layers, n_points=n_p, n_heads=n_heads, pe_dim=4,
        offset_gen=lm(2 * n_p, C), point_weight_gen=lm(n_p, C),
        deform_out_proj=lm(C, C), pos_embed_proj=lm(C, 4),
        channel_mix_gen=lm(C * C, C), spatial_mix_gen=lm(n_p * n_p, C),
        out_proj=lm(C, n_p * C),
        self_attn=tuple(AttentionParams(lm(C, C), lm(C, C), lm(C, C), lm(C, C))
                        for _ in range(n_layers)),
        cross_attn=AttentionParams(lm(C, C), lm(C, C), lm(C, C), lm(C, C)),
        ffn1=lm(2 * C, C), ffn2=lm(C, 2 * C),
        reg_head=lm(8, C), cls_head=lm(n_classes, C))


class TestCornerOffsets:
    def test_layer_zero_degenerate(self, rng):
        # l = w = yaw = 0: points are the center plus the raw offsets
        raw = rng.normal(size=8)
        params = dataclasses.replace(
            tiny_params(), offset_gen=LinearMap(np.zeros((8, 2)), raw))
        q = ObjectQuery(np.zeros(2), (4.0, 6.0), 0)
        points, offsets = corner_offsets(q, params, GRID)
        assert np.allclose(offsets, raw.reshape(4, 2), atol=1e-15)
        assert np.allclose(points, raw.reshape(4, 2) + [4.0, 6.0], atol=1e-15)

    def test_first_corner_identity_rotation(self):
        params = tiny_params()
        q = ObjectQuery(np.zeros(2), (0.0, 0.0), 0,
                        box=(0.0, 0.0, 0.0, 2.0, 1.0, 0.0, 0.0))
        _, offsets = corner_offsets(q, params, GRID)
        assert np.allclose(offsets[0], [1.0, 0.5])

    def test_first_corner_quarter_turn(self):
        params = tiny_params()
        q = ObjectQuery(np.zeros(2), (0.0, 0.0), 0,
                        box=(0.0, 0.0, 0.0, 2.0, 1.0, 0.0, math.pi / 2))
        _, offsets = corner_offsets(q, params, GRID)
        assert np.allclose(offsets[0], [-0.5, 1.0], atol=1e-12)

    def test_corner_symmetry_all_sign_combinations(self):
        params = tiny_params()
        q = ObjectQuery(np.zeros(2), (0.0, 0.0), 0,
                        box=(0.0, 0.0, 0.0, 3.0, 1.5, 0.0, 0.0))
        _, offsets = corner_offsets(q, params, GRID)
        expect = {(1.5, 0.75), (1.5, -0.75), (-1.5, 0.75), (-1.5, -0.75)}
        got = {tuple(np.round(o, 9)) for o in offsets}
        assert got == expect

    def test_rotation_equivariance(self, rng):
        params = dataclasses.replace(
            tiny_params(), offset_gen=LinearMap(np.zeros((8, 2)),
                                                rng.normal(size=8)))
        for _ in range(100):
            l, w = rng.uniform(0.5, 8, size=2)
            theta = rng.uniform(-np.pi, np.pi)
            phi = rng.uniform(-np.pi, np.pi)
            q1 = ObjectQuery(np.zeros(2), (0.0, 0.0), 0,
                             box=(0.0, 0.0, 0.0, l, w, 0.0, theta))
            q2 = ObjectQuery(np.zeros(2), (0.0, 0.0), 0,
                             box=(0.0, 0.0, 0.0, l, w, 0.0, theta + phi))
            _, o1 = corner_offsets(q1, params, GRID)
            _, o2 = corner_offsets(q2, params, GRID)
            c, s = math.cos(phi), math.sin(phi)
            rotated = o1 @ np.array([[c, -s], [s, c]]).T
            assert np.max(np.abs(o2 - rotated)) < 1e-9

    def test_metric_to_cell_conversion(self):
        # half-meter cells double the corner extent in cell units
        fine = BevGrid((-8.0, 8.0), (-8.0, 8.0), (-5.0, 3.0), (32, 32))
        params = tiny_params()
        q = ObjectQuery(np.zeros(2), (0.0, 0.0), 0,
                        box=(0.0, 0.0, 0.0, 2.0, 1.0, 0.0, 0.0))
        _, offsets = corner_offsets(q, params, fine)
        assert np.allclose(offsets[0], [2.0, 1.0])

    def test_gradient_through_rotation(self, rng):
        params = tiny_params(rng, scale=0.4)
        feats = rng.normal(size=(2, 2))
        base = {"xc": np.array([3.0, 4.0]), "yc": np.array([5.0, 2.0]),
                "l": rng.uniform(1, 3, 2), "w": rng.uniform(0.5, 2, 2),
                "yaw": rng.uniform(-2, 2, 2)}
        # asymmetric weights keep the l/w derivative from cancelling over
        # the symmetric corner signs
        wts = rng.normal(size=(2, 4, 2))

        def loss(t):
            boxes = dict(base, l=t["l"], w=t["w"], yaw=t["yaw"])
            pts, _offs = _corner_points_batch(t["feats"], boxes, params, GRID)
            return ad.sum_(ad.mul(pts, wts))

        gradcheck(loss, {"feats": feats, "l": base["l"], "w": base["w"],
                         "yaw": base["yaw"]})


class TestCornerSample:
    def test_lattice_point_exact(self, rng):
        bev = rng.normal(size=(3, 8, 8))
        out = val(corner_sample(bev, np.array([[2.0, 5.0]])))
        assert np.array_equal(out[0], bev[:, 5, 2])

    def test_outside_grid_zero(self, rng):
        bev = rng.normal(size=(3, 8, 8))
        out = val(corner_sample(bev, np.array([[-3.0, 1.0], [9.0, 1.0]])))
        assert np.all(out == 0)

    def test_matches_scalar_relookup(self, rng):
        bev = rng.normal(size=(4, 10, 10))
        pts = rng.uniform(-1, 10, size=(6, 4, 2))
        out = val(corner_sample(bev, pts))
        for i in range(6):
            for j in range(4):
                ref, _ = bilinear_sample(bev, tuple(pts[i, j]))
                assert np.max(np.abs(out[i, j] - ref)) < 1e-15


class TestPositionAwareMix:
    def test_zero_out_proj_is_identity(self, rng):
        params = tiny_params(rng, scale=0.5)
        params = dataclasses.replace(params, out_proj=LinearMap.zeros(2, 8))
        q = rng.normal(size=2)
        out = position_aware_mix(q, rng.normal(size=(4, 2)),
                                 rng.uniform(0, 30, size=(4, 2)), params, GRID)
        assert np.array_equal(val(out), q)

    def test_hand_computed_identity_mixers(self, rng):
        # W_c = I, W_s = I, no position term: the mixing pipeline reduces to
        # two layer norms with relu, scripted here step by step
        C, n_p = 2, 4
        params = tiny_params()
        params = dataclasses.replace(
            params,
            channel_mix_gen=LinearMap(np.zeros((4, 2)), np.eye(2).ravel()),
            spatial_mix_gen=LinearMap(np.zeros((16, 2)), np.eye(4).ravel()),
            out_proj=LinearMap(np.eye(8)[:2], np.zeros(2)))
        g = np.array([[1.0, 3.0], [2.0, -1.0], [0.5, 0.5], [-2.0, 4.0]])
        q = np.array([0.3, -0.7])
        pts = np.zeros((4, 2))  # position embed projects to zero anyway

        out = val(position_aware_mix(q, g, pts, params, GRID))

        def ln(row):
            mu = row.mean()
            var = ((row - mu) ** 2).mean()
            return (row - mu) / math.sqrt(var + 1e-5)

        G_c = np.maximum(np.stack([ln(r) for r in g]), 0.0)          # [4, 2]
        G_cs = np.maximum(np.stack([ln(r) for r in G_c.T]), 0.0)     # [2, 4]
        flat = G_cs.T.ravel()                                        # p*C + c
        expect = q + np.eye(8)[:2] @ flat
        assert np.allclose(out, expect, atol=1e-12)

    def test_point_permutation_permutes_rows(self, rng):
        # with identity spatial mixing, permuting the sampling points (and
        # their features) permutes the flattened output accordingly
        C, n_p = 2, 4
        params = tiny_params()
        params = dataclasses.replace(
            params,
            pos_embed_proj=LinearMap(rng.normal(size=(2, 4)), np.zeros(2)),
            channel_mix_gen=LinearMap(np.zeros((4, 2)), np.eye(2).ravel()),
            spatial_mix_gen=LinearMap(np.zeros((16, 2)), np.eye(4).ravel()),
            out_proj=LinearMap(rng.normal(size=(2, 8)), np.zeros(2)))
        g = rng.normal(size=(4, 2))
        pts = rng.uniform(0, 30, size=(4, 2))
        q = rng.normal(size=2)
        perm = np.array([2, 0, 3, 1])

        base = val(position_aware_mix(q, g, pts, params, GRID)) - q
        permuted = val(position_aware_mix(q, g[perm], pts[perm], params, GRID)) - q
        # out = W @ flat with flat blocks indexed by point: permuting the
        # points permutes the blocks, so the block-permuted weight recovers
        # the original output
        # flat block p of the permuted run holds original block perm[p]
        W = val(params.out_proj.weight).reshape(2, 4, 2)
        W_perm = W[:, perm, :].reshape(2, 8)
        probe = dataclasses.replace(params,
                                    out_proj=LinearMap(W_perm, np.zeros(2)))
        again = val(position_aware_mix(q, g[perm], pts[perm], probe, GRID)) - q
        assert np.allclose(again, base, atol=1e-12)
        assert not np.allclose(permuted, base)

    def test_position_term_distinguishes_locations(self, rng):
        params = tiny_params(rng, scale=0.5)
        q = rng.normal(size=2)
        g = rng.normal(size=(4, 2))
        a = val(position_aware_mix(q, g, np.full((4, 2), 3.0), params, GRID))
        b = val(position_aware_mix(q, g, np.full((4, 2), 17.0), params, GRID))
        assert not np.allclose(a, b)


class TestSelfAttention:
    def test_single_query_residual_form(self, rng):
        params = tiny_params(rng, C=2, n_heads=1, scale=0.5)
        attn = params.self_attn[0]
        f = rng.normal(size=(1, 2))
        out = val(self_attention(f, attn, 1))
        # one query attends only to itself: out = f + W_o(W_v f)
        v = val(attn.w_v.weight) @ f[0] + val(attn.w_v.bias)
        expect = f[0] + val(attn.w_o.weight) @ v + val(attn.w_o.bias)
        assert np.allclose(out[0], expect, atol=1e-12)

    def test_zero_value_and_out_projections_identity(self, rng):
        params = tiny_params(rng, C=4, n_heads=2, scale=0.5)
        attn = dataclasses.replace(params.self_attn[0],
                                   w_v=LinearMap.zeros(4, 4),
                                   w_o=LinearMap.zeros(4, 4))
        f = rng.normal(size=(3, 4))
        assert np.array_equal(val(self_attention(f, attn, 2)), f)

    def test_two_query_hand_computation(self):
        # 1 head, C=1: scalar attention is a softmax-weighted average
        wq = LinearMap(np.array([[1.0]]), np.zeros(1))
        wk = LinearMap(np.array([[1.0]]), np.zeros(1))
        wv = LinearMap(np.array([[2.0]]), np.zeros(1))
        wo = LinearMap(np.array([[1.0]]), np.zeros(1))
        attn = AttentionParams(wq, wk, wv, wo)
        f = np.array([[1.0], [2.0]])
        out = val(self_attention(f, attn, 1))
        for i in range(2):
            scores = np.array([f[i, 0] * f[0, 0], f[i, 0] * f[1, 0]])
            e = np.exp(scores - scores.max())
            w = e / e.sum()
            expect = f[i, 0] + w @ (2.0 * f[:, 0])
            assert np.allclose(out[i, 0], expect, atol=1e-12)


class TestDecodeBox:
    def test_zero_head_defaults(self):
        params = tiny_params()
        q = ObjectQuery(np.zeros(2), (10.0, 10.0), 0)
        pred = decode_box(q, params)
        box = pred.to_box()
        assert box[:2] == (10.0, 10.0)
        assert box[3:6] == (1.0, 1.0, 1.0)  # exp(0)
        assert box[6] == 0.0                # zero-norm heading

    def test_center_delta(self):
        params = dataclasses.replace(
            tiny_params(),
            reg_head=LinearMap(np.zeros((8, 2)),
                               np.array([1.5, -2.0, 0, 0, 0, 0, 0, 1.0])))
        q = ObjectQuery(np.zeros(2), (10.0, 10.0), 0)
        box = decode_box(q, params).to_box()
        assert box[0] == 11.5 and box[1] == 8.0

    def test_round_trip_via_targets(self, rng):
        for _ in range(20):
            ref = tuple(rng.uniform(2, 28, size=2))
            center = (ref[0] + rng.normal(), ref[1] + rng.normal())
            z = rng.normal()
            dims = tuple(rng.uniform(0.5, 6, size=3))
            yaw = rng.uniform(-np.pi, np.pi)
            target = encode_box(center, z, dims, yaw, ref)
            params = dataclasses.replace(
                tiny_params(), reg_head=LinearMap(np.zeros((8, 2)), target))
            box = decode_box(ObjectQuery(np.zeros(2), ref, 0), params).to_box()
            assert np.allclose(box[:2], center, atol=1e-9)
            assert abs(box[2] - z) < 1e-9
            assert np.allclose(box[3:6], dims, atol=1e-9)
            assert abs(math.remainder(box[6] - yaw, 2 * math.pi)) < 1e-9

    def test_encode_rejects_degenerate_dims(self):
        with pytest.raises(ValueError):
            encode_box((0, 0), 0.0, (0.0, 1.0, 1.0), 0.0, (0, 0))


class TestDecoderLayer:
    def test_all_zero_blocks_leave_queries_unchanged(self, rng):
        params = tiny_params(n_layers=6)
        feats = rng.normal(size=(3, 2))
        ref = rng.uniform(4, 28, size=(3, 2))
        bev = rng.normal(size=(2, 32, 32))
        layers = run_decoder(feats.copy(), ref, bev, params, GRID)
        assert len(layers) == 6
        cur = feats.copy()
        state = _initial_state(ref)
        for li in range(6):
            cur, _, _, state = decoder_layer(cur, ref, state, bev, params,
                                             li, GRID)
        assert np.array_equal(cur, feats)

    def test_layer_zero_ignores_head_bias_for_geometry(self, rng):
        # the regression head moves boxes only for layers after the first:
        # layer-0 sampling geometry must use the degenerate boxes
        params = tiny_params(rng, scale=0.4, n_layers=1)
        state = _initial_state(np.array([[8.0, 8.0]]))
        assert state["l"][0] == 0.0 and state["yaw"][0] == 0.0
        feats = rng.normal(size=(1, 2))
        pts, offs = _corner_points_batch(feats, state, params, GRID)
        raw = val(ad.reshape(
            ad.matmul(feats, val(params.offset_gen.weight).T)
            + val(params.offset_gen.bias), (1, 4, 2)))
        assert np.allclose(val(offs), raw, atol=1e-12)

    def test_full_layer_scripted_oracle(self, rng):
        # every sub-block hand-set; the whole layer is recomputed step by
        # step with plain numpy
        C, n_p = 2, 4
        params = tiny_params(rng, C=C, n_p=n_p, n_heads=1, scale=0.4)
        feats = rng.normal(size=(1, C))
        ref = np.array([[7.0, 9.0]])
        bev = rng.normal(size=(C, 32, 32))
        state = _initial_state(ref)

        new_feats, enc, cls, next_state = decoder_layer(
            feats, ref, state, bev, params, 0, GRID)

        def apply(m, x):
            return val(m.weight) @ x + val(m.bias)

        # self attention, single query
        f = feats[0]
        attn = params.self_attn[0]
        v = apply(attn.w_v, f)
        f = f + apply(attn.w_o, v)
        # corner sampling at layer 0: center + raw offsets
        raw = apply(params.offset_gen, f).reshape(n_p, 2)
        pts = raw + ref[0]
        g = np.stack([bilinear_sample(bev, tuple(p))[0] for p in pts])
        # position embedding of normalized absolute points
        e = np.stack([apply(params.pos_embed_proj,
                            sinusoidal_encode((p[0] / 32.0, p[1] / 32.0), 4))
                      for p in pts])
        G = g + e

        def ln(row):
            mu = row.mean()
            var = ((row - mu) ** 2).mean()
            return (row - mu) / math.sqrt(var + 1e-5)

        W_c = apply(params.channel_mix_gen, f).reshape(C, C)
        G_c = np.maximum(np.stack([ln(r) for r in G @ W_c]), 0.0)
        W_s = apply(params.spatial_mix_gen, f).reshape(n_p, n_p)
        G_cs = np.maximum(np.stack([ln(r) for r in G_c.T @ W_s]), 0.0)
        f = f + apply(params.out_proj, G_cs.T.ravel())
        f = f + apply(params.ffn2, np.maximum(apply(params.ffn1, f), 0.0))

        assert np.allclose(val(new_feats)[0], f, atol=1e-12)
        assert np.allclose(val(enc)[0], apply(params.reg_head, f), atol=1e-12)
        assert np.allclose(val(cls)[0], apply(params.cls_head, f), atol=1e-12)

    def test_deformable_modes_run_and_differ(self, rng):
        params = tiny_params(rng, scale=0.4, n_layers=2)
        feats = rng.normal(size=(3, 2))
        ref = rng.uniform(4, 28, size=(3, 2))
        bev = rng.normal(size=(2, 32, 32))
        outs = {}
        for mode in ("geometry_aware", "deformable_center",
                     "deformable_scaled_rotated", "standard"):
            layers = run_decoder(feats, ref, bev, params, GRID, mode=mode)
            outs[mode] = val(layers[-1]["enc"])
        assert not np.allclose(outs["geometry_aware"], outs["deformable_center"])
        assert not np.allclose(outs["deformable_center"], outs["standard"])

    def test_invalid_mode_rejected(self, rng):
        params = tiny_params()
        with pytest.raises(ValueError):
            decoder_layer(np.zeros((1, 2)), np.zeros((1, 2)),
                          _initial_state(np.zeros((1, 2))),
                          np.zeros((2, 4, 4)), params, 0, GRID, mode="bogus")


class TestLosses:
    def test_focal_scalar_fixture(self):
        p = 0.3
        logit = math.log(p / (1 - p))
        out = float(val(focal_loss(np.array([logit]), np.array([1.0]))))
        assert out == pytest.approx(-0.25 * 0.7 ** 2 * math.log(0.3), abs=1e-9)

    def test_focal_gamma_zero_is_half_bce(self, rng):
        logits = rng.normal(size=(5,))
        y = (rng.uniform(size=5) > 0.5).astype(float)
        out = float(val(focal_loss(logits, y, gamma=0.0, alpha=0.5)))
        p = 1 / (1 + np.exp(-logits))
        bce = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean()
        assert out == pytest.approx(0.5 * bce, abs=1e-9)

    def test_focal_perfect_prediction_vanishes(self):
        out = float(val(focal_loss(np.array([30.0, -30.0]),
                                   np.array([1.0, 0.0]))))
        assert out < 1e-9

    def test_focal_class_id_labels(self, rng):
        logits = rng.normal(size=(4, 3))
        labels = np.array([0, 2, 1, 1])
        onehot = np.zeros((4, 3))
        onehot[np.arange(4), labels] = 1.0
        a = float(val(focal_loss(logits, labels)))
        b = float(val(focal_loss(logits, onehot)))
        assert a == pytest.approx(b, abs=1e-12)

    def test_gaussian_focal_fixtures(self):
        pred = np.zeros((1, 2, 2)) + 1e-15
        pred[0, 0, 0] = 1.0
        tgt = np.zeros((1, 2, 2))
        tgt[0, 0, 0] = 1.0
        assert float(val(gaussian_focal_loss(pred, tgt))) < 1e-9

        pred2 = np.full((1, 1, 1), 0.5)
        tgt2 = np.ones((1, 1, 1))
        out = float(val(gaussian_focal_loss(pred2, tgt2)))
        assert out == pytest.approx(-0.25 * math.log(0.5), abs=1e-9)

    def test_gaussian_focal_zero_negatives_add_nothing(self):
        pred = np.zeros((1, 4, 4)) + 1e-15
        pred[0, 1, 1] = 0.5
        tgt = np.zeros((1, 4, 4))
        tgt[0, 1, 1] = 1.0
        small = float(val(gaussian_focal_loss(pred, tgt)))
        pred_big = np.zeros((1, 8, 8)) + 1e-15
        pred_big[0, 1, 1] = 0.5
        tgt_big = np.zeros((1, 8, 8))
        tgt_big[0, 1, 1] = 1.0
        big = float(val(gaussian_focal_loss(pred_big, tgt_big)))
        assert big == pytest.approx(small, abs=1e-12)

    def test_l1_fixtures(self, rng):
        a = rng.normal(size=8)
        assert float(val(l1_encoded(a, a))) == 0.0
        b = a.copy()
        b[3] += 0.64
        assert float(val(l1_encoded(a, b))) == pytest.approx(0.64 / 8, abs=1e-12)
        x, y = rng.normal(size=(2, 8))
        naive = sum(abs(float(x[i]) - float(y[i])) for i in range(8)) / 8
        assert float(val(l1_encoded(x, y))) == pytest.approx(naive, abs=1e-15)

    def test_l1_box_loss_zero_on_exact_prediction(self):
        box = Box(0, (4.0, -3.0, 1.0), (4.0, 2.0, 1.5), 0.7)
        from bevlab.geometry import world_to_cell
        u, v = world_to_cell(GRID, 4.0, -3.0)
        ref = (u - 1.0, v + 2.0)
        tgt = encode_box((u, v), 1.0, (4.0, 2.0, 1.5), 0.7, ref)
        pred = BoxPrediction(ref_point=ref, center_delta=tgt[0:2], z=tgt[2],
                             log_dims=tgt[3:6], heading=tgt[6:8],
                             cls_logits=np.zeros(2))
        assert l1_box_loss(pred, box, GRID) < 1e-12
