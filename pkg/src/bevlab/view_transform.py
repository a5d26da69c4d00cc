"""LiDAR-guided view transformation into BEV space.

Two sampling pipelines share one engine: the adaptive path predicts per-cell
sampling heights and pooling weights from the LiDAR BEV features, the vanilla
baseline projects the same cell-independent heights everywhere and pools
uniformly. Adaptive projection then refines the sampled map with per-cell
channel kernels, and fusion concatenates the camera and LiDAR maps through a
per-cell linear map.

All per-cell math is vectorized over the H*W cells; per-cell work has a fixed
summation order, so results are identical across thread counts.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var, val
from .geometry import BevGrid, project_heights
from .tensor import LinearMap, linear_apply, softmax


@dataclass(frozen=True)
class VtParams:
    """Generators for the adaptive view transform, all per-cell linear maps.

    The height mapping squashes raw outputs into [z_min, z_max] via tanh so
    projected points always stay inside the grid's vertical ROI.
    """

    n_heights: int
    n_scales: int
    height_gen: LinearMap   # [C -> N_h]
    weight_gen: LinearMap   # [C -> N_s * N_h]
    kernel_gen: LinearMap   # [C -> C * C]
    fuse: LinearMap         # [2C -> C]
    z_min: float
    z_max: float

    def __post_init__(self):
        C = self.height_gen.in_dim
        if self.height_gen.out_dim != self.n_heights:
            raise ValueError("height_gen must output n_heights values")
        if self.weight_gen.out_dim != self.n_scales * self.n_heights:
            raise ValueError("weight_gen must output n_scales * n_heights logits")
        if self.kernel_gen.in_dim != C or self.kernel_gen.out_dim != C * C:
            raise ValueError("kernel_gen must map C -> C*C")
        if self.fuse.in_dim != 2 * C or self.fuse.out_dim != C:
            raise ValueError("fuse must map 2C -> C")
        if not self.z_max > self.z_min:
            raise ValueError("z_max must exceed z_min")

    @property
    def channels(self):
        return self.height_gen.in_dim


@dataclass(frozen=True)
class VtOutput:
    """Sampled BEV map plus per-cell diagnostics."""

    bev: object                # [C, H, W]
    per_cell_heights: np.ndarray   # [N_h, H, W]
    per_cell_weights: np.ndarray   # [N_s*N_h, H, W]
    validity_fraction: np.ndarray  # [H, W]


def _chw_to_flat(x):
    """[C, H, W] -> [H*W, C] (row-major over cells)."""
    C, H, W = np.shape(val(x))
    return ad.transpose(ad.reshape(x, (C, H * W)), (1, 0))


def _flat_to_chw(x, H, W):
    N, C = np.shape(val(x))
    return ad.reshape(ad.transpose(x, (1, 0)), (C, H, W))


def _heights_from_raw(raw, z_min, z_max):
    """Squash raw generator outputs into the vertical ROI."""
    mid = 0.5 * (z_min + z_max)
    half = 0.5 * (z_max - z_min)
    return ad.add(ad.mul(ad.tanh(raw), half), mid)


def generate_heights(params: VtParams, lidar_bev, u, v):
    """Sampling heights for one BEV cell, in meters within [z_min, z_max]."""
    lb = val(lidar_bev)
    C, H, W = lb.shape
    if not (0 <= u < W and 0 <= v < H):
        raise IndexError(f"cell ({u}, {v}) outside grid")
    raw = linear_apply(params.height_gen, lb[:, v, u])
    return val(_heights_from_raw(raw, params.z_min, params.z_max))


def _sample_one(pyramid, cam, grid, X, Y, Z):
    """All pyramid-level samples for one (camera, height) pair.

    Returns [(features [N, C], valid [N]), ...] per level; invalid lanes are
    exactly zero. A sample is valid when the projection is in front of the
    camera, inside the image, and inside the level's sampleable box.
    """
    x_px, y_px, proj_ok = project_heights(cam, X, Y, Z)
    out = []
    for stride, fmap in pyramid.levels:
        xs = ad.div(x_px, float(stride))
        ys = ad.div(y_px, float(stride))
        feats, bi_ok = ad.bilinear_gather(fmap, xs, ys)
        ok = proj_ok & bi_ok
        feats = ad.mul(feats, ok[:, None].astype(float))
        out.append((feats, ok))
    return out


def _vt_engine(heights, weights, pyramids, cams, grid, n_threads=1):
    """Shared sampling core.

    heights: [N, N_h] (possibly traced), weights: [N, N_s*N_h] rows summing
    to 1, flattened scale-major (index j * N_h + i). Per sampled point the
    feature is the mean over cameras with a valid sample, zero when none.
    """
    n_h = np.shape(val(heights))[1]
    n_s = len(pyramids[0].levels)
    n_cams = len(cams)
    X, Y = grid.cell_centers_flat()
    N = X.size
    C = pyramids[0].channels

    traced = ad.is_traced(heights, weights) or any(
        ad.is_traced(m) for p in pyramids for _, m in p.levels)

    tasks = [(i, k) for i in range(n_h) for k in range(n_cams)]
    z_cols = [ad.getitem(heights, (slice(None), i)) for i in range(n_h)]

    def run(task):
        i, k = task
        return _sample_one(pyramids[k], cams[k], grid, X, Y, z_cols[i])

    if n_threads > 1 and not traced:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = dict(zip(tasks, pool.map(run, tasks)))
    else:
        results = {t: run(t) for t in tasks}

    out = None
    valid_total = np.zeros(N)
    for j in range(n_s):
        for i in range(n_h):
            feat_sum = None
            count = np.zeros(N)
            for k in range(n_cams):
                feats, ok = results[(i, k)][j]
                feat_sum = feats if feat_sum is None else ad.add(feat_sum, feats)
                count += ok
                valid_total += ok
            denom = np.maximum(count, 1.0)[:, None]
            point_feat = ad.div(feat_sum, denom)
            w_col = ad.getitem(weights, (slice(None), j * n_h + i))
            term = ad.mul(point_feat, ad.reshape(w_col, (N, 1)))
            out = term if out is None else ad.add(out, term)

    frac = valid_total / (n_h * n_s * n_cams)
    return out, frac


def adaptive_sample(params: VtParams, lidar_bev, pyramids, cams, grid: BevGrid,
                    n_threads=1) -> VtOutput:
    """LiDAR-guided sampling of multi-scale image features into BEV space.

    Per cell: heights are generated from the LiDAR features, each (X, Y, Z_i)
    is projected into every camera and sampled at every pyramid level, and
    the N_s*N_h point features are pooled with softmax weights that are also
    generated from the LiDAR features (no re-normalization over validity).
    """
    if len(pyramids) != len(cams):
        raise ValueError("one pyramid per camera required")
    strides = {p.strides for p in pyramids}
    if len(strides) != 1:
        raise ValueError("all cameras must share the pyramid strides")
    if len(pyramids[0].levels) != params.n_scales:
        raise ValueError("pyramid level count must equal n_scales")
    if pyramids[0].channels != params.channels:
        raise ValueError("pyramid channels must match the generators")

    H, W = grid.height, grid.width
    lidar_flat = _chw_to_flat(lidar_bev)
    raw = linear_apply(params.height_gen, lidar_flat)
    heights = _heights_from_raw(raw, params.z_min, params.z_max)
    weights = softmax(linear_apply(params.weight_gen, lidar_flat))

    bev_flat, frac = _vt_engine(heights, weights, pyramids, cams, grid,
                                n_threads=n_threads)
    return VtOutput(
        bev=_flat_to_chw(bev_flat, H, W),
        per_cell_heights=val(heights).T.reshape(params.n_heights, H, W).copy(),
        per_cell_weights=val(weights).T.reshape(
            params.n_scales * params.n_heights, H, W).copy(),
        validity_fraction=frac.reshape(H, W),
    )


def vanilla_vt_output(pyramids, cams, grid: BevGrid, fixed_heights,
                      n_threads=1) -> VtOutput:
    """Baseline transform with diagnostics: project the same predefined
    heights from every cell and pool uniformly over all scales/heights."""
    fixed = np.asarray(fixed_heights, dtype=np.float64)
    if fixed.size == 0:
        raise ValueError("fixed_heights must be non-empty")
    if fixed.min() < grid.z_range[0] or fixed.max() > grid.z_range[1]:
        raise ValueError("fixed heights must lie inside the grid z-range")
    if len(pyramids) != len(cams):
        raise ValueError("one pyramid per camera required")

    H, W = grid.height, grid.width
    N = H * W
    n_h = fixed.size
    n_s = len(pyramids[0].levels)
    heights = np.tile(fixed, (N, 1))
    weights = np.full((N, n_s * n_h), 1.0 / (n_s * n_h))
    bev_flat, frac = _vt_engine(heights, weights, pyramids, cams, grid,
                                n_threads=n_threads)
    return VtOutput(
        bev=_flat_to_chw(bev_flat, H, W),
        per_cell_heights=heights.T.reshape(n_h, H, W).copy(),
        per_cell_weights=weights.T.reshape(n_s * n_h, H, W).copy(),
        validity_fraction=frac.reshape(H, W),
    )


def vanilla_vt(pyramids, cams, grid: BevGrid, fixed_heights):
    """Baseline transform: project the same predefined heights from every
    cell and pool uniformly over all scales and heights."""
    return val(vanilla_vt_output(pyramids, cams, grid, fixed_heights).bev)


def adaptive_project(params: VtParams, bev_as, lidar_bev):
    """Refine the sampled BEV map with per-cell channel kernels derived from
    the LiDAR features: out(u,v) = bev_as(u,v) x K(u,v), row-vector times
    C x C matrix."""
    C, H, W = np.shape(val(bev_as))
    if np.shape(val(lidar_bev)) != (C, H, W):
        raise ValueError("bev_as and lidar_bev shapes must agree")
    N = H * W
    lidar_flat = _chw_to_flat(lidar_bev)
    kernels = ad.reshape(linear_apply(params.kernel_gen, lidar_flat), (N, C, C))
    rows = ad.reshape(_chw_to_flat(bev_as), (N, 1, C))
    out = ad.reshape(ad.matmul(rows, kernels), (N, C))
    return _flat_to_chw(out, H, W)


def fuse_bev(params: VtParams, bev_camera, bev_lidar):
    """Fuse camera and LiDAR BEV maps: per-cell linear map on the channel
    concatenation."""
    if np.shape(val(bev_camera)) != np.shape(val(bev_lidar)):
        raise ValueError("camera and lidar BEV shapes must agree")
    C, H, W = np.shape(val(bev_camera))
    both = ad.concat([_chw_to_flat(bev_camera), _chw_to_flat(bev_lidar)], axis=1)
    return _flat_to_chw(linear_apply(params.fuse, both), H, W)
