"""Group-wise query initialization: center heatmaps, Gaussian targets,
top-k keypoint extraction, and mixed query construction (positions from
keypoints, features from per-group shared embeddings)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import val
from .geometry import BevGrid, world_to_cell
from .tensor import LinearMap, linear_apply

log = logging.getLogger(__name__)

# similarly sized classes share a group (ids into scene_sim.CLASS_NAMES)
DEFAULT_GROUPS = ((0,), (1, 2), (3, 4), (5,), (6, 7), (8, 9))
DEFAULT_QUERIES_PER_GROUP = 150


@dataclass(frozen=True)
class GroupSpec:
    groups: tuple = DEFAULT_GROUPS
    queries_per_group: int = DEFAULT_QUERIES_PER_GROUP

    def __post_init__(self):
        flat = [c for g in self.groups for c in g]
        if sorted(flat) != list(range(len(flat))):
            raise ValueError("groups must partition the class-id set 0..K-1")
        if self.queries_per_group < 1:
            raise ValueError("queries_per_group must be >= 1")

    @property
    def n_groups(self):
        return len(self.groups)

    @property
    def n_classes(self):
        return sum(len(g) for g in self.groups)

    @property
    def n_queries(self):
        return self.n_groups * self.queries_per_group


@dataclass(frozen=True)
class HeatmapHead:
    """Per-cell scorer producing one center-likelihood channel per class."""

    scorer: LinearMap  # [C -> n_classes]


@dataclass(frozen=True)
class GroupEmbeddings:
    """One learnable feature vector per group, shared by its queries."""

    table: object  # [n_groups, C]


@dataclass
class ObjectQuery:
    """A decoder query: feature vector, BEV reference point, and the current
    box estimate (x_c, y_c in cells; z, l, w, h in meters; yaw in radians).

    The box starts with l = w = yaw = z = h = 0 and its center on the
    reference point, so first-layer sampling is centered on the keypoint.
    """

    feature: object          # [C]
    ref_point: tuple         # (u, v) continuous cell coordinates
    group_id: int
    box: tuple = None        # (x_c, y_c, z, l, w, h, yaw)

    def __post_init__(self):
        if self.box is None:
            self.box = (self.ref_point[0], self.ref_point[1],
                        0.0, 0.0, 0.0, 0.0, 0.0)


def gaussian_target(boxes, grid: BevGrid, n_classes):
    """Per-class heatmap targets: at each cell the max over that class's
    objects of exp(-d^2 / (2 sigma^2)), d in cells from the cell nearest the
    object center, sigma = max(1, min(l, w) / (3 cell)) cells. The peak cell
    is exactly 1. Boxes whose center cell falls outside the grid are skipped.

    Returns (targets [n_classes, H, W], skipped count).
    """
    H, W = grid.height, grid.width
    targets = np.zeros((n_classes, H, W))
    uu, vv = np.meshgrid(np.arange(W), np.arange(H))
    skipped = 0
    for box in boxes:
        u, v = world_to_cell(grid, box.center[0], box.center[1])
        u0, v0 = int(round(u)), int(round(v))
        if not (0 <= u0 < W and 0 <= v0 < H):
            skipped += 1
            continue
        sigma = max(1.0, min(box.dims[0], box.dims[1]) / (3.0 * grid.cell_size_x))
        gauss = np.exp(-((uu - u0) ** 2 + (vv - v0) ** 2) / (2.0 * sigma ** 2))
        targets[box.class_id] = np.maximum(targets[box.class_id], gauss)
    if skipped:
        log.warning("gaussian_target: skipped %d boxes outside the grid", skipped)
    return targets, skipped


def predict_heatmaps(head: HeatmapHead, bev_fuse):
    """Sigmoid center-likelihood scores, [n_classes, H, W], entries in (0,1)."""
    C, H, W = np.shape(val(bev_fuse))
    flat = ad.transpose(ad.reshape(bev_fuse, (C, H * W)), (1, 0))
    scores = ad.sigmoid(linear_apply(head.scorer, flat))
    K = head.scorer.out_dim
    return ad.reshape(ad.transpose(scores, (1, 0)), (K, H, W))


def _local_max_mask(score):
    """Cells >= all 8 neighbors (missing neighbors ignored)."""
    H, W = score.shape
    padded = np.full((H + 2, W + 2), -np.inf)
    padded[1:-1, 1:-1] = score
    keep = np.ones((H, W), dtype=bool)
    for dv in (-1, 0, 1):
        for du in (-1, 0, 1):
            if dv == 0 and du == 0:
                continue
            keep &= score >= padded[1 + dv:H + 1 + dv, 1 + du:W + 1 + du]
    return keep


def topk_keypoints(heatmaps, spec: GroupSpec):
    """Top-k keypoints per group.

    Group channels are collapsed by per-cell max, 3x3 local-maximum
    suppression is applied, and the k best surviving cells are taken (ties
    broken by row-major index). When fewer than k cells survive, the best
    suppressed cells fill the remainder.

    Returns a list per group of (positions [k, 2] float (u, v), scores [k]).
    """
    hm = val(heatmaps)
    K, H, W = hm.shape
    k = spec.queries_per_group
    if k > H * W:
        raise ValueError("k exceeds the number of grid cells")
    out = []
    for group in spec.groups:
        gmap = hm[list(group)].max(axis=0)
        keep = _local_max_mask(gmap).ravel()
        flat = gmap.ravel()
        # sort by (-score, row-major index); survivors first, then suppressed
        order = np.lexsort((np.arange(flat.size), -flat))
        survivors = order[keep[order]]
        suppressed = order[~keep[order]]
        chosen = np.concatenate([survivors, suppressed])[:k]
        pos = np.stack([(chosen % W).astype(float),
                        (chosen // W).astype(float)], axis=1)
        out.append((pos, flat[chosen].copy()))
    return out


def init_queries(keypoints_per_group, embeds: GroupEmbeddings):
    """Build queries: feature = the group's shared embedding row (never
    sampled from the map), position = keypoint, box zeroed."""
    table = val(embeds.table)
    if table.shape[0] != len(keypoints_per_group):
        raise ValueError("embedding rows must match the group count")
    queries = []
    for gid, (positions, _scores) in enumerate(keypoints_per_group):
        for u, v in positions:
            queries.append(ObjectQuery(feature=table[gid].copy(),
                                       ref_point=(float(u), float(v)),
                                       group_id=gid))
    return queries
