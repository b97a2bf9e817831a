"""Toy backbone honouring partial masking, plus RoI / mask read-outs.

A grid cell's feature is ``sum_c cov_c * E[c] + u * Pos[cell]`` where
``cov_c`` is the unmasked fraction of the cell covered by category ``c``
(objects are overlaid additively), ``u`` the unmasked fraction of the cell
and ``E``/``Pos`` learnable tables. A cell that is fully masked therefore
has the zero feature, and masking can only affect the cells it touches.

Every node feature the graphs consume (RoI samples, MaskAlign means) is a
fixed linear read-out of the grid, so :func:`prepare_scene` precomputes
the read-out weights once per (scenario, intervention) and the model turns
them into features with two matrix products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from droid.diffcore import Tensor, add, matmul, mul, reshape, tanh
from droid.errors import DroidError
from droid.scene import (
    STUFF_CATEGORIES,
    THING_CATEGORIES,
    BoundingBox,
    Clip,
    DepthMap,
    unproject,
)

GRID = 28
CHANNELS = {c: i for i, c in enumerate(THING_CATEGORIES + STUFF_CATEGORIES)}
LIGHT_CHANNEL = len(CHANNELS)
N_CHANNELS = LIGHT_CHANNEL + 1
MOTION_DIM = 3


def init_backbone(rng: np.random.Generator, dim: int, frames: int, grid: int = GRID) -> dict[str, Tensor]:
    return {
        "backbone.embed": Tensor(rng.normal(0.0, 1.0, (N_CHANNELS, dim)), True),
        "backbone.pos": Tensor(rng.normal(0.0, 0.1, (grid * grid, dim)), True),
        "backbone.intent.w": Tensor(rng.normal(0.0, 1.0 / np.sqrt(frames * MOTION_DIM), (frames * MOTION_DIM, dim)), True),
        "backbone.intent.b": Tensor(np.zeros(dim), True),
    }


# -------------------------------------------------------------------- masks


def downsample_mask(mask: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Block max-pool: an output cell is 1 iff any source pixel in its block is 1."""
    mask = np.asarray(mask)
    h, w = mask.shape
    gh, gw = target
    if gh > h or gw > w or gh < 1 or gw < 1:
        raise DroidError("invalid_dims", f"cannot downsample {h}x{w} to {gh}x{gw}")
    rows = np.floor(np.arange(gh + 1) * h / gh).astype(int)
    cols = np.floor(np.arange(gw + 1) * w / gw).astype(int)
    out = np.zeros((gh, gw), dtype=np.uint8)
    any_rows = np.logical_or.reduceat(mask != 0, rows[:-1], axis=0)
    out[:] = np.logical_or.reduceat(any_rows, cols[:-1], axis=1)
    return out


def _rect_cells(rect: BoundingBox, cell_h: float, cell_w: float, grid: int) -> tuple[int, int, int, int]:
    """Half-open cell ranges (r0, r1, c0, c1) touched by a rectangle's pixels."""
    r0 = int(np.floor(rect.y1 / cell_h))
    r1 = min(grid, int(np.ceil(rect.y2 / cell_h)))
    c0 = int(np.floor(rect.x1 / cell_w))
    c1 = min(grid, int(np.ceil(rect.x2 / cell_w)))
    return r0, r1, c0, c1


# ----------------------------------------------------------------- coverage


def _overlap(a1: float, a2: float, n: int, size: float) -> np.ndarray:
    edges = np.arange(n + 1) * size
    return np.clip(np.minimum(a2, edges[1:]) - np.maximum(a1, edges[:-1]), 0.0, None)


def _regions(clip: Clip, t: int, removed: frozenset = frozenset()):
    """(channel, weight, rect) triples drawn on frame t."""
    out = []
    for tr in clip.tracklets:
        box = tr.boxes[t]
        if box is not None and tr.id not in removed:
            out.append((CHANNELS[tr.category], 1.0, box))
    for s in clip.stuff:
        rect = s.rects[t]
        if rect is None:
            continue
        out.append((CHANNELS[s.category], 1.0, rect))
        state = s.state_value(t)
        if state != 0.0:
            out.append((LIGHT_CHANNEL, state, rect))
    return out


def coverage(clip: Clip, t: int, mask_box: BoundingBox | None = None, removed: frozenset = frozenset(),
             grid: int = GRID) -> tuple[np.ndarray, np.ndarray]:
    """Analytic per-cell coverage ``(grid*grid, C)`` and unmasked fraction ``(grid*grid,)``.

    ``mask_box`` zeroes the pixels of one rectangle (the intervention mask).
    """
    ch, cw = clip.height / grid, clip.width / grid
    area = ch * cw
    cov = np.zeros((N_CHANNELS, grid, grid))
    for c, w, r in _regions(clip, t, removed):
        cov[c] += w * np.outer(_overlap(r.y1, r.y2, grid, ch), _overlap(r.x1, r.x2, grid, cw))
        if mask_box is not None:
            m = r.intersect(mask_box)
            if m is not None:
                cov[c] -= w * np.outer(_overlap(m.y1, m.y2, grid, ch), _overlap(m.x1, m.x2, grid, cw))
    unmasked = np.full((grid, grid), area)
    if mask_box is not None:
        unmasked -= np.outer(_overlap(mask_box.y1, mask_box.y2, grid, ch), _overlap(mask_box.x1, mask_box.x2, grid, cw))
    return (cov / area).reshape(N_CHANNELS, -1).T, (unmasked / area).reshape(-1)


def coverage_raster(clip: Clip, t: int, mask: np.ndarray | None = None, grid: int = GRID) -> tuple[np.ndarray, np.ndarray]:
    """Same quantities as :func:`coverage` for an arbitrary pixel mask, by rasterising."""
    H, W = clip.height, clip.width
    if H % grid or W % grid:
        raise DroidError("invalid_dims", f"frame {H}x{W} is not a multiple of the {grid} grid")
    mask = np.ones((H, W)) if mask is None else np.asarray(mask, dtype=np.float64)
    if mask.shape != (H, W):
        raise DroidError("invalid_dims", f"mask {mask.shape} does not match frame {(H, W)}")
    img = np.zeros((N_CHANNELS, H, W))
    for c, w, r in _regions(clip, t):
        img[c, int(r.y1):int(r.y2), int(r.x1):int(r.x2)] += w
    img *= mask
    ch, cw = H // grid, W // grid
    cov = img.reshape(N_CHANNELS, grid, ch, grid, cw).sum(axis=(2, 4)) / (ch * cw)
    unmasked = mask.reshape(grid, ch, grid, cw).sum(axis=(1, 3)) / (ch * cw)
    return cov.reshape(N_CHANNELS, -1).T, unmasked.reshape(-1)


def motion_tap(clip: Clip, masks=None) -> np.ndarray:
    """Per-frame ego-motion read from the unmasked pixels (the field is uniform per frame)."""
    out = clip.ego_motion.copy()
    if masks is not None:
        for t, m in enumerate(masks):
            if m is not None and not np.any(m):
                out[t] = 0.0
    return out


def intention_repr(params: dict[str, Tensor], motion: np.ndarray) -> Tensor:
    flat = Tensor(motion.reshape(1, -1))
    return tanh(add(matmul(flat, params["backbone.intent.w"]), params["backbone.intent.b"]))


def backbone_forward(params: dict[str, Tensor], clip: Clip, masks=None, grid: int = GRID) -> tuple[Tensor, Tensor]:
    """Feature grid ``(T, grid, grid, D)`` and intention representation ``(1, D)``.

    ``masks`` is an optional per-frame list of binary ``(H, W)`` arrays
    (``None`` entries mean "no mask").
    """
    if masks is not None and len(masks) != clip.frames:
        raise DroidError("invalid_dims", f"expected {clip.frames} masks, got {len(masks)}")
    covs, us = [], []
    for t in range(clip.frames):
        m = None if masks is None else masks[t]
        cov, u = coverage(clip, t, grid=grid) if m is None else coverage_raster(clip, t, m, grid)
        covs.append(cov)
        us.append(u)
    cov = Tensor(np.stack(covs))  # (T, G*G, C)
    u = Tensor(np.stack(us)[:, :, None])
    D = params["backbone.embed"].shape[1]
    x = add(matmul(cov, params["backbone.embed"]), mul(u, params["backbone.pos"]))
    return reshape(x, (clip.frames, grid, grid, D)), intention_repr(params, motion_tap(clip, masks))


# ---------------------------------------------------------------- read-outs


def roi_weights(box: BoundingBox, height: int, width: int, grid: int = GRID) -> np.ndarray:
    """``(4, grid*grid)`` bilinear weights of a 2x2 sample lattice over the box.

    Samples sit at the bin centres; interpolation is clamped to the cells
    the box covers, so a box never reads cells outside its own footprint.
    """
    if box.x2 <= box.x1 or box.y2 <= box.y1:
        raise DroidError("degenerate_box", f"box has zero area: {box.as_list()}")
    ch, cw = height / grid, width / grid
    r0, r1, c0, c1 = _rect_cells(box, ch, cw, grid)
    out = np.zeros((4, grid * grid))
    k = 0
    for sy in (0.25, 0.75):
        for sx in (0.25, 0.75):
            gy = np.clip((box.y1 + sy * (box.y2 - box.y1)) / ch - 0.5, r0, r1 - 1)
            gx = np.clip((box.x1 + sx * (box.x2 - box.x1)) / cw - 0.5, c0, c1 - 1)
            iy, ix = int(np.floor(gy)), int(np.floor(gx))
            fy, fx = gy - iy, gx - ix
            iy1, ix1 = min(iy + 1, r1 - 1), min(ix + 1, c1 - 1)
            for yy, wy in ((iy, 1 - fy), (iy1, fy)):
                for xx, wx in ((ix, 1 - fx), (ix1, fx)):
                    out[k, yy * grid + xx] += wy * wx
            k += 1
    return out


def roi_feature(grid_features: np.ndarray, box: BoundingBox, height: int, width: int) -> np.ndarray:
    g = np.asarray(grid_features)
    n = g.shape[0]
    samples = roi_weights(box, height, width, n) @ g.reshape(n * n, -1)
    return samples.max(axis=0)


def mask_align(grid_features: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mask-weighted mean of grid features."""
    g = np.asarray(grid_features)
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != g.shape[:2]:
        raise DroidError("invalid_dims", f"mask {m.shape} does not match grid {g.shape[:2]}")
    total = m.sum()
    if total <= 0:
        raise DroidError("empty_region", "mask_align needs at least one nonzero mask cell")
    return np.tensordot(m, g, axes=([0, 1], [0, 1])) / total


# ------------------------------------------------------------ scene prepare


def _cell_centres(height: int, width: int, grid: int):
    ch, cw = height / grid, width / grid
    v = (np.arange(grid) + 0.5) * ch
    u = (np.arange(grid) + 0.5) * cw
    return np.meshgrid(u, v)


def depth_at(depth: DepthMap, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorised :meth:`DepthMap.at`."""
    dv = v - depth.intrinsics.cy
    safe = np.where(dv > 0, dv, 1.0)
    out = np.where(dv > 0, np.minimum(depth.intrinsics.fy * depth.camera_height / safe, depth.far), depth.far)
    best = np.full(u.shape, np.inf)
    for box, z in depth.plates:
        inside = (u >= box.x1) & (u < box.x2) & (v >= box.y1) & (v < box.y2)
        best = np.where(inside & (z < best), z, best)
    return np.where(np.isfinite(best), best, out)


@dataclass
class PreparedScene:
    """Parameter-free inputs of one (scenario, intervention) pair.

    Thing-graph nodes are ``thing_ids`` followed by Ego. Read-out rows of
    node ``n`` at frame ``t`` sample ``s`` live at ``thing_cov[t, n, s]``
    (coverage part) and in the sparse triplets ``thing_pos_*`` (positional
    part). Stuff-graph nodes are the stuff regions; Ego is appended by the
    model.
    """

    thing_ids: list[int]
    thing_cov: np.ndarray        # (T, N+1, 4, C)
    thing_pos_idx: np.ndarray    # (E, 4) int: t, node, sample, cell
    thing_pos_val: np.ndarray    # (E,)
    thing_present: np.ndarray    # (T, N+1) bool
    thing_xyz: np.ndarray        # (T, N+1, 3)
    stuff_categories: list[str]
    stuff_cov: np.ndarray        # (T, M, C)
    stuff_pos_idx: np.ndarray    # (E', 3) int: t, node, cell
    stuff_pos_val: np.ndarray
    stuff_present: np.ndarray    # (T, M) bool
    stuff_dist: np.ndarray       # (T, M) min distance to the Ego anchor
    motion: np.ndarray           # (T, 3)

    @property
    def frames(self) -> int:
        return self.thing_cov.shape[0]


def prepare_scene(clip: Clip, removed: int | None = None, grid: int = GRID) -> PreparedScene:
    """Read-out weights, node positions and presence for the model.

    ``removed`` deletes one tracklet from the node set and masks its box in
    every frame where it has one.
    """
    if removed is not None:
        rm_track = clip.tracklet(removed)
    T, H, W = clip.frames, clip.height, clip.width
    ch, cw = H / grid, W / grid
    kept = [tr for tr in clip.tracklets if tr.id != removed]
    N, M = len(kept), len(clip.stuff)
    thing_cov = np.zeros((T, N + 1, 4, N_CHANNELS))
    thing_present = np.zeros((T, N + 1), dtype=bool)
    thing_present[:, N] = True
    thing_xyz = np.zeros((T, N + 1, 3))
    stuff_cov = np.zeros((T, M, N_CHANNELS))
    stuff_present = np.zeros((T, M), dtype=bool)
    stuff_dist = np.full((T, M), np.inf)
    tpi, tpv, spi, spv = [], [], [], []
    frame_box = BoundingBox(0.0, 0.0, float(W), float(H))
    ego_w = roi_weights(frame_box, H, W, grid)
    us, vs = _cell_centres(H, W, grid)
    removed_set = frozenset() if removed is None else frozenset([removed])
    motion = motion_tap(clip)
    for t in range(T):
        mbox = rm_track.boxes[t] if removed is not None else None
        if mbox is not None and mbox.area >= H * W:
            motion[t] = 0.0
        cov, unmasked = coverage(clip, t, mbox, removed_set, grid)
        anchor = clip.ego_anchor(t)
        thing_xyz[t, N] = anchor
        nodes = [(n, tr.boxes[t]) for n, tr in enumerate(kept)] + [(N, frame_box)]
        for n, box in nodes:
            if box is None:
                continue
            w = ego_w if n == N else roi_weights(box, H, W, grid)
            thing_cov[t, n] = w @ cov
            s_idx, cells = np.nonzero(w)
            vals = w[s_idx, cells] * unmasked[cells]
            keep = vals != 0
            tpi.append(np.stack([np.full(keep.sum(), t), np.full(keep.sum(), n), s_idx[keep], cells[keep]], axis=1))
            tpv.append(vals[keep])
            if n < N:
                thing_present[t, n] = True
                thing_xyz[t, n] = clip.object_position(kept[n].id, t)
        depth = None
        for m, region in enumerate(clip.stuff):
            rect = region.rects[t]
            if rect is None:
                continue
            r0, r1, c0, c1 = _rect_cells(rect, ch, cw, grid)
            cells = (np.arange(r0, r1)[:, None] * grid + np.arange(c0, c1)[None, :]).reshape(-1)
            w = 1.0 / cells.size
            stuff_cov[t, m] = cov[cells].sum(axis=0) * w
            vals = unmasked[cells] * w
            keep = vals != 0
            spi.append(np.stack([np.full(keep.sum(), t), np.full(keep.sum(), m), cells[keep]], axis=1))
            spv.append(vals[keep])
            stuff_present[t, m] = True
            if depth is None:
                depth = depth_at(clip.depth[t], us, vs).reshape(-1)
            u, v, z = us.reshape(-1)[cells], vs.reshape(-1)[cells], depth[cells]
            k = clip.intrinsics
            pts = np.stack([z * (u - k.cx) / k.fx, z * (v - k.cy) / k.fy, z], axis=1)
            stuff_dist[t, m] = np.sqrt(((pts - anchor) ** 2).sum(axis=1)).min()

    def cat(parts, width):
        return np.concatenate(parts) if parts else np.zeros((0, width) if width else 0)

    return PreparedScene(
        thing_ids=[tr.id for tr in kept],
        thing_cov=thing_cov,
        thing_pos_idx=cat(tpi, 4).astype(np.int64),
        thing_pos_val=cat(tpv, 0),
        thing_present=thing_present,
        thing_xyz=thing_xyz,
        stuff_categories=[s.category for s in clip.stuff],
        stuff_cov=stuff_cov,
        stuff_pos_idx=cat(spi, 3).astype(np.int64),
        stuff_pos_val=cat(spv, 0),
        stuff_present=stuff_present,
        stuff_dist=stuff_dist,
        motion=motion,
    )


def stuff_anchor_distance(clip: Clip, t: int, mask: np.ndarray, grid: int = GRID) -> float:
    """Minimum distance from the Ego anchor to the unprojected cells of a downsampled mask."""
    down = downsample_mask(mask, (grid, grid))
    us, vs = _cell_centres(clip.height, clip.width, grid)
    anchor = clip.ego_anchor(t)
    best = np.inf
    for i, j in zip(*np.nonzero(down)):
        u, v = us[i, j], vs[i, j]
        p = unproject(u, v, clip.depth[t].at(u, v), clip.intrinsics)
        best = min(best, float(np.linalg.norm(p - anchor)))
    return best
