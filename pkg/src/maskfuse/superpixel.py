"""SLIC superpixels and region-level voting that turns per-subject attention
maps into a binary mask partition.

The SLIC here is written from scratch: seeds on a regular grid, localized
k-means over (color, position) with distance sqrt(d_color^2 + (d_xy/S)^2 m^2),
then a connectivity pass that folds orphan fragments into their largest
neighbor. It runs directly on the input channels (no Lab conversion) since the
harness images are synthetic. Determinism: pixels are scanned row-major and
all ties resolve toward the lower center/region/subject index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ShapeError
from .tensorio import PixelGrid

__all__ = [
    "SlicParams",
    "SuperpixelLabeling",
    "SubjectMaskSet",
    "slic_segment",
    "upsample_map",
    "downsample_mask",
    "vote_superpixels",
    "decode_predicted_sample",
]

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


@dataclass(frozen=True)
class SlicParams:
    """n_segments defaults to floor(sqrt(H*W)) of the segmented image."""

    n_segments: int | None = None
    compactness: float = 10.0
    sigma: float = 1.0
    iterations: int = 10

    def __post_init__(self):
        if self.n_segments is not None and self.n_segments < 1:
            raise ValueError(f"n_segments must be >= 1, got {self.n_segments}")
        if self.compactness <= 0:
            raise ValueError(f"compactness must be > 0, got {self.compactness}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")


@dataclass
class SuperpixelLabeling:
    """Per-pixel region ids, contiguous in [0, n_regions)."""

    labels: np.ndarray
    n_regions: int

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ShapeError(f"labels must be HxW, got shape {lab.shape}")
        present = np.unique(lab)
        if present[0] < 0 or present[-1] != self.n_regions - 1 or present.size != self.n_regions:
            raise ValueError("labels are not contiguous 0..n_regions-1")
        self.labels = lab.astype(np.int32)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass
class SubjectMaskSet:
    """Binary per-subject masks forming a partition of the pixel grid."""

    lora_ids: tuple[str, ...]
    masks: np.ndarray  # (L, H, W) of {0, 1}

    def __post_init__(self):
        m = np.asarray(self.masks)
        if m.ndim != 3 or m.shape[0] != len(self.lora_ids):
            raise ShapeError(f"masks must be (n_subjects, H, W), got {m.shape}")
        m = m.astype(np.uint8)
        if not np.isin(m, (0, 1)).all():
            raise ValueError("masks must be binary")
        if not np.all(m.sum(axis=0) == 1):
            raise ValueError("masks do not form a partition of the pixel grid")
        self.masks = m

    def mask_for(self, lora_id: str) -> np.ndarray:
        return self.masks[self.lora_ids.index(lora_id)]


def _seed_positions(extent: int, n: int) -> np.ndarray:
    # centers of n equal slices, in pixel-index coordinates
    return (np.arange(n) + 0.5) * (extent / n) - 0.5


def slic_segment(image: PixelGrid, params: SlicParams | None = None) -> SuperpixelLabeling:
    params = params or SlicParams()
    h, w = image.height, image.width
    n_seg = params.n_segments if params.n_segments is not None else max(1, int(np.sqrt(h * w)))
    if n_seg > h * w:
        raise ShapeError(f"n_segments={n_seg} exceeds pixel count {h * w}")

    img = image.values.astype(np.float64)
    if params.sigma > 0:
        img = ndimage.gaussian_filter(img, sigma=(params.sigma, params.sigma, 0.0))

    spacing = np.sqrt(h * w / n_seg)
    n_rows = max(1, int(h / spacing + 0.5))
    n_cols = max(1, int(w / spacing + 0.5))
    sy = _seed_positions(h, n_rows)
    sx = _seed_positions(w, n_cols)
    cy, cx = np.meshgrid(sy, sx, indexing="ij")
    centers_yx = np.stack([cy.ravel(), cx.ravel()], axis=1)
    py = np.clip(np.rint(centers_yx[:, 0]).astype(int), 0, h - 1)
    px = np.clip(np.rint(centers_yx[:, 1]).astype(int), 0, w - 1)
    centers_color = img[py, px, :].copy()

    m2_over_s2 = (params.compactness / spacing) ** 2
    rows = np.arange(h, dtype=np.float64)
    cols = np.arange(w, dtype=np.float64)
    labels = np.full((h, w), -1, dtype=np.int32)

    for _ in range(params.iterations):
        best = np.full((h, w), np.inf)
        labels.fill(-1)
        for cid in range(centers_yx.shape[0]):
            y, x = centers_yx[cid]
            # 2S x 2S search window centered on the seed
            y0 = max(0, int(np.floor(y - spacing)))
            y1 = min(h, int(np.ceil(y + spacing)) + 1)
            x0 = max(0, int(np.floor(x - spacing)))
            x1 = min(w, int(np.ceil(x + spacing)) + 1)
            d_color2 = ((img[y0:y1, x0:x1, :] - centers_color[cid]) ** 2).sum(axis=2)
            d_xy2 = (rows[y0:y1, None] - y) ** 2 + (cols[None, x0:x1] - x) ** 2
            d2 = d_color2 + d_xy2 * m2_over_s2
            win = d2 < best[y0:y1, x0:x1]  # strict: earlier (lower) center keeps ties
            best[y0:y1, x0:x1][win] = d2[win]
            labels[y0:y1, x0:x1][win] = cid
        if (labels < 0).any():
            _assign_orphan_pixels(labels, centers_yx)
        centers_yx, centers_color = _update_centers(labels, img, centers_yx, centers_color)

    comp = _relabel_by_first_pixel(_split_components(labels))
    comp = _merge_orphans(comp, min_size=spacing * spacing / 4.0)
    comp = _cap_region_count(comp, max_regions=2 * n_seg)
    comp = _relabel_by_first_pixel(comp)
    return SuperpixelLabeling(comp, int(comp.max()) + 1)


def _assign_orphan_pixels(labels: np.ndarray, centers_yx: np.ndarray) -> None:
    # rare: pixels outside every search window fall back to the spatially nearest center
    ys, xs = np.nonzero(labels < 0)
    d2 = (ys[:, None] - centers_yx[None, :, 0]) ** 2 + (xs[:, None] - centers_yx[None, :, 1]) ** 2
    labels[ys, xs] = np.argmin(d2, axis=1)


def _update_centers(labels, img, centers_yx, centers_color):
    k = centers_yx.shape[0]
    flat = labels.ravel()
    counts = np.bincount(flat, minlength=k).astype(np.float64)
    h, w = labels.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    new_yx = centers_yx.copy()
    new_color = centers_color.copy()
    nz = counts > 0
    new_yx[nz, 0] = np.bincount(flat, weights=yy.ravel(), minlength=k)[nz] / counts[nz]
    new_yx[nz, 1] = np.bincount(flat, weights=xx.ravel(), minlength=k)[nz] / counts[nz]
    for c in range(img.shape[2]):
        sums = np.bincount(flat, weights=img[:, :, c].ravel(), minlength=k)
        new_color[nz, c] = sums[nz] / counts[nz]
    return new_yx, new_color


def _split_components(labels: np.ndarray) -> np.ndarray:
    """4-connected components of each cluster, numbered densely."""
    out = np.full(labels.shape, -1, dtype=np.int32)
    offset = 0
    for k in np.unique(labels):
        mask = labels == k
        comp, n = ndimage.label(mask, structure=_FOUR_CONN)
        out[mask] = comp[mask] - 1 + offset
        offset += n
    return out


def _relabel_by_first_pixel(comp: np.ndarray) -> np.ndarray:
    flat = comp.ravel()
    n = int(flat.max()) + 1
    firsts = np.full(n, flat.size, dtype=np.int64)
    np.minimum.at(firsts, flat, np.arange(flat.size))
    live = np.flatnonzero(firsts < flat.size)
    rank = np.empty(n, dtype=np.int32)
    rank[live[np.argsort(firsts[live], kind="stable")]] = np.arange(live.size)
    return rank[comp]


def _region_neighbors(comp: np.ndarray, rid: int) -> list[int]:
    mask = comp == rid
    nbrs: set[int] = set()
    nbrs.update(comp[:-1, :][mask[1:, :]].tolist())
    nbrs.update(comp[1:, :][mask[:-1, :]].tolist())
    nbrs.update(comp[:, :-1][mask[:, 1:]].tolist())
    nbrs.update(comp[:, 1:][mask[:, :-1]].tolist())
    nbrs.discard(rid)
    return sorted(int(v) for v in nbrs)


def _merge_into_largest_neighbor(comp: np.ndarray, rid: int, sizes: np.ndarray) -> bool:
    nbrs = _region_neighbors(comp, rid)
    if not nbrs:
        return False
    target = max(nbrs, key=lambda j: (sizes[j], -j))  # largest, ties to lower id
    comp[comp == rid] = target
    return True


def _merge_orphans(comp: np.ndarray, min_size: float) -> np.ndarray:
    comp = comp.copy()
    while True:
        sizes = np.bincount(comp.ravel())
        live = np.flatnonzero(sizes)
        if live.size <= 1:
            break
        small = live[sizes[live] < min_size]
        if small.size == 0:
            break
        if not _merge_into_largest_neighbor(comp, int(small[0]), sizes):
            break
    return comp


def _cap_region_count(comp: np.ndarray, max_regions: int) -> np.ndarray:
    comp = comp.copy()
    while True:
        sizes = np.bincount(comp.ravel())
        live = np.flatnonzero(sizes)
        if live.size <= max(1, max_regions):
            break
        smallest = live[int(np.argmin(sizes[live]))]  # first min -> lowest id
        if not _merge_into_largest_neighbor(comp, int(smallest), sizes):
            break
    return comp


def upsample_map(m: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor upsampling: source index = floor(dst * src_dim / dst_dim)."""
    src = np.asarray(m)
    if src.ndim != 2 or src.shape[0] == 0 or src.shape[1] == 0 or out_h < 1 or out_w < 1:
        raise ShapeError(f"cannot upsample shape {src.shape} to {out_h}x{out_w}")
    ri = (np.arange(out_h) * src.shape[0]) // out_h
    ci = (np.arange(out_w) * src.shape[1]) // out_w
    return src[np.ix_(ri, ci)]


def downsample_mask(mask: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    """Majority vote of each token's pixel footprint, ties go to 1."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ShapeError(f"mask must be HxW, got shape {m.shape}")
    h, w = m.shape
    if not (1 <= grid_h <= h and 1 <= grid_w <= w):
        raise ShapeError(f"token grid {grid_h}x{grid_w} exceeds mask {h}x{w}")
    ri = (np.arange(h) * grid_h) // h
    ci = (np.arange(w) * grid_w) // w
    flat = ri[:, None] * grid_w + ci[None, :]
    ones = np.bincount(flat.ravel(), weights=m.astype(np.float64).ravel(), minlength=grid_h * grid_w)
    total = np.bincount(flat.ravel(), minlength=grid_h * grid_w)
    return (2 * ones >= total).astype(np.uint8).reshape(grid_h, grid_w)


def vote_superpixels(
    maps: Sequence[np.ndarray],
    labeling: SuperpixelLabeling,
    lora_ids: Sequence[str] | None = None,
) -> SubjectMaskSet:
    """Assign each region to the subject with the largest summed map mass.

    Ties go to the lower subject index; the resulting masks partition the grid.
    """
    if len(maps) == 0:
        raise ValueError("need at least one subject map")
    ids = tuple(lora_ids) if lora_ids is not None else tuple(f"lora{i}" for i in range(len(maps)))
    if len(ids) != len(maps):
        raise ShapeError(f"{len(ids)} ids for {len(maps)} maps")
    shape = (labeling.height, labeling.width)
    flat_labels = labeling.labels.ravel()
    scores = np.empty((len(maps), labeling.n_regions), dtype=np.float64)
    for i, m in enumerate(maps):
        arr = np.asarray(m, dtype=np.float64)
        if arr.shape != shape:
            raise ShapeError(f"map {i} has shape {arr.shape}, labeling is {shape}")
        if np.any(arr < 0):
            raise ValueError(f"map {i} has negative values")
        scores[i] = np.bincount(flat_labels, weights=arr.ravel(), minlength=labeling.n_regions)
    winners = np.argmax(scores, axis=0)  # first max -> lower subject index
    masks = (winners[labeling.labels][None, :, :] == np.arange(len(maps))[:, None, None])
    return SubjectMaskSet(ids, masks.astype(np.uint8))


def decode_predicted_sample(image_tokens: np.ndarray, grid_h: int, grid_w: int) -> PixelGrid:
    """Render token channels 0..2 as an RGB grid, min-max rescaled per channel.

    A constant channel maps to 0.5. Stands in for the model's clean-sample
    estimate when feeding the segmenter.
    """
    t = np.asarray(image_tokens, dtype=np.float64)
    if t.ndim != 2:
        raise ShapeError(f"tokens must be NxD, got shape {t.shape}")
    if t.shape[1] < 3:
        raise ShapeError(f"token dim {t.shape[1]} < 3, cannot decode RGB")
    if t.shape[0] != grid_h * grid_w:
        raise ShapeError(f"{t.shape[0]} tokens do not fill a {grid_h}x{grid_w} grid")
    img = t[:, :3].reshape(grid_h, grid_w, 3)
    out = np.empty_like(img)
    for c in range(3):
        lo, hi = img[:, :, c].min(), img[:, :, c].max()
        out[:, :, c] = 0.5 if hi - lo < 1e-12 else (img[:, :, c] - lo) / (hi - lo)
    return PixelGrid(out)
