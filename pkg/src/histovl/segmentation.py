"""Zero-shot coarse segmentation from overlapping tiles."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data_io import write_pgm, write_ppm
from .exceptions import ConsistencyError, InvalidArgumentError, ShapeError
from .wsi_pipeline import TissueMask, crop_tile, resize_tile

IGNORE = 255
SEGMENTATION_TILE = 224
DEFAULT_OVERLAP = 0.75
# class index -> RGB for mask export; IGNORE is white
PALETTE = np.array([
    [31, 119, 180], [214, 39, 40], [44, 160, 44], [255, 127, 14], [148, 103, 189],
    [140, 86, 75], [227, 119, 194], [127, 127, 127], [188, 189, 34], [23, 190, 207],
], dtype=np.uint8)


def _stride(side, overlap):
    if not 0 <= overlap < 1:
        raise InvalidArgumentError("overlap fraction must lie in [0, 1)")
    return max(1, int(math.floor(side * (1.0 - overlap) + 0.5)))


def _axis(lo, hi, side, stride):
    extent = hi - lo
    if extent <= side:
        return [lo + (extent - side) // 2]
    pos = [lo + i * stride for i in range((extent - side) // stride + 1)]
    if pos[-1] + side < hi:
        pos.append(hi - side)
    return pos


def overlap_tile_grid(mask: TissueMask, width: int, height: int, tile_side: int = SEGMENTATION_TILE,
                      overlap: float = DEFAULT_OVERLAP):
    """Overlapping tiles anchored at the tissue bounding-box origin.

    Stride is ``round(side * (1 - overlap))``. A final flush tile is added
    when the stride does not reach the far edge, so every tissue pixel is
    covered. Tiles that touch no tissue are dropped. An axis shorter than a
    tile gets one centred tile, which may then extend past the slide.
    """
    stride = _stride(tile_side, overlap)
    box = mask.bbox_level0(width, height)
    if box is None:
        return []
    x0, y0, x1, y1 = box
    full = mask.at_level0(width, height)
    sat = np.zeros((height + 1, width + 1), dtype=np.int64)
    sat[1:, 1:] = full.cumsum(0).cumsum(1)
    coords = []
    for y in _axis(y0, y1, tile_side, stride):
        for x in _axis(x0, x1, tile_side, stride):
            ya, yb = max(0, y), min(height, y + tile_side)
            xa, xb = max(0, x), min(width, x + tile_side)
            if sat[yb, xb] - sat[ya, xb] - sat[yb, xa] + sat[ya, xa] > 0:
                coords.append((int(x), int(y), int(tile_side)))
    return coords


class ScoreAccumulator:
    """Per-class score sums and coverage counts over the slide grid.

    With ``downsample > 1`` a tile covers the cells
    ``[x // d, ceil((x + side) / d))`` of a ``ceil(W / d) x ceil(H / d)`` grid.
    """

    def __init__(self, width: int, height: int, n_classes: int, downsample: int = 1):
        if n_classes < 1 or downsample < 1:
            raise InvalidArgumentError("n_classes and downsample must be >= 1")
        self.width, self.height, self.downsample = width, height, downsample
        gh, gw = math.ceil(height / downsample), math.ceil(width / downsample)
        self.sums = np.zeros((n_classes, gh, gw))
        self.coverage = np.zeros((gh, gw), dtype=np.int64)

    @property
    def n_classes(self) -> int:
        return self.sums.shape[0]

    def footprint(self, x, y, side, clip=False):
        if not clip and (x < 0 or y < 0 or x + side > self.width or y + side > self.height):
            raise InvalidArgumentError(f"tile ({x}, {y}, {side}) outside the {self.width}x{self.height} grid")
        d = self.downsample
        gh, gw = self.coverage.shape
        ya, xa = max(0, y) // d, max(0, x) // d
        yb = min(gh, math.ceil(min(self.height, y + side) / d))
        xb = min(gw, math.ceil(min(self.width, x + side) / d))
        if ya >= yb or xa >= xb:
            raise InvalidArgumentError(f"tile ({x}, {y}, {side}) does not touch the grid")
        return slice(ya, yb), slice(xa, xb)

    def merge(self, other: "ScoreAccumulator") -> "ScoreAccumulator":
        if other.sums.shape != self.sums.shape:
            raise ShapeError("accumulators differ in shape")
        self.sums += other.sums
        self.coverage += other.coverage
        return self

    def mean(self) -> np.ndarray:
        cov = np.maximum(self.coverage, 1)
        return self.sums / cov


def accumulate(acc: ScoreAccumulator, coord, scores, clip=False) -> ScoreAccumulator:
    """Add one tile's class scores over its footprint and bump coverage."""
    x, y, side = (int(v) for v in coord)
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != (acc.n_classes,):
        raise ShapeError(f"expected {acc.n_classes} class scores, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise InvalidArgumentError("tile scores must be finite")
    ys, xs = acc.footprint(x, y, side, clip)
    acc.sums[:, ys, xs] += s[:, None, None]
    acc.coverage[ys, xs] += 1
    return acc


@dataclass
class SegmentationMask:
    grid: np.ndarray  # uint8 class index, IGNORE off tissue
    n_classes: int

    def to_rgb(self) -> np.ndarray:
        return colorize(self.grid)


def _tissue_grid(tissue, shape):
    t = tissue.grid if isinstance(tissue, TissueMask) else np.asarray(tissue, dtype=bool)
    if t.shape != shape:
        raise ShapeError(f"tissue mask shape {t.shape} != accumulator grid {shape}")
    return t


def finalize_mask(acc: ScoreAccumulator, tissue) -> SegmentationMask:
    """Argmax of the averaged scores on tissue (ties: lowest class), IGNORE elsewhere."""
    t = _tissue_grid(tissue, acc.coverage.shape)
    if np.any(t & (acc.coverage == 0)):
        raise ConsistencyError("tissue pixels without any covering tile")
    grid = np.full(t.shape, IGNORE, dtype=np.uint8)
    if t.any():
        grid[t] = np.argmax(acc.mean()[:, t], axis=0).astype(np.uint8)
    return SegmentationMask(grid, acc.n_classes)


def _ratio(num, den, both_empty):
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def dice_precision_recall(pred, truth, positive: int = 1):
    """Dice, precision and recall of ``positive`` pixels.

    Undefined ratios are 1.0 when neither mask has a positive pixel and 0.0
    otherwise, which keeps dice equal to the harmonic mean of the other two.
    """
    p = (pred.grid if isinstance(pred, SegmentationMask) else np.asarray(pred)) == positive
    t = (truth.grid if isinstance(truth, SegmentationMask) else np.asarray(truth)) == positive
    if p.shape != t.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {t.shape}")
    inter = int(np.count_nonzero(p & t))
    np_, nt = int(np.count_nonzero(p)), int(np.count_nonzero(t))
    both_empty = np_ == 0 and nt == 0
    return (_ratio(2 * inter, np_ + nt, both_empty), _ratio(inter, np_, both_empty),
            _ratio(inter, nt, both_empty))


def colorize(grid) -> np.ndarray:
    g = np.asarray(grid)
    out = np.full(g.shape + (3,), 255, dtype=np.uint8)
    on = g != IGNORE
    out[on] = PALETTE[g[on] % len(PALETTE)]
    return out


def export_mask(mask: SegmentationMask, ppm_path=None, pgm_path=None):
    if ppm_path is not None:
        write_ppm(mask.to_rgb(), ppm_path)
    if pgm_path is not None:
        write_pgm(mask.grid, pgm_path)


def segment_slide(slide, tissue: TissueMask, encoder, bank, tile_side: int = SEGMENTATION_TILE,
                  overlap: float = DEFAULT_OVERLAP, downsample: int = 1, batch_size: int = 256):
    """Tile, embed and score a slide, then average overlaps and take the argmax.

    Returns ``(SegmentationMask, ScoreAccumulator, coords)``; the tissue mask
    is resampled to the accumulator grid.
    """
    from .zeroshot import tile_scores

    slide = np.asarray(slide)
    h, w = slide.shape[:2]
    coords = overlap_tile_grid(tissue, w, h, tile_side, overlap)
    acc = ScoreAccumulator(w, h, bank.n_classes, downsample)
    side_in = int(getattr(encoder, "image_size", SEGMENTATION_TILE))
    for i in range(0, len(coords), batch_size):
        chunk = coords[i:i + batch_size]
        imgs = np.stack([resize_tile(crop_tile(slide, x, y, s), side_in) for x, y, s in chunk])
        scores = tile_scores(encoder.encode_image(imgs), bank)
        for c, s in zip(chunk, scores):
            accumulate(acc, c, s, clip=True)
    full = tissue.at_level0(w, h)
    grid_t = full[::downsample, ::downsample] if downsample > 1 else full
    return finalize_mask(acc, grid_t), acc, coords
