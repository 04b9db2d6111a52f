"""Tissue segmentation, classification tiling and the tile-embedding driver."""
from __future__ import annotations

import math
import re
import zlib
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from .data_io import EmbeddingStore, SlideManifest
from .exceptions import InvalidArgumentError, ShapeError

DEFAULT_SAT_THRESHOLD = 20
DEFAULT_MEDIAN_KERNEL = 7
DEFAULT_CLOSE_KERNEL = 7
DEFAULT_MIN_AREA = 64
DEFAULT_DOWNSAMPLE = 8
CLASSIFICATION_TILE = 256
ENCODER_INPUT = 224


@dataclass
class TissueMask:
    grid: np.ndarray  # bool, (ceil(H / downsample), ceil(W / downsample))
    downsample: int = 1

    @property
    def empty(self) -> bool:
        return not bool(self.grid.any())

    def bbox_level0(self, width: int, height: int):
        """Tissue bounding box ``(x0, y0, x1, y1)`` in level-0 pixels, or None."""
        rows = np.flatnonzero(self.grid.any(axis=1))
        cols = np.flatnonzero(self.grid.any(axis=0))
        if rows.size == 0:
            return None
        ds = self.downsample
        return (int(cols[0]) * ds, int(rows[0]) * ds,
                min(width, (int(cols[-1]) + 1) * ds), min(height, (int(rows[-1]) + 1) * ds))

    def at_level0(self, width: int, height: int) -> np.ndarray:
        """Nearest-neighbour upsample to the full slide grid."""
        ys = np.minimum(np.arange(height) // self.downsample, self.grid.shape[0] - 1)
        xs = np.minimum(np.arange(width) // self.downsample, self.grid.shape[1] - 1)
        return self.grid[np.ix_(ys, xs)]


def downsample_raster(image, factor: int) -> np.ndarray:
    """Block-average by ``factor``; output is ceil(H/f) x ceil(W/f)."""
    img = np.asarray(image)
    if factor == 1:
        return img.copy()
    h, w = img.shape[:2]
    oh, ow = math.ceil(h / factor), math.ceil(w / factor)
    pad = ((0, oh * factor - h), (0, ow * factor - w)) + ((0, 0),) * (img.ndim - 2)
    p = np.pad(img.astype(np.float64), pad, mode="edge")
    p = p.reshape(oh, factor, ow, factor, *img.shape[2:]).mean(axis=(1, 3))
    return np.floor(p + 0.5).astype(np.uint8)


def saturation_channel(image) -> np.ndarray:
    """8-bit HSV saturation: ``round(255 * (max - min) / max)``, 0 where max = 0."""
    img = np.asarray(image).astype(np.int64)
    mx = img.max(axis=2)
    mn = img.min(axis=2)
    s = np.zeros(mx.shape, dtype=np.float64)
    nz = mx > 0
    s[nz] = 255.0 * (mx[nz] - mn[nz]) / mx[nz]
    return np.floor(s + 0.5).astype(np.uint8)


def segment_tissue(low_res, sat_threshold: int = DEFAULT_SAT_THRESHOLD,
                   median_kernel: int = DEFAULT_MEDIAN_KERNEL, close_kernel: int = DEFAULT_CLOSE_KERNEL,
                   min_area: int = DEFAULT_MIN_AREA, downsample: int = 1) -> TissueMask:
    """Binary tissue mask from a low-resolution RGB raster.

    Saturation threshold (strictly greater), median filter with replicated
    borders, binary closing with a square kernel, then removal of
    8-connected components smaller than ``min_area`` pixels.
    """
    if median_kernel < 1 or median_kernel % 2 == 0 or close_kernel < 1 or close_kernel % 2 == 0:
        raise InvalidArgumentError("median and closing kernels must be odd positive sizes")
    if not 0 <= sat_threshold <= 255:
        raise InvalidArgumentError("sat_threshold must be an 8-bit value")
    img = np.asarray(low_res)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError("low_res must be an (H, W, 3) raster")
    binary = saturation_channel(img) > sat_threshold
    if median_kernel > 1:
        binary = ndimage.median_filter(binary.astype(np.uint8), size=median_kernel, mode="nearest") > 0
    if close_kernel > 1:
        dil = ndimage.maximum_filter(binary, size=close_kernel, mode="constant", cval=0)
        binary = ndimage.minimum_filter(dil, size=close_kernel, mode="constant", cval=1)
    labels, n = ndimage.label(binary, structure=np.ones((3, 3), dtype=bool))
    if n:
        areas = np.bincount(labels.ravel())
        keep = areas >= min_area
        keep[0] = False
        binary = keep[labels]
    return TissueMask(binary.astype(bool), downsample)


def render_mask(mask: TissueMask) -> np.ndarray:
    """Tissue as saturated pink on white, for round-tripping a mask."""
    out = np.full(mask.grid.shape + (3,), 255, dtype=np.uint8)
    out[mask.grid] = (230, 120, 170)
    return out


def _axis_positions(lo, hi, side, limit):
    extent = hi - lo
    n = max(1, math.ceil(extent / side))
    start = lo - (n * side - extent) // 2
    start = min(max(start, 0), max(0, limit - side))
    return [start + i * side for i in range(n) if start + i * side + side <= limit or limit < side]


def classification_tile_grid(mask: TissueMask, width: int, height: int,
                             tile_side: int = CLASSIFICATION_TILE, policy: str = "center"):
    """Contiguous non-overlapping tiles over the tissue bounding box.

    The grid is centred on the bounding box and shifted inside the slide. A
    tile is kept when its centre pixel is tissue (``policy="center"``) or when
    at least half of its footprint is tissue (``policy="area"``). Returns a list
    of ``(x, y, side)`` in level-0 pixels, row-major.
    """
    if policy not in ("center", "area"):
        raise InvalidArgumentError("policy must be 'center' or 'area'")
    box = mask.bbox_level0(width, height)
    if box is None:
        return []
    x0, y0, x1, y1 = box
    full = mask.at_level0(width, height)
    coords = []
    for y in _axis_positions(y0, y1, tile_side, height):
        for x in _axis_positions(x0, x1, tile_side, width):
            if policy == "center":
                cy = min(height - 1, max(0, y + tile_side // 2))
                cx = min(width - 1, max(0, x + tile_side // 2))
                keep = bool(full[cy, cx])
            else:
                foot = full[max(0, y):y + tile_side, max(0, x):x + tile_side]
                keep = foot.sum() * 2 >= tile_side * tile_side
            if keep:
                coords.append((int(x), int(y), int(tile_side)))
    return coords


def crop_tile(slide, x, y, side) -> np.ndarray:
    """Crop with white padding where the tile leaves the slide."""
    h, w = slide.shape[:2]
    out = np.full((side, side, 3), 255, dtype=np.uint8)
    sx0, sy0 = max(0, x), max(0, y)
    sx1, sy1 = min(w, x + side), min(h, y + side)
    if sx1 > sx0 and sy1 > sy0:
        out[sy0 - y:sy1 - y, sx0 - x:sx1 - x] = slide[sy0:sy1, sx0:sx1]
    return out


def resize_tile(tile, side: int) -> np.ndarray:
    if tile.shape[0] == side and tile.shape[1] == side:
        return np.asarray(tile, dtype=np.uint8)
    return np.asarray(Image.fromarray(np.asarray(tile, dtype=np.uint8)).resize((side, side), Image.BOX))


class RandomProjectionEncoder:
    """Deterministic stand-in encoder: seeded Gaussian projection of pixels."""

    def __init__(self, dim: int = 32, image_size: int = 32, seed: int = 0):
        from .numerics.rng import SeededRng

        self.dim = dim
        self.image_size = image_size
        self.seed = seed
        self._w = SeededRng(seed).normal(size=(image_size * image_size * 3, dim))

    def encode_image(self, images) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64).reshape(len(images), -1) / 255.0 - 0.5
        return _unit_rows(x @ self._w)

    def encode_text(self, texts) -> np.ndarray:
        """Bag of words: each lowercase word maps to a fixed Gaussian vector.

        Only useful for smoke runs; the text side shares nothing with the
        image projection.
        """
        from .numerics.rng import SeededRng

        out = np.zeros((len(texts), self.dim))
        for i, t in enumerate(texts):
            for w in re.findall(r"[a-z0-9]+", t.lower()):
                out[i] += SeededRng(self.seed * 1_000_003 + zlib.crc32(w.encode())).normal(size=self.dim)
        return _unit_rows(out)


def _unit_rows(z):
    n = np.linalg.norm(z, axis=1, keepdims=True)
    return z / np.where(n == 0, 1.0, n)


def embed_slide(slide, coords, encoder, slide_id="slide", store_path="", label=None,
                magnification=10.0, batch_size=256):
    """Embed every tile in ``coords`` (grid order) with ``encoder``.

    Tiles are resized to ``encoder.image_size``. Returns the store and the
    matching manifest.
    """
    slide = np.asarray(slide)
    side_in = int(getattr(encoder, "image_size", ENCODER_INPUT))
    vecs = []
    for i in range(0, len(coords), batch_size):
        batch = np.stack([resize_tile(crop_tile(slide, x, y, s), side_in) for x, y, s in coords[i:i + batch_size]])
        vecs.append(np.asarray(encoder.encode_image(batch), dtype=np.float64))
    dim = int(getattr(encoder, "embed_dim", getattr(encoder, "dim", 0)))
    if vecs:
        arr = np.concatenate(vecs).astype(np.float32)
    else:
        arr = np.zeros((0, dim), dtype=np.float32)
    ids = [f"{slide_id}:{x}:{y}" for x, y, _ in coords]
    store = EmbeddingStore(arr, ids, normalized=bool(len(arr)))
    manifest = SlideManifest(slide_id=slide_id, width_px=int(slide.shape[1]), height_px=int(slide.shape[0]),
                             tile_coords=[tuple(c) for c in coords], store_path=store_path, label=label,
                             magnification=magnification)
    manifest.validate(store)
    return store, manifest
