import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from histovl.data_io import read_pgm, read_ppm
from histovl.exceptions import ConsistencyError, InvalidArgumentError, ShapeError
from histovl.numerics import SeededRng
from histovl.prompting import ClassEmbeddingBank
from histovl.segmentation import (
    IGNORE, PALETTE, ScoreAccumulator, accumulate, dice_precision_recall, export_mask, finalize_mask,
    overlap_tile_grid, segment_slide,
)
from histovl.wsi_pipeline import RandomProjectionEncoder, TissueMask

import oracles


def _full(h, w):
    return TissueMask(np.ones((h, w), bool))


# --- overlap grid ------------------------------------------------------------------------

def test_one_tile_square():
    assert overlap_tile_grid(_full(224, 224), 224, 224) == [(0, 0, 224)]


def test_strip_has_five_tiles():
    coords = overlap_tile_grid(_full(224, 448), 448, 224)
    assert [x for x, _, _ in coords] == [0, 56, 112, 168, 224]


def test_no_overlap_sixteen_tiles():
    coords = overlap_tile_grid(_full(1024, 1024), 1024, 1024, tile_side=256, overlap=0.0)
    assert len(coords) == 16
    assert sorted({x for x, _, _ in coords}) == [0, 256, 512, 768]


def test_small_slide_single_centered_tile():
    assert overlap_tile_grid(_full(100, 100), 100, 100) == [(-62, -62, 224)]


def test_flush_tile_and_errors():
    coords = overlap_tile_grid(_full(64, 250), 250, 64, tile_side=64, overlap=0.5)
    assert coords[-1][0] + 64 == 250
    assert overlap_tile_grid(TissueMask(np.zeros((8, 8), bool)), 8, 8) == []
    with pytest.raises(InvalidArgumentError):
        overlap_tile_grid(_full(8, 8), 8, 8, overlap=1.0)


@given(st.integers(0, 5000))
def test_grid_covers_every_tissue_pixel(seed):
    r = SeededRng(seed)
    h, w = int(r.integers(20, 70)), int(r.integers(20, 70))
    grid = r.random((h, w)) < 0.05
    side = int(r.integers(4, 24))
    overlap = (0.0, 0.5, 0.75)[int(r.integers(0, 3))]
    coords = overlap_tile_grid(TissueMask(grid), w, h, side, overlap)
    cover = np.zeros((h, w), bool)
    for x, y, s in coords:
        cover[max(0, y):y + s, max(0, x):x + s] = True
    assert not np.any(grid & ~cover)
    assert coords == overlap_tile_grid(TissueMask(grid.copy()), w, h, side, overlap)


# --- accumulation ---------------------------------------------------------------------------

def test_single_tile_average():
    acc = accumulate(ScoreAccumulator(6, 6, 2), (1, 1, 3), [0.25, -0.5])
    m = acc.mean()
    assert np.all(m[:, 1:4, 1:4] == np.array([0.25, -0.5])[:, None, None])
    assert acc.coverage.sum() == 9


def test_two_identical_tiles_average():
    acc = ScoreAccumulator(4, 4, 1)
    accumulate(acc, (0, 0, 4), [0.2])
    accumulate(acc, (0, 0, 4), [0.6])
    np.testing.assert_allclose(acc.mean(), 0.4, atol=1e-15)


def _random_layout(r, h, w, c, n):
    tiles = []
    for _ in range(n):
        side = int(r.integers(1, min(h, w) + 1))
        x, y = int(r.integers(0, w - side + 1)), int(r.integers(0, h - side + 1))
        tiles.append(((x, y, side), r.normal(size=c)))
    return tiles


def test_stitcher_matches_brute_force():
    r = SeededRng(13)
    for _ in range(40):
        h, w, c = int(r.integers(1, 65)), int(r.integers(1, 65)), int(r.integers(1, 5))
        tiles = _random_layout(r, h, w, c, int(r.integers(1, 12)))
        acc = ScoreAccumulator(w, h, c)
        for coord, s in tiles:
            accumulate(acc, coord, s)
        ref = oracles.stitch_brute(h, w, c, tiles)
        covered = acc.coverage > 0
        assert np.array_equal(covered, ~np.isnan(ref[0]))
        assert np.max(np.abs(acc.mean()[:, covered] - ref[:, covered]), initial=0.0) <= 1e-12
        mask = finalize_mask(acc, covered)
        brute = np.full((h, w), IGNORE)
        for y, x in zip(*np.nonzero(covered)):
            col = ref[:, y, x].tolist()
            brute[y, x] = max(range(c), key=lambda j: (col[j], -j))
        assert np.array_equal(mask.grid, brute)


@given(st.integers(0, 5000))
def test_accumulation_order_and_sharding(seed):
    r = SeededRng(seed)
    tiles = _random_layout(r, 32, 40, 3, 10)
    serial = ScoreAccumulator(40, 32, 3)
    for coord, s in tiles:
        accumulate(serial, coord, s)
    shuffled = ScoreAccumulator(40, 32, 3)
    for i in r.permutation(len(tiles)):
        accumulate(shuffled, *tiles[i])
    a, b = ScoreAccumulator(40, 32, 3), ScoreAccumulator(40, 32, 3)
    for i, (coord, s) in enumerate(tiles):
        accumulate(a if i % 2 else b, coord, s)
    merged = a.merge(b)
    assert np.max(np.abs(shuffled.mean() - serial.mean())) < 1e-9
    assert np.max(np.abs(merged.mean() - serial.mean())) < 1e-9
    assert np.array_equal(merged.coverage, serial.coverage)


def test_accumulate_errors():
    acc = ScoreAccumulator(8, 8, 2)
    with pytest.raises(InvalidArgumentError):
        accumulate(acc, (6, 0, 4), [0, 0])
    with pytest.raises(ShapeError):
        accumulate(acc, (0, 0, 4), [0, 0, 0])
    with pytest.raises(InvalidArgumentError):
        accumulate(acc, (0, 0, 4), [np.nan, 0])
    accumulate(acc, (6, 6, 4), [1, 0], clip=True)
    assert acc.coverage[6:, 6:].sum() == 4


def test_downsampled_footprint():
    acc = accumulate(ScoreAccumulator(10, 10, 1, downsample=4), (3, 3, 4), [1.0])
    assert acc.coverage.shape == (3, 3)
    assert acc.coverage.tolist() == [[1, 1, 0], [1, 1, 0], [0, 0, 0]]


# --- masks ----------------------------------------------------------------------------------

def test_uniform_favouring_class_one():
    acc = accumulate(ScoreAccumulator(4, 4, 3), (0, 0, 4), [0.1, 0.9, 0.2])
    tissue = np.ones((4, 4), bool)
    tissue[0, 0] = False
    grid = finalize_mask(acc, tissue).grid
    assert grid[0, 0] == IGNORE and np.all(grid[tissue] == 1)


def test_split_at_tile_boundary():
    acc = ScoreAccumulator(8, 4, 2)
    accumulate(acc, (0, 0, 4), [1.0, 0.0])
    accumulate(acc, (4, 0, 4), [0.0, 1.0])
    grid = finalize_mask(acc, np.ones((4, 8), bool)).grid
    assert np.all(grid[:, :4] == 0) and np.all(grid[:, 4:] == 1)


def test_empty_tissue_all_ignore():
    grid = finalize_mask(ScoreAccumulator(5, 5, 2), np.zeros((5, 5), bool)).grid
    assert np.all(grid == IGNORE)


def test_uncovered_tissue_is_error():
    acc = accumulate(ScoreAccumulator(8, 8, 2), (0, 0, 4), [1.0, 0.0])
    with pytest.raises(ConsistencyError):
        finalize_mask(acc, np.ones((8, 8), bool))
    with pytest.raises(ShapeError):
        finalize_mask(acc, np.ones((4, 4), bool))


def test_export(tmp_path):
    acc = ScoreAccumulator(4, 2, 2)
    accumulate(acc, (0, 0, 2), [1.0, 0.0])
    accumulate(acc, (2, 0, 2), [0.0, 1.0])
    tissue = np.ones((2, 4), bool)
    tissue[1, 3] = False
    mask = finalize_mask(acc, tissue)
    export_mask(mask, tmp_path / "m.ppm", tmp_path / "m.pgm")
    assert read_pgm(tmp_path / "m.pgm").tobytes() == mask.grid.tobytes()
    rgb = read_ppm(tmp_path / "m.ppm")
    assert rgb[0, 0].tolist() == PALETTE[0].tolist() and rgb[1, 3].tolist() == [255, 255, 255]


# --- dice --------------------------------------------------------------------------------------

def test_dice_identical_and_disjoint():
    a = np.array([[1, 0], [1, 1]])
    assert dice_precision_recall(a, a) == (1.0, 1.0, 1.0)
    assert dice_precision_recall(a, 1 - a) == (0.0, 0.0, 0.0)


def test_dice_left_half():
    truth = np.ones((4, 6), int)
    pred = np.zeros((4, 6), int)
    pred[:, :3] = 1
    d, p, r = dice_precision_recall(pred, truth)
    assert abs(d - 2 / 3) < 1e-12 and p == 1.0 and r == 0.5


def test_dice_both_empty_and_shape():
    z = np.zeros((3, 3), int)
    assert dice_precision_recall(z, z) == (1.0, 1.0, 1.0)
    with pytest.raises(ShapeError):
        dice_precision_recall(z, np.zeros((2, 3), int))


@given(st.integers(0, 10_000))
def test_dice_symmetric_and_harmonic(seed):
    r = SeededRng(seed)
    a = (r.random((6, 7)) < r.random()).astype(int)
    b = (r.random((6, 7)) < r.random()).astype(int)
    d, p, rec = dice_precision_recall(a, b)
    assert abs(d - dice_precision_recall(b, a)[0]) < 1e-12
    hm = 0.0 if p + rec == 0 else 2 * p * rec / (p + rec)
    assert abs(d - hm) < 1e-12


# --- whole slide -------------------------------------------------------------------------------

def test_segment_slide_two_colours():
    enc = RandomProjectionEncoder(dim=16, image_size=8, seed=1)
    slide = np.zeros((96, 192, 3), np.uint8)
    slide[:, :96] = (200, 60, 60)
    slide[:, 96:] = (60, 60, 200)
    protos = enc.encode_image(np.stack([np.full((8, 8, 3), (200, 60, 60), np.uint8),
                                        np.full((8, 8, 3), (60, 60, 200), np.uint8)]))
    bank = ClassEmbeddingBank(["red", "blue"], protos)
    mask, acc, coords = segment_slide(slide, _full(96, 192), enc, bank, tile_side=32, overlap=0.75)
    truth = np.zeros((96, 192), int)
    truth[:, 96:] = 1
    assert dice_precision_recall(mask, truth)[0] > 0.9
    assert len(coords) == 21 * 9 and acc.coverage.min() >= 1
