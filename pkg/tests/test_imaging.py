import json

import numpy as np
import pytest

from imim.imaging import (Box, DatasetManifest, FusionError, MultimodalImage,
                          TilingError, background_mask, concat_modalities,
                          load_sample, luminance, read_image, reassemble_tiles,
                          resize_bilinear, synth_pair, synthetic_manifest, tile,
                          write_png, write_sample)


def make_rgb(h, w, seed=0):
    rng = np.random.default_rng(seed)
    return MultimodalImage(rng.uniform(size=(h, w, 3)), "rgb")


# ---------------------------------------------------------------------------
# channel fusion

def test_concat_modalities_shapes():
    rgb = make_rgb(512, 512)
    ir = np.random.default_rng(1).uniform(size=(512, 512))
    fused = concat_modalities(rgb, ir)
    assert fused.pixels.shape == (512, 512, 4)
    assert fused.modality == "rgb_ir"


def test_concat_modalities_all_zero():
    rgb = MultimodalImage(np.zeros((16, 16, 3)), "rgb")
    fused = concat_modalities(rgb, np.zeros((16, 16)))
    assert not fused.pixels.any()


def test_concat_modalities_ir_plane_exact():
    rgb = make_rgb(32, 48, seed=2)
    ir = np.random.default_rng(3).uniform(size=(32, 48))
    fused = concat_modalities(rgb, ir)
    assert np.array_equal(fused.pixels[:, :, 3], ir)
    assert np.array_equal(fused.pixels[:, :, :3], rgb.pixels)


def test_concat_modalities_dimension_mismatch():
    rgb = make_rgb(32, 32)
    with pytest.raises(FusionError, match=r"\(32, 32\).*\(16, 32\)"):
        concat_modalities(rgb, np.zeros((16, 32)))


def test_concat_then_slice_recovers_inputs():
    rgb = make_rgb(24, 24, seed=4)
    ir = np.random.default_rng(5).uniform(size=(24, 24))
    fused = concat_modalities(rgb, ir)
    assert np.array_equal(fused.rgb_only().pixels, rgb.pixels)
    assert np.array_equal(fused.ir_plane(), ir)


# ---------------------------------------------------------------------------
# bilinear resize

def test_resize_constant_image_exact():
    img = MultimodalImage(np.full((480, 480, 3), 0.37), "rgb")
    out = resize_bilinear(img, 512, 512)
    assert out.pixels.shape == (512, 512, 3)
    assert np.array_equal(out.pixels, np.full((512, 512, 3), 0.37))


def test_resize_identity_exact():
    img = make_rgb(20, 30, seed=6)
    out = resize_bilinear(img, 20, 30)
    assert np.array_equal(out.pixels, img.pixels)


def test_resize_checkerboard_hand_computed():
    # 2x2 board [[1,0],[0,1]] upsampled to 4x4 with corner-aligned sampling:
    # f(y,x) = (1-y)(1-x) + y*x on the unit square, sampled at {0,1/3,2/3,1}
    board = np.array([[1.0, 0.0], [0.0, 1.0]])
    img = MultimodalImage(np.repeat(board[:, :, None], 3, axis=2), "rgb")
    out = resize_bilinear(img, 4, 4)
    expected = np.array([
        [1.0, 2 / 3, 1 / 3, 0.0],
        [2 / 3, 5 / 9, 4 / 9, 1 / 3],
        [1 / 3, 4 / 9, 5 / 9, 2 / 3],
        [0.0, 1 / 3, 2 / 3, 1.0],
    ])
    for c in range(3):
        assert np.abs(out.pixels[:, :, c] - expected).max() <= 1e-12


def test_resize_rejects_tiny_target():
    with pytest.raises(ValueError):
        resize_bilinear(make_rgb(8, 8), 1, 8)


# ---------------------------------------------------------------------------
# tiling

def test_tile_counts_512_to_4():
    img = make_rgb(512, 512, seed=7)
    tiles = tile(img, 256, 256)
    assert len(tiles) == 4


def test_tile_whole_image_is_identity():
    img = make_rgb(64, 64, seed=8)
    tiles = tile(img, 64, 1)
    assert len(tiles) == 1
    assert np.array_equal(tiles[0].pixels, img.pixels)


def test_tile_overlapping_matches_bruteforce_crops():
    img = make_rgb(512, 512, seed=9)
    tiles = tile(img, 256, 128)
    assert len(tiles) == 9
    idx = 0
    for y in range(0, 512 - 256 + 1, 128):
        for x in range(0, 512 - 256 + 1, 128):
            assert np.array_equal(tiles[idx].pixels,
                                  img.pixels[y:y + 256, x:x + 256])
            idx += 1


def test_tile_too_large_rejected():
    with pytest.raises(TilingError):
        tile(make_rgb(32, 32), 64, 1)


def test_tile_reassemble_roundtrip():
    img = make_rgb(96, 128, seed=10)
    tiles = tile(img, 32, 32)
    back = reassemble_tiles(tiles, 3, 4)
    assert np.array_equal(back.pixels, img.pixels)


# ---------------------------------------------------------------------------
# synthetic generator

def test_synth_pair_deterministic():
    a, boxes_a = synth_pair(42, 64, 64)
    b, boxes_b = synth_pair(42, 64, 64)
    assert np.array_equal(a.pixels, b.pixels)
    assert boxes_a == boxes_b


def test_synth_pair_pixels_in_range():
    for seed in range(5):
        img, _ = synth_pair(seed, 64, 64)
        assert img.pixels.min() >= 0.0
        assert img.pixels.max() <= 1.0
        assert img.channels == 4


def test_synth_pair_background_ir_correlates_with_luminance():
    for seed in range(5):
        img, boxes = synth_pair(seed + 100, 128, 128)
        mask = background_mask(128, 128, boxes)
        lum = luminance(img.pixels[:, :, :3])[mask]
        ir = img.pixels[:, :, 3][mask]
        r = np.corrcoef(lum, ir)[0, 1]
        assert 0.5 <= r <= 0.99, f"seed {seed}: corr {r}"


def test_synth_pair_has_annotations():
    img, boxes = synth_pair(7, 64, 64)
    assert 1 <= len(boxes) <= 8
    for b in boxes:
        assert 0 <= b.x and b.x + b.w <= 64
        assert 0 <= b.y and b.y + b.h <= 64
        assert 0 <= b.cls < 4


def test_synth_pair_rejects_bad_dims():
    with pytest.raises(ValueError):
        synth_pair(0, 63, 64)


# ---------------------------------------------------------------------------
# manifests

def test_synthetic_manifest_iteration_stable():
    m1 = synthetic_manifest(8, 2, seed=13)
    m2 = synthetic_manifest(8, 2, seed=13)
    assert [s.source for s in m1.samples] == [s.source for s in m2.samples]
    assert len(m1.split("train")) == 8
    assert len(m1.split("eval")) == 2
    assert not {s.id for s in m1.split("train")} & {s.id for s in m1.split("eval")}


def test_manifest_json_roundtrip(tmp_path):
    m = synthetic_manifest(3, 1, seed=5)
    path = tmp_path / "manifest.json"
    m.save(path)
    raw = json.loads(path.read_text())
    assert set(raw) == {"seed", "samples"}
    assert set(raw["samples"][0]) == {"id", "source", "split", "modality"}
    back = DatasetManifest.load(path)
    assert back.seed == m.seed
    assert [s.to_dict() for s in back.samples] == [s.to_dict() for s in m.samples]


def test_manifest_rejects_duplicate_ids():
    from imim.imaging import SampleRecord
    recs = [SampleRecord("a", "synth:1", "train", "rgb"),
            SampleRecord("a", "synth:2", "eval", "rgb")]
    with pytest.raises(ValueError):
        DatasetManifest(0, recs)


def test_load_sample_synthetic_and_modality_slice():
    m = synthetic_manifest(2, 0, seed=21)
    img4, boxes = load_sample(m, m.samples[0], 64, 64)
    assert img4.channels == 4
    rec_rgb = m.samples[1]
    rec_rgb.modality = "rgb"
    img3, _ = load_sample(m, rec_rgb, 64, 64)
    assert img3.channels == 3


def test_write_and_read_sample_files(tmp_path):
    img, boxes = synth_pair(3, 64, 64)
    write_sample(tmp_path, "im0", img, boxes)
    rgb = read_image(tmp_path / "im0_rgb.png")
    ir = read_image(tmp_path / "im0_ir.png")
    assert rgb.shape == (64, 64, 3)
    assert ir.shape == (64, 64)
    # 8-bit quantization bound
    assert np.abs(rgb - img.pixels[:, :, :3]).max() <= 0.5 / 255 + 1e-12
    sidecar = json.loads((tmp_path / "im0_boxes.json").read_text())
    assert [Box.from_dict(d) for d in sidecar["boxes"]] == boxes


def test_load_sample_from_files(tmp_path):
    img, boxes = synth_pair(11, 64, 64)
    write_sample(tmp_path, "im1", img, boxes)
    from imim.imaging import SampleRecord
    m = DatasetManifest(0, [SampleRecord("im1", "im1", "train", "rgb_ir")],
                        root=tmp_path)
    back, back_boxes = load_sample(m, m.samples[0], 64, 64)
    assert back.channels == 4
    assert np.abs(back.pixels - img.pixels).max() <= 0.5 / 255 + 1e-12
    assert back_boxes == boxes
