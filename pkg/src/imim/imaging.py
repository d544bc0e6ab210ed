"""Image ingestion, RGB+IR channel fusion, tiling and synthetic data.

Pixels are float64 in [0,1] (loaded 8-bit values are divided by 255). The
synthetic generator produces correlated RGB+IR pairs with rectangular objects
whose class identity is partly carried by the IR channel alone, plus box
annotations for the linear probe.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


class FusionError(ValueError):
    """RGB/IR pair cannot be concatenated."""


class TilingError(ValueError):
    """Tiling parameters incompatible with the image."""


@dataclass
class MultimodalImage:
    """H x W x C pixel block in [0,1]; C=3 (rgb) or C=4 (rgb_ir, order R,G,B,IR)."""

    pixels: np.ndarray
    modality: str

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(np.asarray(self.pixels, dtype=np.float64))
        if self.pixels.ndim != 3 or self.pixels.shape[2] not in (3, 4):
            raise ValueError(f"expected HxWx3 or HxWx4 pixels, got {self.pixels.shape}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("pixel values must lie in [0,1]")
        expected = "rgb_ir" if self.pixels.shape[2] == 4 else "rgb"
        if self.modality != expected:
            raise ValueError(
                f"modality {self.modality!r} inconsistent with {self.pixels.shape[2]} channels")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def rgb_only(self) -> "MultimodalImage":
        return MultimodalImage(self.pixels[:, :, :3].copy(), "rgb")

    def ir_plane(self) -> np.ndarray:
        if self.channels != 4:
            raise ValueError("image has no IR channel")
        return self.pixels[:, :, 3].copy()


@dataclass
class Box:
    x: int
    y: int
    w: int
    h: int
    cls: int

    def to_dict(self):
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h, "class": self.cls}

    @staticmethod
    def from_dict(d):
        return Box(d["x"], d["y"], d["w"], d["h"], d["class"])


def luminance(rgb: np.ndarray) -> np.ndarray:
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


def concat_modalities(rgb: MultimodalImage, ir: np.ndarray) -> MultimodalImage:
    """Stack IR as a fourth channel onto RGB; channel order [R,G,B,IR]."""
    ir = np.asarray(ir, dtype=np.float64)
    if ir.ndim == 3 and ir.shape[2] == 1:
        ir = ir[:, :, 0]
    if rgb.channels != 3:
        raise FusionError(f"expected a 3-channel RGB image, got {rgb.channels} channels")
    if ir.ndim != 2 or ir.shape != (rgb.height, rgb.width):
        raise FusionError(
            f"RGB {rgb.pixels.shape[:2]} and IR {ir.shape} dimensions do not match")
    fused = np.concatenate([rgb.pixels, ir[:, :, None]], axis=2)
    return MultimodalImage(fused, "rgb_ir")


def _resize_plane_stack(px: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of an HxWxC array.

    Uses the lerp form v0 + w*(v1-v0) so constant fields and identity resizes
    are reproduced exactly.
    """
    h, w = px.shape[:2]
    ys = np.linspace(0.0, h - 1, new_h)
    xs = np.linspace(0.0, w - 1, new_w)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    p00 = px[np.ix_(y0, x0)]
    p01 = px[np.ix_(y0, x1)]
    p10 = px[np.ix_(y1, x0)]
    p11 = px[np.ix_(y1, x1)]
    top = p00 + wx * (p01 - p00)
    bot = p10 + wx * (p11 - p10)
    return top + wy * (bot - top)


def resize_bilinear(img: MultimodalImage, new_h: int, new_w: int) -> MultimodalImage:
    if new_h < 2 or new_w < 2:
        raise ValueError(f"target dimensions must be >= 2, got {new_h}x{new_w}")
    out = _resize_plane_stack(img.pixels, new_h, new_w)
    return MultimodalImage(np.clip(out, 0.0, 1.0), img.modality)


def tile(img: MultimodalImage, tile_px: int, stride: int) -> list[MultimodalImage]:
    """Raster-order pixel-exact crops; count per axis is floor((dim-tile)/stride)+1."""
    if tile_px > min(img.height, img.width):
        raise TilingError(
            f"tile {tile_px} larger than image {img.height}x{img.width}")
    if stride < 1:
        raise TilingError(f"stride must be >= 1, got {stride}")
    tiles = []
    for y in range(0, img.height - tile_px + 1, stride):
        for x in range(0, img.width - tile_px + 1, stride):
            tiles.append(MultimodalImage(
                img.pixels[y:y + tile_px, x:x + tile_px].copy(), img.modality))
    return tiles


def reassemble_tiles(tiles: list[MultimodalImage], rows: int, cols: int) -> MultimodalImage:
    """Inverse of tile() at stride == tile size."""
    if len(tiles) != rows * cols:
        raise TilingError(f"{len(tiles)} tiles cannot fill a {rows}x{cols} grid")
    bands = [np.concatenate([tiles[r * cols + c].pixels for c in range(cols)], axis=1)
             for r in range(rows)]
    return MultimodalImage(np.concatenate(bands, axis=0), tiles[0].modality)


# ---------------------------------------------------------------------------
# synthetic RGB+IR generation

N_CLASSES = 4

# two RGB-confusable pairs: classes 0/1 share a palette, as do 2/3; within a
# pair only the IR thermal offset separates them
_PALETTE = np.array([
    [0.80, 0.20, 0.20],
    [0.80, 0.20, 0.20],
    [0.20, 0.30, 0.80],
    [0.20, 0.30, 0.80],
])
_THERMAL = np.array([-0.35, 0.35, -0.35, 0.35])


def synth_pair(seed: int, h: int, w: int) -> tuple[MultimodalImage, list[Box]]:
    """Deterministic synthetic RGB+IR image with annotated rectangular objects.

    Background is smooth low-frequency noise; the IR channel tracks RGB
    luminance plus an independent smooth field, and each object adds a
    class-specific thermal offset, so IR carries information absent from RGB.
    """
    if h % 16 or w % 16:
        raise ValueError(f"synthetic dimensions must be multiples of 16, got {h}x{w}")
    rng = np.random.default_rng(seed)
    coarse_rgb = rng.uniform(0.2, 0.8, size=(h // 16, w // 16, 3))
    coarse_ir = rng.uniform(0.0, 1.0, size=(h // 16, w // 16, 1))
    rgb = _resize_plane_stack(coarse_rgb, h, w)
    ir_field = _resize_plane_stack(coarse_ir, h, w)[:, :, 0]

    boxes: list[Box] = []
    occupied = np.zeros((h, w), dtype=bool)
    k = int(rng.integers(1, 9))
    for _ in range(k):
        for _try in range(20):
            bw = int(rng.integers(w // 8, w // 3 + 1))
            bh = int(rng.integers(h // 8, h // 3 + 1))
            x = int(rng.integers(0, w - bw + 1))
            y = int(rng.integers(0, h - bh + 1))
            if not occupied[y:y + bh, x:x + bw].any():
                break
        else:
            continue
        occupied[y:y + bh, x:x + bw] = True
        cls = int(rng.integers(0, N_CLASSES))
        jitter = rng.uniform(-0.05, 0.05, size=3)
        rgb[y:y + bh, x:x + bw] = np.clip(_PALETTE[cls] + jitter, 0.0, 1.0)
        boxes.append(Box(x, y, bw, bh, cls))

    ir = 0.70 * luminance(rgb) + 0.18 * ir_field + 0.12
    for b in boxes:
        ir[b.y:b.y + b.h, b.x:b.x + b.w] += _THERMAL[b.cls]
    ir = np.clip(ir, 0.0, 1.0)

    pixels = np.clip(np.concatenate([rgb, ir[:, :, None]], axis=2), 0.0, 1.0)
    return MultimodalImage(pixels, "rgb_ir"), boxes


def background_mask(h: int, w: int, boxes: list[Box]) -> np.ndarray:
    mask = np.ones((h, w), dtype=bool)
    for b in boxes:
        mask[b.y:b.y + b.h, b.x:b.x + b.w] = False
    return mask


# ---------------------------------------------------------------------------
# manifests and file IO

@dataclass
class SampleRecord:
    id: str
    source: str  # "synth:<seed>" or a path prefix relative to the manifest
    split: str  # "train" | "eval"
    modality: str  # "rgb" | "rgb_ir"

    def to_dict(self):
        return {"id": self.id, "source": self.source,
                "split": self.split, "modality": self.modality}


@dataclass
class DatasetManifest:
    seed: int
    samples: list[SampleRecord]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest sample ids must be unique")

    def split(self, name: str) -> list[SampleRecord]:
        return [s for s in self.samples if s.split == name]

    def to_json(self) -> str:
        return json.dumps(
            {"seed": self.seed, "samples": [s.to_dict() for s in self.samples]},
            indent=2)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @staticmethod
    def load(path) -> "DatasetManifest":
        path = Path(path)
        raw = json.loads(path.read_text())
        samples = [SampleRecord(s["id"], s["source"], s["split"], s["modality"])
                   for s in raw["samples"]]
        return DatasetManifest(int(raw["seed"]), samples, root=path.parent)


def synthetic_manifest(n_train: int, n_eval: int, seed: int,
                       modality: str = "rgb_ir") -> DatasetManifest:
    """In-memory manifest of synthetic samples; per-sample seeds derived from seed."""
    child = np.random.SeedSequence([seed]).spawn(n_train + n_eval)
    samples = []
    for i in range(n_train + n_eval):
        split = "train" if i < n_train else "eval"
        s = int(child[i].generate_state(1)[0])
        samples.append(SampleRecord(f"s{i:04d}", f"synth:{s}", split, modality))
    return DatasetManifest(seed, samples)


def load_sample(manifest: DatasetManifest, record: SampleRecord,
                h: int, w: int) -> tuple[MultimodalImage, list[Box]]:
    """Materialize one sample at the requested size and the record's modality."""
    if record.source.startswith("synth:"):
        img, boxes = synth_pair(int(record.source[6:]), h, w)
    else:
        prefix = manifest.root / record.source
        rgb = read_image(Path(f"{prefix}_rgb.png"))
        img = MultimodalImage(rgb, "rgb")
        ir_path = Path(f"{prefix}_ir.png")
        if ir_path.exists():
            img = concat_modalities(img, read_image(ir_path))
        boxes_path = Path(f"{prefix}_boxes.json")
        boxes = []
        if boxes_path.exists():
            boxes = [Box.from_dict(d)
                     for d in json.loads(boxes_path.read_text())["boxes"]]
        if img.height != h or img.width != w:
            img = resize_bilinear(img, h, w)
    if record.modality == "rgb" and img.channels == 4:
        img = img.rgb_only()
    if record.modality == "rgb_ir" and img.channels != 4:
        raise FusionError(f"sample {record.id} has no IR channel")
    return img, boxes


def read_image(path) -> np.ndarray:
    """8-bit PNG (or PPM/PGM fallback) to float64 in [0,1]; keeps 1/3/4 channels."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype != np.uint8:
        raise ValueError(f"only 8-bit images are supported, got {arr.dtype}")
    return arr.astype(np.float64) / 255.0


def write_png(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    mode = {2: "L", 3: "RGB", 4: "RGBA"}[data.ndim if data.ndim == 2 else data.shape[2]]
    Image.fromarray(data, mode=mode).save(path)


def write_sample(directory, sample_id: str, img: MultimodalImage,
                 boxes: list[Box]) -> None:
    """Materialize a sample as <id>_rgb.png, <id>_ir.png and <id>_boxes.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_png(directory / f"{sample_id}_rgb.png", img.pixels[:, :, :3])
    if img.channels == 4:
        write_png(directory / f"{sample_id}_ir.png", img.pixels[:, :, 3])
    (directory / f"{sample_id}_boxes.json").write_text(
        json.dumps({"boxes": [b.to_dict() for b in boxes]}, indent=2))
