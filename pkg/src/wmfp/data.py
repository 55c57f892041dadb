"""Deterministic synthetic scenes and PPM/PNG image files.

Images are float32 arrays of shape (3, H, W) with values in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .seeding import subseed

SUPERSAMPLE = 4


@dataclass(frozen=True)
class SyntheticSceneSpec:
    seed: int = 0
    side: int = 32
    shape_count: tuple = (2, 5)
    palette: tuple = (0.05, 0.95)
    background: str = "mixed"  # "solid", "gradient" or "mixed"

    def __post_init__(self):
        if self.side % 4 or self.side <= 0:
            raise ValueError(f"image side must be a positive multiple of 4, got {self.side}")
        lo, hi = self.shape_count
        if lo < 1 or hi < lo:
            raise ValueError(f"shape count range must satisfy 1 <= lo <= hi, got {self.shape_count}")
        if self.background not in ("solid", "gradient", "mixed"):
            raise ValueError(f"unknown background mode {self.background!r}")


def _color(rng, palette):
    return rng.uniform(palette[0], palette[1], size=3)


def generate(spec: SyntheticSceneSpec, index: int) -> np.ndarray:
    """Render scene ``index``: a background plus anti-aliased rectangles, discs and ramps."""
    if index < 0:
        raise ValueError("index must be >= 0")
    rng = np.random.default_rng(subseed(spec.seed, f"scene/{index}"))
    n = spec.side * SUPERSAMPLE
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) / n
    mode = spec.background
    if mode == "mixed":
        mode = "gradient" if rng.random() < 0.5 else "solid"
    c0 = _color(rng, spec.palette)
    if mode == "solid":
        canvas = np.broadcast_to(c0[:, None, None], (3, n, n)).copy()
    else:
        c1 = _color(rng, spec.palette)
        theta = rng.uniform(0, 2 * np.pi)
        t = (np.cos(theta) * (xx - 0.5) + np.sin(theta) * (yy - 0.5)) / np.sqrt(0.5) + 0.5
        t = np.clip(t, 0, 1)
        canvas = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
    count = int(rng.integers(spec.shape_count[0], spec.shape_count[1] + 1))
    for _ in range(count):
        kind = rng.integers(0, 3)
        color = _color(rng, spec.palette)
        if kind == 0:
            x0, y0 = rng.uniform(-0.1, 0.8, size=2)
            w, h = rng.uniform(0.15, 0.6, size=2)
            mask = (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
            canvas[:, mask] = color[:, None]
        elif kind == 1:
            cx, cy = rng.uniform(0.1, 0.9, size=2)
            r = rng.uniform(0.08, 0.3)
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 < r * r
            canvas[:, mask] = color[:, None]
        else:
            x0, y0 = rng.uniform(0.0, 0.6, size=2)
            w, h = rng.uniform(0.25, 0.5, size=2)
            mask = (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
            other = _color(rng, spec.palette)
            ramp = np.clip((xx - x0) / w, 0, 1)
            fill = color[:, None, None] * (1 - ramp) + other[:, None, None] * ramp
            canvas[:, mask] = fill[:, mask]
    img = canvas.reshape(3, spec.side, SUPERSAMPLE, spec.side, SUPERSAMPLE).mean(axis=(2, 4))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_batch(spec: SyntheticSceneSpec, indices: Sequence[int]) -> np.ndarray:
    return np.stack([generate(spec, int(i)) for i in indices])


class ImageDataset:
    """A fixed, cached range of synthetic scenes."""

    def __init__(self, spec: SyntheticSceneSpec, start: int, count: int):
        if count <= 0:
            raise ValueError("dataset must be non-empty")
        self.spec, self.start, self.count = spec, start, count
        self._images: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.count

    @property
    def images(self) -> np.ndarray:
        if self._images is None:
            self._images = generate_batch(self.spec, range(self.start, self.start + self.count))
        return self._images


# ---------------------------------------------------------------- file I/O

class ImageFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def to_bytes(image: np.ndarray) -> np.ndarray:
    """(3, H, W) float image -> (H, W, 3) uint8 with round-half-to-even quantization."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {img.shape}")
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def from_bytes(pixels: np.ndarray) -> np.ndarray:
    return (pixels.astype(np.float32) / 255.0).transpose(2, 0, 1).copy()


def encode_ppm(image: np.ndarray) -> bytes:
    px = to_bytes(image)
    h, w, _ = px.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def decode_ppm(raw: bytes) -> np.ndarray:
    pos = 0
    fields = []
    names = ("magic", "width", "height", "maxval")
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"truncated PPM header: missing field '{names[len(fields)]}'", start)
        fields.append((raw[start:pos], start))
    (magic, moff), (wtxt, woff), (htxt, hoff), (mtxt, mvoff) = fields
    if magic != b"P6":
        raise ImageFormatError(f"not a binary PPM: magic {magic!r}", moff)
    try:
        w, h, maxval = int(wtxt), int(htxt), int(mtxt)
    except ValueError:
        raise ImageFormatError("non-numeric PPM header field", woff) from None
    if w <= 0 or h <= 0:
        raise ImageFormatError(f"invalid PPM size {w}x{h}", woff)
    if maxval != 255:
        raise ImageFormatError(f"unsupported PPM maxval {maxval} (only 255 is supported)", mvoff)
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise ImageFormatError("missing whitespace after PPM header", pos)
    pos += 1
    need = w * h * 3
    if len(raw) - pos < need:
        raise ImageFormatError(f"PPM pixel data truncated: need {need} bytes, have {len(raw) - pos}", pos)
    px = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3)
    return from_bytes(px)


def save_image(image: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(to_bytes(image), "RGB").save(path)
        return
    path.write_bytes(encode_ppm(image))


def load_image(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] == b"\x89PNG\r\n\x1a\n":
        import io

        from PIL import Image

        with Image.open(io.BytesIO(raw)) as im:
            return from_bytes(np.asarray(im.convert("RGB")))
    return decode_ppm(raw)
