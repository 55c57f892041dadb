"""Differentiable image post-processing attacks.

All transforms act on (B, 3, H, W) tensors in [0, 1] and keep the shape.
Geometric and filtering steps are written as products with constant
resampling matrices, so gradients reach the input through ``matmul``;
JPEG rounding and clamping use straight-through gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .seeding import subseed

SINGLE_KINDS = ("crop", "rotation", "blur", "brightness", "noise", "erasing", "jpeg")
KINDS = SINGLE_KINDS + ("combination",)
PARAM_KEY = {"crop": "ratio", "rotation": "degrees", "blur": "kernel", "brightness": "delta",
             "noise": "sigma", "erasing": "area", "jpeg": "quality"}

# values sample_spec draws from
SAMPLING_GRID = {
    "crop": (0.05, 0.10, 0.15, 0.20),
    "rotation": (-30.0, 30.0),
    "blur": (3, 5, 7),
    "brightness": (-0.3, 0.3),
    "noise": (0.0, 0.2),
    "erasing": (0.05, 0.10, 0.15, 0.20),
    "jpeg": (90, 80, 70, 60, 50),
}
CONTINUOUS = {"rotation", "brightness", "noise"}
COMBINATION_PROB = 0.5

# evaluation strengths, weakest first
STRENGTH_GRID = {
    "crop": (0.05, 0.10, 0.15, 0.20),
    "rotation": (6.0, 12.0, 18.0, 24.0, 30.0),
    "blur": (3, 5, 7),
    "brightness": (0.06, 0.12, 0.18, 0.24, 0.30),
    "noise": (0.04, 0.08, 0.12, 0.16, 0.20),
    "erasing": (0.05, 0.10, 0.15, 0.20),
    "jpeg": (90, 80, 70, 60, 50),
    "combination": (1, 2, 3),
}
COMBINATION_LEVELS = {
    "crop": (0.05, 0.10, 0.20),
    "rotation": (10.0, 20.0, 30.0),
    "blur": (3, 5, 7),
    "brightness": (0.1, 0.2, 0.3),
    "noise": (0.05, 0.1, 0.2),
    "erasing": (0.05, 0.10, 0.20),
    "jpeg": (90, 70, 50),
}


class AttackParameterError(ValueError):
    pass


def _check_value(kind: str, value) -> float:
    v = float(value)
    ok = {
        "crop": 0.0 <= v < 0.5,
        "rotation": -30.0 <= v <= 30.0,
        "blur": v in (1, 3, 5, 7),
        "brightness": -0.3 <= v <= 0.3,
        "noise": 0.0 <= v <= 0.2,
        "erasing": 0.0 <= v <= 0.5,
        "jpeg": v == int(v) and 50 <= v <= 100,
    }[kind]
    if not ok or not math.isfinite(v):
        raise AttackParameterError(f"{kind}: {PARAM_KEY[kind]}={value} outside the admissible range")
    return v


@dataclass(frozen=True)
class AttackSpec:
    """One post-processing transform and its strength.

    Single attacks carry ``{PARAM_KEY[kind]: value}``; a combination carries
    one entry per included sub-attack, keyed by the sub-attack's kind.
    """

    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise AttackParameterError(f"unknown attack kind {self.kind!r}")
        if self.kind == "combination":
            for sub, v in self.params.items():
                if sub not in SINGLE_KINDS:
                    raise AttackParameterError(f"combination: unknown sub-attack {sub!r}")
                _check_value(sub, v)
        else:
            key = PARAM_KEY[self.kind]
            if set(self.params) != {key}:
                raise AttackParameterError(f"{self.kind}: expected exactly the parameter {key!r}, got "
                                           f"{sorted(self.params)}")
            _check_value(self.kind, self.params[key])

    def steps(self) -> dict:
        """Sub-attack kind -> strength, for everything this spec applies."""
        if self.kind == "combination":
            return dict(self.params)
        return {self.kind: self.params[PARAM_KEY[self.kind]]}

    def to_text(self) -> str:
        items = [f"{k}={_fmt(v)}" for k, v in self.params.items()]
        items.append(f"seed={self.seed}")
        return f"{self.kind}:" + ",".join(items)

    @classmethod
    def from_text(cls, text: str) -> "AttackSpec":
        kind, _, rest = text.strip().partition(":")
        params, seed = {}, 0
        for item in filter(None, (s.strip() for s in rest.split(","))):
            key, eq, value = item.partition("=")
            if not eq:
                raise AttackParameterError(f"malformed attack parameter {item!r}")
            if key == "seed":
                seed = int(value)
            else:
                params[key] = int(value) if key in ("kernel", "quality", "blur", "jpeg") else float(value)
        if kind == "identity" and not params:
            return identity_spec()
        return cls(kind, params, seed)


def _fmt(v) -> str:
    return str(int(v)) if float(v).is_integer() and not isinstance(v, float) else repr(float(v))


def identity_spec() -> AttackSpec:
    return AttackSpec("brightness", {"delta": 0.0})


def sample_spec(kind: str, seed: int) -> AttackSpec:
    """Draw parameters uniformly from the kind's sampling grid."""
    if kind not in KINDS:
        raise AttackParameterError(f"unknown attack kind {kind!r}")
    rng = np.random.default_rng(seed)
    apply_seed = int(rng.integers(0, 2**63 - 1))
    if kind == "combination":
        params = {}
        for sub in SINGLE_KINDS:
            include = rng.random() < COMBINATION_PROB
            value = _draw(sub, rng)
            if include:
                params[sub] = value
        return AttackSpec("combination", params, apply_seed)
    return AttackSpec(kind, {PARAM_KEY[kind]: _draw(kind, rng)}, apply_seed)


def _draw(kind: str, rng: np.random.Generator):
    grid = SAMPLING_GRID[kind]
    if kind in CONTINUOUS:
        lo, hi = grid
        v = float(rng.uniform(lo, hi))
        return min(max(v, lo), hi)
    v = grid[int(rng.integers(0, len(grid)))]
    return int(v) if isinstance(v, int) else float(v)


def sample_batch_specs(kinds: Sequence[str], n: int, rng: np.random.Generator) -> list:
    kinds = list(kinds)
    specs = []
    for _ in range(n):
        kind = kinds[int(rng.integers(0, len(kinds)))] if len(kinds) > 1 else kinds[0]
        specs.append(sample_spec(kind, int(rng.integers(0, 2**63 - 1))))
    return specs


def spec_at(kind: str, strength, seed: int) -> AttackSpec:
    """Evaluation spec at a fixed strength; signs and placement come from ``seed``."""
    rng = np.random.default_rng(subseed(seed, f"eval/{kind}"))
    apply_seed = int(rng.integers(0, 2**63 - 1))
    if kind == "combination":
        level = int(strength)
        params = {}
        for sub in SINGLE_KINDS:
            include = rng.random() < COMBINATION_PROB
            value = COMBINATION_LEVELS[sub][level - 1]
            if sub in ("rotation", "brightness") and rng.random() < 0.5:
                value = -value
            if include:
                params[sub] = value
        return AttackSpec("combination", params, apply_seed)
    value = strength
    if kind in ("rotation", "brightness") and rng.random() < 0.5:
        value = -strength
    return AttackSpec(kind, {PARAM_KEY[kind]: value}, apply_seed)


# ---------------------------------------------------------------- resampling matrices

def _interp_matrix(coords: np.ndarray, size: int) -> np.ndarray:
    """Rows of bilinear weights sampling positions ``coords`` (edge-clamped)."""
    coords = np.clip(coords, 0, size - 1)
    lo = np.floor(coords).astype(int)
    hi = np.minimum(lo + 1, size - 1)
    frac = coords - lo
    m = np.zeros((len(coords), size))
    rows = np.arange(len(coords))
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def crop_matrices(ratio: float, h: int, w: int, rng: np.random.Generator) -> tuple:
    """Keep a (1 - ratio)-area window at a random offset, resize back bilinearly."""
    if ratio == 0:
        return np.eye(h), np.eye(w)
    s = math.sqrt(1 - ratio)
    hh, ww = s * h, s * w
    y0 = rng.uniform(0, h - hh)
    x0 = rng.uniform(0, w - ww)
    ys = y0 + (np.arange(h) + 0.5) * hh / h - 0.5
    xs = x0 + (np.arange(w) + 0.5) * ww / w - 0.5
    return _interp_matrix(ys, h), _interp_matrix(xs, w)


def rotation_matrix(degrees: float, h: int, w: int) -> np.ndarray:
    """(H*W, H*W) bilinear sampling matrix for a rotation about the centre, zero fill."""
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    ii, jj = np.mgrid[0:h, 0:w]
    dy, dx = ii - cy, jj - cx
    sy = c * dy - s * dx + cy
    sx = s * dy + c * dx + cx
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    fy, fx = sy - y0, sx - x0
    m = np.zeros((h * w, h * w))
    out_idx = (ii * w + jj).reshape(-1)
    for oy, ox, wt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx), (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yy, xx = (y0 + oy).reshape(-1), (x0 + ox).reshape(-1)
        wt = wt.reshape(-1)
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w) & (wt != 0)
        np.add.at(m, (out_idx[valid], (yy * w + xx)[valid]), wt[valid])
    return m


def gaussian_sigma(kernel: int) -> float:
    return 0.3 * ((kernel - 1) * 0.5 - 1) + 0.8


def blur_matrix(kernel: int, n: int) -> np.ndarray:
    """1-d Gaussian blur as an (n, n) matrix with reflect borders."""
    if kernel == 1:
        return np.eye(n)
    r = kernel // 2
    sigma = gaussian_sigma(kernel)
    taps = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    taps /= taps.sum()
    m = np.zeros((n, n))
    for i in range(n):
        for t, wt in zip(range(-r, r + 1), taps):
            j = i + t
            while j < 0 or j >= n:
                j = -j if j < 0 else 2 * (n - 1) - j
            m[i, j] += wt
    return m


def erase_mask(area: float, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    mask = np.ones((h, w))
    if area == 0:
        return mask
    target = area * h * w
    aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
    eh = int(min(max(round(math.sqrt(target * aspect)), 1), h))
    ew = int(min(max(round(target / eh), 1), w))
    top = int(rng.integers(0, h - eh + 1))
    left = int(rng.integers(0, w - ew + 1))
    mask[top:top + eh, left:left + ew] = 0
    return mask


# ---------------------------------------------------------------- JPEG surrogate

_QY = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61], [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56], [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77], [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101], [72, 92, 95, 98, 112, 100, 103, 99]], dtype=np.float64)
_QC = np.full((8, 8), 99.0)
_QC[:4, :4] = [[17, 18, 24, 47], [18, 21, 26, 66], [24, 26, 56, 99], [47, 66, 99, 99]]

_RGB2YCC = np.array([[0.299, 0.587, 0.114], [-0.168736, -0.331264, 0.5], [0.5, -0.418688, -0.081312]])
_YCC2RGB = np.linalg.inv(_RGB2YCC)


def quant_tables(quality: int) -> np.ndarray:
    """(3, 8, 8) luma/chroma/chroma tables scaled the way libjpeg scales them."""
    q = int(quality)
    scale = 5000 / q if q < 50 else 200 - 2 * q
    out = []
    for base in (_QY, _QC, _QC):
        t = np.floor((base * scale + 50) / 100)
        out.append(np.clip(t, 1, 255))
    return np.stack(out)


def dct_matrix(n: int = 8) -> np.ndarray:
    k = np.arange(n)
    m = np.cos(np.pi * (2 * k[None, :] + 1) * k[:, None] / (2 * n)) * math.sqrt(2 / n)
    m[0] /= math.sqrt(2)
    return m


def jpeg(x: Tensor, qualities: Sequence[int], rounding: bool = True) -> Tensor:
    """Block-DCT JPEG surrogate with per-sample quality; no chroma subsampling."""
    b, c, h, w = x.shape
    if h % 8 or w % 8:
        raise ad.ShapeError("jpeg", f"image size {(h, w)} must be a multiple of 8")
    dt = x.dtype
    fwd = ad.as_tensor(_RGB2YCC.T.astype(dt))
    inv = ad.as_tensor(_YCC2RGB.T.astype(dt))
    shift = np.array([0.0, 128.0, 128.0], dtype=dt)
    d = ad.as_tensor(dct_matrix().astype(dt))
    dt_ = ad.as_tensor(dct_matrix().T.astype(dt))
    tables = np.stack([quant_tables(q) for q in qualities]).astype(dt).reshape(b, 3, 1, 1, 8, 8)

    px = ad.mul(ad.permute(x, (0, 2, 3, 1)), 255.0)
    ycc = ad.add(ad.matmul(px, fwd), shift - 128.0)
    blocks = ad.permute(ad.reshape(ad.permute(ycc, (0, 3, 1, 2)), (b, 3, h // 8, 8, w // 8, 8)), (0, 1, 2, 4, 3, 5))
    coef = ad.matmul(ad.matmul(d, blocks), dt_)
    q = ad.mul(coef, 1.0 / tables)
    if rounding:
        q = ad.round_ste(q)
    coef = ad.mul(q, tables)
    blocks = ad.matmul(ad.matmul(dt_, coef), d)
    ycc = ad.reshape(ad.permute(blocks, (0, 1, 2, 4, 3, 5)), (b, 3, h, w))
    ycc = ad.add(ad.permute(ycc, (0, 2, 3, 1)), 128.0 - shift)
    rgb = ad.mul(ad.matmul(ycc, inv), 1.0 / 255.0)
    return ad.clamp(ad.permute(rgb, (0, 3, 1, 2)), 0.0, 1.0)


# ---------------------------------------------------------------- application

def _rng(spec: AttackSpec, kind: str) -> np.random.Generator:
    return np.random.default_rng(subseed(spec.seed, kind))


def apply(spec, x, rounding: bool = True) -> Tensor:
    """Apply one spec (to every image) or a list of specs (one per image).

    Sub-attacks run in the fixed order crop, rotation, blur, brightness,
    noise, erasing, jpeg.  Images whose spec does not include a step pass
    through that step unchanged.
    """
    t = ad.as_tensor(x)
    single = t.ndim == 3
    if single:
        t = ad.reshape(t, (1,) + t.shape)
    if t.ndim != 4 or t.shape[1] != 3:
        raise ad.ShapeError("attack", f"expected (B, 3, H, W) or (3, H, W), got {t.shape}")
    n, _, h, w = t.shape
    specs = list(spec) if isinstance(spec, (list, tuple)) else [spec] * n
    if len(specs) != n:
        raise ValueError(f"{len(specs)} attack specs for {n} images")
    steps = [s.steps() for s in specs]
    dt = t.dtype

    def used(kind):
        return any(kind in st for st in steps)

    if used("crop"):
        ry, rx = zip(*(crop_matrices(float(st.get("crop", 0.0)), h, w, _rng(s, "crop"))
                       for s, st in zip(specs, steps)))
        ry = np.stack(ry).astype(dt)[:, None]
        rxt = np.stack(rx).transpose(0, 2, 1).astype(dt)[:, None]
        t = ad.matmul(ad.matmul(ry, t), rxt)
    if used("rotation"):
        mats = np.stack([rotation_matrix(float(st.get("rotation", 0.0)), h, w) for st in steps])
        flat = ad.reshape(t, (n, 3, h * w))
        t = ad.reshape(ad.matmul(flat, mats.transpose(0, 2, 1).astype(dt)), (n, 3, h, w))
    if used("blur"):
        kh = np.stack([blur_matrix(int(st.get("blur", 1)), h) for st in steps]).astype(dt)[:, None]
        kwt = np.stack([blur_matrix(int(st.get("blur", 1)), w).T for st in steps]).astype(dt)[:, None]
        t = ad.matmul(ad.matmul(kh, t), kwt)
    if used("brightness"):
        deltas = np.array([float(st.get("brightness", 0.0)) for st in steps], dtype=dt).reshape(n, 1, 1, 1)
        t = ad.clamp(ad.add(t, deltas), 0.0, 1.0)
    if used("noise"):
        noise = np.stack([
            _rng(s, "noise").standard_normal((3, h, w)) * float(st.get("noise", 0.0))
            for s, st in zip(specs, steps)]).astype(dt)
        t = ad.clamp(ad.add(t, noise), 0.0, 1.0)
    if used("erasing"):
        masks = np.stack([erase_mask(float(st.get("erasing", 0.0)), h, w, _rng(s, "erasing"))
                          for s, st in zip(specs, steps)]).astype(dt)[:, None]
        t = ad.mul(t, masks)
    if used("jpeg"):
        quals = [int(st.get("jpeg", 100)) for st in steps]
        keep = np.array([1.0 if "jpeg" in st else 0.0 for st in steps], dtype=dt).reshape(n, 1, 1, 1)
        j = jpeg(t, quals, rounding=rounding)
        if keep.all():
            t = j
        else:
            t = ad.add(ad.mul(j, keep), ad.mul(t, 1.0 - keep))
    return ad.reshape(t, t.shape[1:]) if single else t
