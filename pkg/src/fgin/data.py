"""Cube files, normalization, patch extraction and LR degradation.

Cube file format
----------------
A cube is stored as two files:

* ``<path>``: raw payload, little-endian float32, band-sequential order
  (all of band 0 row-major, then band 1, ...), exactly ``H*W*C*4`` bytes.
* ``<path>.json``: header object with keys ``height``, ``width``,
  ``bands``, ``dtype`` (``"f32"``), ``interleave`` (``"band-sequential"``)
  and ``norm`` (``{"global_min": .., "global_max": ..}``).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .errors import ConfigError, DataError

HEADER_SUFFIX = ".json"
PATCH_SIZE = 144
DEGRADATION_SCALES = (2, 4, 8)
ROLES = ("train", "validation", "test")
ANCHORS = {"top-left": "top-left", "paviau": "top-left",
           "bottom-center": "bottom-center", "paviac": "bottom-center"}


@dataclass(frozen=True)
class NormRecord:
    global_min: float
    global_max: float

    def __post_init__(self):
        if not self.global_max > self.global_min:
            raise DataError("degenerate dynamic range")


@dataclass
class Cube:
    values: np.ndarray  # [H, W, C] in [0, 1]
    norm: NormRecord = field(default_factory=lambda: NormRecord(0.0, 1.0))

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[2] < 1:
            raise DataError(f"cube values must be [H, W, C], got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DataError("cube contains non-finite values")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise DataError("cube values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def bands(self) -> int:
        return self.values.shape[2]


def normalize(raw: np.ndarray) -> Cube:
    """Global min-max scaling to [0, 1] (one pair for the whole cube)."""
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise DataError("raw cube contains non-finite values")
    lo, hi = float(raw.min()), float(raw.max())
    if not hi > lo:
        raise DataError("degenerate dynamic range")
    vals = (raw - lo) / (hi - lo)
    return Cube(np.clip(vals, 0.0, 1.0).astype(np.float32), NormRecord(lo, hi))


def denormalize(cube: Cube) -> np.ndarray:
    n = cube.norm
    return cube.values.astype(np.float64) * (n.global_max - n.global_min) + n.global_min


def header_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + HEADER_SUFFIX)


def write_cube(cube: Cube, path) -> None:
    path = Path(path)
    header = {
        "height": cube.height, "width": cube.width, "bands": cube.bands,
        "dtype": "f32", "interleave": "band-sequential",
        "norm": {"global_min": cube.norm.global_min, "global_max": cube.norm.global_max},
    }
    payload = np.ascontiguousarray(cube.values.transpose(2, 0, 1), dtype="<f4").tobytes()
    path.write_bytes(payload)
    header_path(path).write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def read_cube(path) -> Cube:
    path = Path(path)
    hp = header_path(path)
    if not hp.exists():
        raise DataError(f"missing header file {hp}")
    try:
        header = json.loads(hp.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"unreadable header {hp}: {e}") from e
    for key in ("height", "width", "bands", "dtype", "interleave", "norm"):
        if key not in header:
            raise DataError(f"header missing field {key!r}")
    if header["dtype"] != "f32":
        raise DataError(f"unknown dtype {header['dtype']!r}")
    if header["interleave"] != "band-sequential":
        raise DataError(f"unsupported interleave {header['interleave']!r}")
    H, W, C = int(header["height"]), int(header["width"]), int(header["bands"])
    payload = path.read_bytes()
    expected = H * W * C * 4
    if len(payload) != expected:
        raise DataError(f"payload length mismatch: expected {expected} bytes, got {len(payload)}")
    vals = np.frombuffer(payload, dtype="<f4").reshape(C, H, W).transpose(1, 2, 0)
    norm = header["norm"]
    return Cube(np.ascontiguousarray(vals, dtype=np.float32), NormRecord(float(norm["global_min"]), float(norm["global_max"])))


def read_raw(path, height: int, width: int, bands: int, layout: str = "bsq", dtype="<f4") -> np.ndarray:
    """Load a headerless raw float array as ``[H, W, C]``.

    ``layout`` is ``"bsq"`` (band-sequential, ``[C, H, W]`` on disk) or
    ``"bip"`` (band-interleaved-by-pixel, ``[H, W, C]`` on disk).
    """
    data = np.fromfile(path, dtype=dtype)
    expected = height * width * bands
    if data.size != expected:
        raise DataError(f"raw size mismatch: expected {expected} values, got {data.size}")
    if layout == "bsq":
        return data.reshape(bands, height, width).transpose(1, 2, 0)
    if layout == "bip":
        return data.reshape(height, width, bands)
    raise DataError(f"unknown layout {layout!r} (use 'bsq' or 'bip')")


def degrade(hr: np.ndarray, s: int) -> np.ndarray:
    """Area (block-mean) downsampling of ``[H, W, C]`` or ``[B, H, W, C]``."""
    if s not in DEGRADATION_SCALES and s != 1:
        raise ConfigError(f"scale must be one of {DEGRADATION_SCALES}, got {s}")
    if hr.ndim == 3:
        return ops.area_downsample(hr[None], s)[0]
    return ops.area_downsample(hr, s)


@dataclass
class Patch:
    hr: np.ndarray
    lr: np.ndarray
    role: str
    rect: tuple  # (row, col, height, width) in the source cube
    scale: int


@dataclass
class PatchSet:
    patches: list
    scale: int

    def by_role(self, role: str) -> list:
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        return [p for p in self.patches if p.role == role]

    def hr(self, role: str) -> list:
        return [p.hr for p in self.by_role(role)]

    def lr(self, role: str) -> list:
        return [p.lr for p in self.by_role(role)]

    @classmethod
    def from_pairs(cls, hrs, scale: int, role: str = "train") -> "PatchSet":
        patches = [Patch(hr, degrade(hr, scale), role, (0, 0) + hr.shape[:2], scale) for hr in hrs]
        return cls(patches, scale)


def _intersects(a, b) -> bool:
    ar, ac, ah, aw = a
    br, bc, bh, bw = b
    return ar < br + bh and br < ar + ah and ac < bc + bw and bc < ac + aw


def holdout_rect(height: int, width: int, anchor="top-left", patch_size: int = PATCH_SIZE) -> tuple:
    """``(row, col, size, size)`` of the held-out test patch.

    ``anchor`` is ``"top-left"`` (PaviaU), ``"bottom-center"`` (PaviaC) or an
    explicit ``(row, col)`` pair.
    """
    if isinstance(anchor, (tuple, list)):
        r, c = map(int, anchor)
    else:
        kind = ANCHORS.get(str(anchor).lower())
        if kind is None:
            raise ConfigError(f"unknown test anchor {anchor!r}")
        if kind == "top-left":
            r, c = 0, 0
        else:
            r, c = height - patch_size, (width - patch_size) // 2
    if r < 0 or c < 0 or r + patch_size > height or c + patch_size > width:
        raise ConfigError(f"test rectangle at ({r}, {c}) falls outside {height}x{width}")
    return (r, c, patch_size, patch_size)


def extract_patches(cube, scale: int, anchor="top-left", patch_size: int = PATCH_SIZE,
                    val_fraction: float = 0.1, seed: int = 0) -> PatchSet:
    """Cut one test patch at ``anchor`` and tile the rest for training.

    Training tiles lie on a stride-``patch_size`` grid from the origin;
    partial tiles and tiles touching the test rectangle are dropped.  A
    seeded ``val_fraction`` of the training tiles becomes validation.
    """
    vals = getattr(cube, "values", cube)
    H, W, _ = vals.shape
    if scale not in DEGRADATION_SCALES:
        raise ConfigError(f"scale must be one of {DEGRADATION_SCALES}, got {scale}")
    if patch_size % scale:
        raise ConfigError(f"patch size {patch_size} not divisible by scale {scale}")
    if H < patch_size or W < patch_size:
        raise DataError(f"cube {H}x{W} is smaller than the {patch_size}x{patch_size} patch")
    if not 0 <= val_fraction < 1:
        raise ConfigError("val_fraction must be in [0, 1)")
    test = holdout_rect(H, W, anchor, patch_size)
    tiles = []
    for r in range(0, H - patch_size + 1, patch_size):
        for c in range(0, W - patch_size + 1, patch_size):
            rect = (r, c, patch_size, patch_size)
            if not _intersects(rect, test):
                tiles.append(rect)
    n_val = 0
    if val_fraction > 0 and len(tiles) >= 2:
        n_val = min(len(tiles) - 1, max(1, int(math.floor(val_fraction * len(tiles) + 0.5))))
    val_idx = set(np.random.default_rng(seed).permutation(len(tiles))[:n_val].tolist())

    def cut(rect, role):
        r, c, h, w = rect
        hr = np.ascontiguousarray(vals[r:r + h, c:c + w, :])
        return Patch(hr, degrade(hr, scale), role, rect, scale)

    patches = [cut(test, "test")]
    patches += [cut(rect, "validation" if i in val_idx else "train") for i, rect in enumerate(tiles)]
    return PatchSet(patches, scale)


def export_band_png(cube, bands, path) -> None:
    """Write one band (grayscale) or three bands (false-colour RGB) as 8-bit PNG."""
    from PIL import Image

    vals = getattr(cube, "values", cube)
    idx = [bands] if np.isscalar(bands) else list(bands)
    if len(idx) not in (1, 3):
        raise ValueError("give one band index or an RGB triple")
    for b in idx:
        if not 0 <= int(b) < vals.shape[2]:
            raise DataError(f"band index {b} out of range [0, {vals.shape[2]})")
    img = np.floor(np.clip(vals[:, :, idx], 0.0, 1.0).astype(np.float64) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(img[:, :, 0] if len(idx) == 1 else img).save(path)
