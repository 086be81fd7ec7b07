"""MPSNR, MSSIM and SAM for cubes laid out ``[H, W, C]`` with data range 1."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

PSNR_CAP = 100.0
MSE_FLOOR = 1e-10
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SAM_NORM_FLOOR = 1e-12


def _values(c) -> np.ndarray:
    return np.asarray(getattr(c, "values", c), dtype=np.float64)


def _pair(x, y):
    x, y = _values(x), _values(y)
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {y.shape}", axis="shape")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    if x.ndim != 3:
        raise ShapeError(f"expected [H, W, C] cubes, got {x.shape}", axis="rank")
    return x, y


def band_psnr(x, y, data_range: float = 1.0) -> np.ndarray:
    x, y = _pair(x, y)
    mse = np.mean((x - y) ** 2, axis=(0, 1))
    out = np.full(mse.shape, PSNR_CAP)
    ok = mse >= MSE_FLOOR
    out[ok] = 10.0 * np.log10(data_range ** 2 / mse[ok])
    return out


def mpsnr(x, y, data_range: float = 1.0) -> float:
    """Mean over bands of per-band PSNR in dB (capped at 100 dB)."""
    return float(np.mean(band_psnr(x, y, data_range)))


def _gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable valid-mode correlation over the two spatial axes of [H, W, C]
    win = np.lib.stride_tricks.sliding_window_view(img, g.size, axis=0)
    tmp = win @ g
    win = np.lib.stride_tricks.sliding_window_view(tmp, g.size, axis=1)
    return win @ g


def band_ssim(x, y, data_range: float = 1.0) -> np.ndarray:
    """Per-band SSIM with an 11x11 Gaussian window (sigma 1.5), averaged
    over every position where the window fits inside the image."""
    x, y = _pair(x, y)
    if x.shape[0] < SSIM_WIN or x.shape[1] < SSIM_WIN:
        raise ShapeError("window exceeds image", axis="spatial")
    g = _gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return np.mean(num / den, axis=(0, 1))


def mssim(x, y, data_range: float = 1.0) -> float:
    return float(np.mean(band_ssim(x, y, data_range)))


def sam(x, y) -> float:
    """Mean spectral angle in degrees; pixels with a near-zero spectrum count as 0."""
    x, y = _pair(x, y)
    dot = np.sum(x * y, axis=-1)
    nx = np.linalg.norm(x, axis=-1)
    ny = np.linalg.norm(y, axis=-1)
    valid = (nx >= SAM_NORM_FLOOR) & (ny >= SAM_NORM_FLOOR)
    cos = np.ones_like(dot)
    cos[valid] = dot[valid] / (nx[valid] * ny[valid])
    ang = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    ang[~valid] = 0.0
    return float(np.mean(ang))


@dataclass
class MetricsReport:
    mpsnr: float
    mssim: float
    sam: float
    per_band_psnr: list = field(default_factory=list)
    wall_time: float = 0.0
    label: str = ""

    def to_kv(self) -> str:
        """Flat ``key=value`` record, one field per line."""
        lines = [f"label={self.label}", f"mpsnr={self.mpsnr!r}", f"mssim={self.mssim!r}",
                 f"sam={self.sam!r}", f"wall_time={self.wall_time!r}",
                 "per_band_psnr=" + ",".join(repr(float(v)) for v in self.per_band_psnr)]
        return "\n".join(lines) + "\n"


def report(pred, ref, label: str = "", wall_time: float = 0.0) -> MetricsReport:
    bp = band_psnr(pred, ref)
    return MetricsReport(float(bp.mean()), mssim(pred, ref), sam(pred, ref), bp.tolist(), wall_time, label)


def aggregate(reports, label: str = "mean") -> MetricsReport:
    if not reports:
        raise ValueError("no reports to aggregate")
    bands = np.mean([r.per_band_psnr for r in reports], axis=0).tolist()
    return MetricsReport(
        float(np.mean([r.mpsnr for r in reports])),
        float(np.mean([r.mssim for r in reports])),
        float(np.mean([r.sam for r in reports])),
        bands,
        float(np.sum([r.wall_time for r in reports])),
        label,
    )


CSV_COLUMNS = ("label", "mpsnr", "mssim", "sam", "wall_time")


def reports_to_csv(reports, path=None) -> str:
    """One row per report (the caller appends the aggregate row)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerow([r.label, f"{r.mpsnr:.6f}", f"{r.mssim:.6f}", f"{r.sam:.6f}", f"{r.wall_time:.4f}"])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as f:
            f.write(text)
    return text


def band_psnr_csv(reports, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["band"] + [r.label for r in reports])
    for b in range(len(reports[0].per_band_psnr)):
        w.writerow([b] + [f"{r.per_band_psnr[b]:.6f}" for r in reports])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as f:
            f.write(text)
    return text
