"""PSNR / SSIM on the luma plane and single-image timing."""

from __future__ import annotations

import csv
import io
import math
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dban.data import luma

PEAK = 255.0
BORDER = 4
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = (0.01 * PEAK) ** 2
C2 = (0.03 * PEAK) ** 2

INF = math.inf


def _planes(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB of two planes on the 0-255 scale; ``math.inf`` when identical."""
    a, b = _planes(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return INF
    return 10.0 * math.log10(PEAK ** 2 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalised 1-D Gaussian; the 2-D window is its outer product."""
    t = np.arange(size) - (size - 1) / 2
    g = np.exp(-(t ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.shape[0]
    rows = sliding_window_view(x, k, axis=1) @ g
    return sliding_window_view(rows, k, axis=0) @ g


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = _planes(a, b)
    if a.ndim != 2:
        raise ValueError(f"ssim expects 2-D planes, got shape {a.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over all fully interior 11x11 Gaussian windows (planes on the 0-255 scale).

    Uses C3 = C2 / 2, so contrast and structure fold into one term.
    """
    return float(np.mean(ssim_map(a, b)))


def y_plane_255(img: np.ndarray) -> np.ndarray:
    """Luma of a (1, C, H, W), (C, H, W) or (H, W) image in [0, 1], on the 0-255 scale."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img * PEAK
    if img.ndim == 4:
        if img.shape[0] != 1:
            raise ValueError(f"expected a single image, got batch of {img.shape[0]}")
        img = img[0]
    return luma(img) * PEAK


def evaluate_pair(sr: np.ndarray, hr: np.ndarray, border: int = BORDER) -> tuple[float, float]:
    """(psnr, ssim) on the Y plane after cropping ``border`` pixels from every side."""
    ya, yb = y_plane_255(sr), y_plane_255(hr)
    if ya.shape != yb.shape:
        raise ValueError(f"image size mismatch {ya.shape} vs {yb.shape}")
    if min(ya.shape) <= 2 * border:
        raise ValueError(f"image {ya.shape} too small for a {border}-pixel border crop")
    if border:
        ya = ya[border:-border, border:-border]
        yb = yb[border:-border, border:-border]
    return psnr(ya, yb), ssim(ya, yb)


def time_sr(run: Callable[[], object], repeats: int = 3) -> float:
    """Median wall-clock seconds of ``repeats`` calls of ``run``."""
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        run()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


# -- reports ------------------------------------------------------------------

@dataclass
class EvalRow:
    id: str
    psnr_db: float
    ssim: float
    seconds: Optional[float] = None


def format_value(v: Optional[float]) -> str:
    if v is None:
        return ""
    if math.isinf(v):
        return "inf"
    return f"{v:.6f}"


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    unmatched: list[str] = field(default_factory=list)

    def add(self, row: EvalRow) -> None:
        self.rows.append(row)

    @property
    def infinite_count(self) -> int:
        return sum(math.isinf(r.psnr_db) for r in self.rows)

    def mean_psnr(self) -> float:
        """Mean over finite rows; infinite only if every row is."""
        finite = [r.psnr_db for r in self.rows if not math.isinf(r.psnr_db)]
        if finite:
            return sum(finite) / len(finite)
        return INF if self.rows else math.nan

    def mean_ssim(self) -> float:
        return sum(r.ssim for r in self.rows) / len(self.rows) if self.rows else math.nan

    def mean_seconds(self) -> Optional[float]:
        secs = [r.seconds for r in self.rows if r.seconds is not None]
        return sum(secs) / len(secs) if secs else None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "psnr_db", "ssim", "seconds"])
        for r in sorted(self.rows, key=lambda r: r.id):
            w.writerow([r.id, format_value(r.psnr_db), format_value(r.ssim), format_value(r.seconds)])
        w.writerow(["mean", format_value(self.mean_psnr()), format_value(self.mean_ssim()), format_value(self.mean_seconds())])
        text = buf.getvalue()
        if self.infinite_count:
            text += f"# {self.infinite_count} row(s) with infinite PSNR excluded from the mean\n"
        for name in self.unmatched:
            text += f"# unmatched: {name}\n"
        return text
