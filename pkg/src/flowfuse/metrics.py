"""Spectral and structural quality metrics on [0, 1]-scaled rasters."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .unet import BANDS

SID_FLOOR = 1e-8
SSIM_WINDOW = 11
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
RGB = tuple(BANDS.index(b) for b in ("red", "green", "blue"))
EXACT = "exact"


def to_unit(x: np.ndarray) -> np.ndarray:
    """Map normalized [-1, 1] values onto [0, 1]."""
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def sid_map(generated, reference) -> np.ndarray:
    """Per-pixel symmetric KL divergence of band-normalized spectra."""
    p, q = _pair(generated, reference)
    p = np.maximum(p, SID_FLOOR)
    q = np.maximum(q, SID_FLOOR)
    p = p / p.sum(axis=-1, keepdims=True)
    q = q / q.sum(axis=-1, keepdims=True)
    # p log(p/q) + q log(q/p) written in a form that is symmetric bit for bit
    return np.sum((p - q) * (np.log(p) - np.log(q)), axis=-1)


def sid(generated, reference) -> float:
    return float(np.mean(sid_map(generated, reference)))


def ssim(generated, reference, bands: tuple[int, ...] = RGB, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over every valid window position and the selected bands,
    with uniform windows and population statistics."""
    x, y = _pair(generated, reference)
    h, w = x.shape[:2]
    if h < window or w < window:
        raise ValueError(f"image {h}x{w} smaller than the {window}x{window} window")
    x, y = x[..., list(bands)], y[..., list(bands)]

    def local_mean(a):
        return sliding_window_view(a, (window, window), axis=(0, 1)).mean(axis=(-2, -1))

    mx, my = local_mean(x), local_mean(y)
    vx = local_mean(x * x) - mx * mx
    vy = local_mean(y * y) - my * my
    cxy = local_mean(x * y) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
    return float(np.mean(num / den))


def mse(generated, reference) -> float:
    a, b = _pair(generated, reference)
    return float(np.mean((a - b) ** 2))


def psnr(generated, reference) -> float:
    """Peak signal-to-noise ratio for a peak of 1; ``inf`` on an exact match."""
    err = mse(generated, reference)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def format_psnr(value: float) -> str:
    return EXACT if math.isinf(value) else f"{value:.6f}"


@dataclass
class MetricsReport:
    sid: float
    ssim: float
    psnr: float
    n_pixels: int
    per_band_psnr: dict[str, float] = field(default_factory=dict)

    @property
    def exact(self) -> bool:
        return math.isinf(self.psnr)


def report(generated, reference) -> MetricsReport:
    """All metrics for rasters already on the [0, 1] scale."""
    a, b = _pair(generated, reference)
    per_band = {name: psnr(a[..., i], b[..., i]) for i, name in enumerate(BANDS[: a.shape[-1]])}
    return MetricsReport(sid(a, b), ssim(a, b), psnr(a, b), int(np.prod(a.shape[:-1])), per_band)


def evaluate_pair(generated, reference) -> MetricsReport:
    """Metrics for rasters in normalized [-1, 1] units."""
    return report(to_unit(generated), to_unit(reference))


ROW_FIELDS = ("scene_id", "cloud_fraction", "with_modis", "method", "steps", "seed",
              "sid", "ssim", "psnr")


def metrics_row(scene_id: str, cloud_fraction: float, with_modis: bool, rep: MetricsReport,
                method: str = "flow", steps: int | str = "", seed: int | str = "") -> dict:
    return {
        "scene_id": scene_id,
        "cloud_fraction": f"{cloud_fraction:.4f}",
        "with_modis": int(bool(with_modis)),
        "method": method,
        "steps": steps,
        "seed": seed,
        "sid": f"{rep.sid:.8f}",
        "ssim": f"{rep.ssim:.8f}",
        "psnr": format_psnr(rep.psnr),
    }


def write_rows(path, rows: Iterable[dict], fields=ROW_FIELDS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields))
        w.writeheader()
        for r in rows:
            w.writerow(r)


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def parse_psnr(text: str) -> float:
    return math.inf if text == EXACT else float(text)
