"""Non-learned fusion baselines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

METHODS = ("upsample", "starfm_lite")


@dataclass
class BaselineOutput:
    raster: np.ndarray
    method: str


def upsample_baseline(coarse: np.ndarray) -> np.ndarray:
    """The already-aligned coarse raster, passed through unchanged."""
    return np.array(coarse, dtype=np.float32, copy=True)


def starfm_lite(coarse_t: np.ndarray, coarse_ref: np.ndarray, fine_ref: np.ndarray,
                window: int = 9, spectral_eps: float = 1e-3) -> np.ndarray:
    """Single-pair temporal-delta fusion with similarity-weighted smoothing.

    Each pixel starts from ``fine_ref + (coarse_t - coarse_ref)``; the result
    is a weighted mean of those candidates over a square window, where
    neighbours that look spectrally like the centre in ``fine_ref`` and lie
    close to it get more weight.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    fine = np.asarray(fine_ref, dtype=np.float64)
    ct = np.asarray(coarse_t, dtype=np.float64)
    cr = np.asarray(coarse_ref, dtype=np.float64)
    if not fine.shape == ct.shape == cr.shape:
        raise ValueError("coarse_t, coarse_ref and fine_ref must be aligned rasters of one shape")
    candidate = fine + (ct - cr)
    if window == 1:
        return candidate.astype(np.float32)

    r = window // 2
    h, w, _ = fine.shape
    pad = ((r, r), (r, r), (0, 0))
    fine_p = np.pad(fine, pad, mode="edge")
    cand_p = np.pad(candidate, pad, mode="edge")
    valid = np.pad(np.ones((h, w)), r)  # edge replicas carry no weight
    num = np.zeros_like(fine)
    den = np.zeros((h, w, 1))
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            sl = (slice(r + dy, r + dy + h), slice(r + dx, r + dx + w))
            spectral = np.abs(fine_p[sl] - fine).mean(axis=-1, keepdims=True)
            distance = 1.0 + np.hypot(dy, dx) / r
            wgt = valid[sl][..., None] / ((spectral + spectral_eps) * distance)
            num += wgt * cand_p[sl]
            den += wgt
    return (num / den).astype(np.float32)


def run_baseline(method: str, coarse_t, coarse_ref=None, fine_ref=None, window: int = 9) -> BaselineOutput:
    if method == "upsample":
        return BaselineOutput(upsample_baseline(coarse_t), method)
    if method == "starfm_lite":
        if coarse_ref is None or fine_ref is None:
            raise ValueError("starfm_lite needs a reference pair")
        return BaselineOutput(starfm_lite(coarse_t, coarse_ref, fine_ref, window), method)
    raise ValueError(f"unknown baseline {method!r}; expected one of {METHODS}")
