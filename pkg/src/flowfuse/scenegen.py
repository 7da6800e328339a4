"""Deterministic synthetic stand-in for paired fine/coarse satellite series.

A "world" is a Voronoi partition of the scene into fields. Each field mixes a
soil spectrum with a vegetation spectrum according to a double-logistic
phenology curve, so reflectance changes smoothly through the season. Fine
scenes are observed every ``revisit_days``; coarse rasters are block-averaged,
spectrally biased and resampled back onto the fine grid.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .unet import BANDS, SENSORS

# per-band (gain, offset) of the coarse sensor relative to the fine one
COARSE_BIAS = (
    np.array([0.92, 0.95, 0.90, 1.06, 1.04, 0.97]),
    np.array([0.015, 0.010, 0.020, -0.010, 0.005, 0.012]),
)
# relative response of the older sensor
SENSOR_GAIN = {"TM": np.array([1.02, 1.01, 0.98, 0.97, 1.0, 1.02]), "OLI": np.ones(6)}

SOIL_RANGE = (np.array([0.10, 0.08, 0.05, 0.18, 0.24, 0.18]),
              np.array([0.24, 0.20, 0.15, 0.30, 0.40, 0.34]))
VEG_SPECTRUM = np.array([0.04, 0.08, 0.03, 0.42, 0.20, 0.09])
WATER_SPECTRUM = np.array([0.03, 0.05, 0.06, 0.02, 0.01, 0.005])


@dataclass(frozen=True)
class WorldConfig:
    size: int = 64
    n_fields: int = 40
    series_length: int = 8
    coarse_factor: int = 8
    revisit_days: int = 16
    max_step: float = 0.15
    texture: float = 0.008
    regional_weight: float = 0.85
    seed: int = 0

    def validate(self) -> None:
        if self.series_length < 4:
            raise ValueError("series_length must be >= 4 (composites need three priors)")
        if self.size % self.coarse_factor:
            raise ValueError(f"coarse_factor {self.coarse_factor} does not divide size {self.size}")
        if self.n_fields < 2:
            raise ValueError("need at least two fields")


@dataclass
class Scene:
    raster: np.ndarray  # H x W x 6, reflectance in [0, 1]
    doy: int
    sensor_id: str
    scene_id: str
    world_seed: int
    index: int = 0


@dataclass
class FieldModel:
    labels: np.ndarray
    soil: np.ndarray  # fields x 6
    amplitude: np.ndarray  # max vegetation cover per field
    green_up: np.ndarray
    senescence: np.ndarray
    rate: np.ndarray  # logistic scale (days)
    water: np.ndarray  # bool per field
    texture: np.ndarray  # H x W x 6


def voronoi_labels(size: int, n_fields: int, rng: np.random.Generator) -> np.ndarray:
    centers = rng.uniform(0, size, size=(n_fields, 2))
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    d2 = (yy[..., None] - centers[:, 0]) ** 2 + (xx[..., None] - centers[:, 1]) ** 2
    return np.argmin(d2, axis=-1)


def _regional(size: int, rng: np.random.Generator, labels: np.ndarray, n: int) -> np.ndarray:
    # smooth landscape-scale latent (soil type, moisture) averaged per field
    z = ndimage.gaussian_filter(rng.standard_normal((size, size)), size / 6, mode="reflect")
    z = (z - z.mean()) / (z.std() + 1e-12)
    counts = np.bincount(labels.ravel(), minlength=n)
    per_field = np.bincount(labels.ravel(), weights=z.ravel(), minlength=n) / np.maximum(counts, 1)
    return np.clip(0.5 + 0.3 * per_field, 0.0, 1.0)


def _field_model(cfg: WorldConfig, rng: np.random.Generator) -> FieldModel:
    n = cfg.n_fields
    labels = voronoi_labels(cfg.size, n, rng)
    w = cfg.regional_weight
    soil_level = w * _regional(cfg.size, rng, labels, n) + (1 - w) * rng.random(n)
    vigor = w * _regional(cfg.size, rng, labels, n) + (1 - w) * rng.random(n)
    jitter = rng.uniform(-0.08, 0.08, size=(n, 6))
    soil = SOIL_RANGE[0] + (SOIL_RANGE[1] - SOIL_RANGE[0]) * np.clip(soil_level[:, None] + jitter, 0, 1)
    amplitude = 0.95 * vigor * (rng.random(n) > 0.1)
    green_up = 145 + 55 * (w * (2 * _regional(cfg.size, rng, labels, n) - 1) + (1 - w) * rng.uniform(-1, 1, n))
    senescence = green_up + rng.uniform(60, 140, size=n)
    rate = rng.uniform(10, 18, size=n)
    # lakes only on large fields; tiny high-contrast patches vanish entirely
    # in the coarse raster
    area = np.bincount(labels.ravel(), minlength=n)
    water = (rng.random(n) < 0.08) & (area >= cfg.size * cfg.size / 25)
    noise = ndimage.gaussian_filter(rng.standard_normal((cfg.size, cfg.size, 6)), sigma=(1.5, 1.5, 0))
    noise /= noise.std() + 1e-12
    return FieldModel(labels, soil, amplitude, green_up, senescence, rate, water,
                      cfg.texture * noise)


def vegetation_cover(doy, green_up, senescence, rate, amplitude):
    """Double-logistic seasonal curve in [0, amplitude]."""
    rise = 1.0 / (1.0 + np.exp(-(doy - green_up) / rate))
    fall = 1.0 / (1.0 + np.exp(-(doy - senescence) / rate))
    return amplitude * np.clip(rise - fall, 0.0, 1.0)


def _render(model: FieldModel, doy: float, sensor: str) -> np.ndarray:
    v = vegetation_cover(doy, model.green_up, model.senescence, model.rate, model.amplitude)
    spectra = model.soil * (1 - v[:, None]) + VEG_SPECTRUM * v[:, None]
    spectra[model.water] = WATER_SPECTRUM
    img = spectra[model.labels] + model.texture
    img = img * SENSOR_GAIN[sensor]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _world(cfg: WorldConfig):
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 0x5CE7E])
    model = _field_model(cfg, rng)
    sensor = SENSORS[int(rng.integers(len(SENSORS)))]
    span = cfg.revisit_days * (cfg.series_length - 1)
    start = int(rng.integers(60, max(61, 330 - span)))
    return model, sensor, start


def gen_series(cfg: WorldConfig) -> list[Scene]:
    """Time-ordered fine scenes of one synthetic world."""
    model, sensor, start = _world(cfg)
    scenes = []
    for k in range(cfg.series_length):
        day = start + k * cfg.revisit_days
        raster = _render(model, day, sensor)
        scenes.append(Scene(raster, (day - 1) % 365 + 1, sensor, f"w{cfg.seed}-t{k:02d}", cfg.seed, k))
    return scenes


def render_on(cfg: WorldConfig, days: Sequence[int]) -> list[np.ndarray]:
    """Fine rasters at arbitrary day offsets from the series start, e.g. to
    build a dense coarse time series."""
    model, sensor, start = _world(cfg)
    return [_render(model, start + d, sensor) for d in days]


# -- coarse sensor ---------------------------------------------------------

def block_mean(raster: np.ndarray, factor: int) -> np.ndarray:
    h, w, c = raster.shape
    if h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide raster size {h}x{w}")
    return raster.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))


def bilinear_upsample(coarse: np.ndarray, factor: int) -> np.ndarray:
    """Pixel-centre aligned bilinear resampling with edge clamping."""
    hc, wc, _ = coarse.shape

    def axis_weights(n_coarse):
        pos = (np.arange(n_coarse * factor) + 0.5) / factor - 0.5
        pos = np.clip(pos, 0, n_coarse - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_coarse - 1)
        return lo, hi, (pos - lo)[:, None]

    ylo, yhi, fy = axis_weights(hc)
    xlo, xhi, fx = axis_weights(wc)
    rows = coarse[ylo] * (1 - fy[..., None]) + coarse[yhi] * fy[..., None]
    return rows[:, xlo] * (1 - fx) + rows[:, xhi] * fx


def degrade_to_coarse(raster, factor: int, spectral_bias=COARSE_BIAS,
                      upsample: str | None = "bilinear") -> np.ndarray:
    """Block-average, apply the per-band affine response, and resample back
    onto the fine grid (``upsample=None`` keeps the coarse grid)."""
    if isinstance(raster, Scene):
        raster = raster.raster
    gain, offset = (np.asarray(b, dtype=np.float64) for b in spectral_bias)
    coarse = block_mean(np.asarray(raster, dtype=np.float64), factor) * gain + offset
    if upsample is None:
        out = coarse
    elif upsample == "bilinear":
        out = bilinear_upsample(coarse, factor)
    elif upsample == "nearest":
        out = coarse.repeat(factor, axis=0).repeat(factor, axis=1)
    else:
        raise ValueError(f"unknown upsampling {upsample!r}")
    return out.astype(np.float32)


IDENTITY_BIAS = (np.ones(6), np.zeros(6))


# -- clouds and composites ------------------------------------------------

def synth_cloud_mask(size: int, coverage_target: float, rng: np.random.Generator,
                     smoothness: float | None = None) -> np.ndarray:
    """Blobby binary mask (1 = cloud) from thresholded smoothed noise."""
    if not 0.0 < coverage_target < 1.0:
        raise ValueError(f"coverage {coverage_target} outside (0, 1)")
    n = size * size
    k = int(round(coverage_target * n))
    if k < 1 or k > n - 1 or abs(k / n - coverage_target) > 0.02:
        raise ValueError(f"coverage {coverage_target} unreachable on a {size}x{size} grid")
    sigma = smoothness if smoothness is not None else size / 12
    field_ = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    order = np.argsort(field_, axis=None, kind="stable")
    mask = np.zeros(n, dtype=np.uint8)
    mask[order[n - k:]] = 1
    return mask.reshape(size, size)


def scan_line_mask(size: int, period: int = 8, width: int = 2, slope: float = 0.2) -> np.ndarray:
    """Diagonal stripes of missing data, like a failed scan line corrector."""
    yy, xx = np.mgrid[0:size, 0:size]
    return (((xx + slope * yy).astype(int) % period) < width).astype(np.uint8)


def check_mask(mask: np.ndarray, shape: tuple[int, int] | None = None) -> np.ndarray:
    mask = np.asarray(mask)
    if shape is not None and mask.shape != tuple(shape):
        raise ValueError(f"mask shape {mask.shape} does not match raster {tuple(shape)}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary (0 = clear, 1 = contaminated)")
    return mask.astype(np.uint8)


def erode_mask(mask: np.ndarray, iterations: int = 1) -> np.ndarray:
    """Shrink cloud regions, so cloud edges leak through as "clear"."""
    if iterations <= 0:
        return mask
    return ndimage.binary_erosion(mask.astype(bool), iterations=iterations).astype(np.uint8)


def build_composite(priors: Sequence, masks: Sequence[np.ndarray], qa_erosion: int = 0) -> np.ndarray:
    """Most-recent-clear mosaic of time-ordered prior rasters.

    Pixels clear in no prior take the per-band mean of all clear observations.
    ``qa_erosion > 0`` corrupts the quality masks by eroding cloud regions
    before mosaicking, mimicking misclassified cloud edges.
    """
    if not priors:
        raise ValueError("composite needs at least one prior scene")
    if len(priors) != len(masks):
        raise ValueError("one mask per prior scene required")
    rasters = [p.raster if isinstance(p, Scene) else np.asarray(p) for p in priors]
    out = np.zeros(rasters[0].shape, dtype=np.float64)
    filled = np.zeros(rasters[0].shape[:2], dtype=bool)
    total = np.zeros(rasters[0].shape[-1])
    count = 0
    for r, m in zip(reversed(rasters), reversed(masks)):
        clear = erode_mask(check_mask(m, r.shape[:2]), qa_erosion) == 0
        take = clear & ~filled
        out[take] = r[take]
        filled |= clear
        total += r[clear].sum(axis=0)
        count += int(clear.sum())
    if count == 0:
        raise ValueError("no clear pixel in any prior scene")
    out[~filled] = total / count
    return out.astype(np.float32)


def coarse_temporal_interp(series: Sequence[np.ndarray], validity: Sequence[np.ndarray],
                           times: Sequence[float] | None = None) -> list[np.ndarray]:
    """Fill invalid pixels (mask 1) by linear interpolation in time between the
    neighbouring valid observations; ends take the nearest valid value."""
    if len(series) < 2:
        raise ValueError("temporal interpolation needs at least two time points")
    if len(series) != len(validity):
        raise ValueError("one validity mask per time point required")
    stack = np.stack([np.asarray(s, dtype=np.float64) for s in series])  # T x H x W x C
    T, H, W, _ = stack.shape
    invalid = np.stack([check_mask(m, (H, W)) for m in validity]).astype(bool)
    tt = np.arange(T, dtype=np.float64) if times is None else np.asarray(times, dtype=np.float64)
    if tt.shape != (T,) or np.any(np.diff(tt) <= 0):
        raise ValueError("times must be strictly increasing, one per time point")
    never = invalid.all(axis=0)
    if never.any():
        bad = np.argwhere(never)
        listing = ", ".join(f"({y},{x})" for y, x in bad[:10])
        more = "" if len(bad) <= 10 else f" and {len(bad) - 10} more"
        raise ValueError(f"pixels with no valid observation in the series: {listing}{more}")

    idx = np.arange(T)[:, None, None]
    prev = np.where(~invalid, idx, -1)
    prev = np.maximum.accumulate(prev, axis=0)
    nxt = np.where(~invalid, idx, T)
    nxt = np.minimum.accumulate(nxt[::-1], axis=0)[::-1]
    has_prev, has_next = prev >= 0, nxt < T
    p = np.clip(prev, 0, T - 1)
    q = np.clip(nxt, 0, T - 1)
    yy, xx = np.mgrid[0:H, 0:W]
    vp = stack[p, yy[None], xx[None]]
    vq = stack[q, yy[None], xx[None]]
    tp, tq, tn = tt[p], tt[q], tt[idx.repeat(H, 1).repeat(W, 2)]
    span = np.where(tq > tp, tq - tp, 1.0)
    wq = np.where(has_prev & has_next, (tn - tp) / span, np.where(has_next, 1.0, 0.0))
    filled = vp * (1 - wq[..., None]) + vq * wq[..., None]
    out = np.where(invalid[..., None], filled, stack)
    return [o.astype(np.float32) for o in out]


# -- normalization ---------------------------------------------------------

@dataclass(frozen=True)
class NormCoeffs:
    offset: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.scale) == 0):
            raise ValueError("normalization scale must be non-zero for every band")

    def to_dict(self) -> dict:
        return {"offset": [float(v) for v in self.offset], "scale": [float(v) for v in self.scale]}

    @classmethod
    def from_dict(cls, d) -> "NormCoeffs":
        return cls(np.asarray(d["offset"], dtype=np.float64), np.asarray(d["scale"], dtype=np.float64))


def compute_coefficients(rasters: Sequence[np.ndarray]) -> NormCoeffs:
    """Per-band min/max over a training set, mapped onto [-1, 1]."""
    lo = np.min([np.asarray(r).reshape(-1, r.shape[-1]).min(axis=0) for r in rasters], axis=0)
    hi = np.max([np.asarray(r).reshape(-1, r.shape[-1]).max(axis=0) for r in rasters], axis=0)
    lo, hi = lo.astype(np.float64), hi.astype(np.float64)
    return NormCoeffs(offset=(hi + lo) / 2, scale=(hi - lo) / 2)


def normalize(raster: np.ndarray, coeffs: NormCoeffs) -> np.ndarray:
    return ((np.asarray(raster, dtype=np.float64) - coeffs.offset) / coeffs.scale).astype(np.float32)


def denormalize(raster: np.ndarray, coeffs: NormCoeffs) -> np.ndarray:
    return (np.asarray(raster, dtype=np.float64) * coeffs.scale + coeffs.offset).astype(np.float32)


# -- training/evaluation samples ------------------------------------------

@dataclass
class Sample:
    """One fine scene with everything needed to train on or evaluate it."""

    scene: Scene
    coarse: np.ndarray
    composites: list[np.ndarray]
    mask: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def scene_id(self) -> str:
        return self.scene.scene_id


def make_samples(cfg: WorldConfig, n_composites: int = 3,
                 prior_coverage: tuple[float, float] = (0.1, 0.6)) -> list[Sample]:
    """Samples for every scene of a world that has ``n_composites`` priors.

    Composite ``k`` mosaics the (cloud-masked) priors up to ``k + 1`` dates
    before the target, so the pool spans increasingly stale context.
    """
    scenes = gen_series(cfg)
    rng = np.random.default_rng([cfg.seed, 0xC10D])
    masks = [synth_cloud_mask(cfg.size, float(rng.uniform(*prior_coverage)), rng)
             for _ in scenes]
    samples = []
    for i in range(n_composites, len(scenes)):
        comps = [build_composite(scenes[: i - k], masks[: i - k]) for k in range(n_composites)]
        coarse = degrade_to_coarse(scenes[i], cfg.coarse_factor)
        samples.append(Sample(scenes[i], coarse, comps, masks[i],
                              meta={"cloud_fraction": float(masks[i].mean())}))
    return samples


def world_seeds(base_seed: int, split: str, count: int) -> list[int]:
    """Disjoint world-seed streams per split."""
    tag = {"train": 1, "val": 2, "test": 3}[split]
    ss = np.random.SeedSequence([base_seed, tag])
    return [int(s.generate_state(1)[0]) * 4 + tag for s in ss.spawn(count)]


def replace(cfg: WorldConfig, **kw) -> WorldConfig:
    return dataclasses.replace(cfg, **kw)


__all__ = [
    "BANDS",
    "COARSE_BIAS",
    "IDENTITY_BIAS",
    "NormCoeffs",
    "Sample",
    "Scene",
    "WorldConfig",
    "bilinear_upsample",
    "block_mean",
    "build_composite",
    "check_mask",
    "coarse_temporal_interp",
    "compute_coefficients",
    "degrade_to_coarse",
    "erode_mask",
    "denormalize",
    "gen_series",
    "make_samples",
    "normalize",
    "render_on",
    "scan_line_mask",
    "synth_cloud_mask",
    "vegetation_cover",
    "world_seeds",
]
