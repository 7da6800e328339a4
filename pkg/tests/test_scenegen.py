import numpy as np
import pytest
from scipy import ndimage

from flowfuse import scenegen as sg


@pytest.fixture(scope="module")
def series():
    return sg.gen_series(sg.WorldConfig(seed=3))


def test_series_deterministic(series):
    again = sg.gen_series(sg.WorldConfig(seed=3))
    assert all(a.raster.tobytes() == b.raster.tobytes() for a, b in zip(series, again))
    other = sg.gen_series(sg.WorldConfig(seed=4))
    assert series[0].raster.tobytes() != other[0].raster.tobytes()


def test_series_basic_fields(series):
    assert len(series) == 8
    doys = [s.doy for s in series]
    assert all(1 <= d <= 366 for d in doys)
    for s in series:
        assert s.raster.shape == (64, 64, 6)
        assert s.raster.min() >= 0 and s.raster.max() <= 1
        assert s.sensor_id in ("TM", "OLI")
    assert len({s.scene_id for s in series}) == len(series)


def test_short_series_rejected():
    with pytest.raises(ValueError):
        sg.gen_series(sg.WorldConfig(series_length=3))


def test_non_divisible_factor_rejected():
    with pytest.raises(ValueError):
        sg.gen_series(sg.WorldConfig(size=60, coarse_factor=8))


@pytest.mark.parametrize("seed", range(6))
def test_temporal_smoothness(seed):
    cfg = sg.WorldConfig(seed=seed)
    scenes = sg.gen_series(cfg)
    steps = [np.abs(a.raster - b.raster).max() for a, b in zip(scenes, scenes[1:])]
    assert max(steps) <= cfg.max_step


@pytest.mark.parametrize("seed", range(6))
def test_within_cell_variance_below_across(seed):
    cfg = sg.WorldConfig(seed=seed)
    scene = sg.gen_series(cfg)[4]
    labels = sg.voronoi_labels(cfg.size, cfg.n_fields, np.random.default_rng([seed, 0x5CE7E]))
    for b in range(6):
        band = scene.raster[..., b].astype(np.float64)
        ids = np.unique(labels)
        within = np.mean([band[labels == i].var() for i in ids])
        across = np.var([band[labels == i].mean() for i in ids])
        assert within < across


def test_phenology_curve_shape():
    days = np.arange(0, 366)
    v = sg.vegetation_cover(days, 120.0, 240.0, 12.0, 0.8)
    assert v.min() >= 0 and v.max() <= 0.8
    assert v[180] > v[60] and v[180] > v[330]


# -- degradation -----------------------------------------------------------

def test_degrade_identity():
    rng = np.random.default_rng(0)
    r = rng.random((16, 16, 6)).astype(np.float32)
    out = sg.degrade_to_coarse(r, 1, sg.IDENTITY_BIAS)
    np.testing.assert_array_equal(out, r)


def test_degrade_constant():
    r = np.full((32, 32, 6), 0.3, dtype=np.float32)
    out = sg.degrade_to_coarse(r, 8, sg.IDENTITY_BIAS)
    np.testing.assert_allclose(out, 0.3, atol=1e-7)
    biased = sg.degrade_to_coarse(r, 8)
    expected = np.broadcast_to(0.3 * sg.COARSE_BIAS[0] + sg.COARSE_BIAS[1], biased.shape)
    np.testing.assert_allclose(biased, expected, atol=1e-6)


def test_degrade_mean_preservation():
    rng = np.random.default_rng(1)
    r = rng.random((64, 64, 6)).astype(np.float32)
    gain, offset = sg.COARSE_BIAS
    out = sg.degrade_to_coarse(r, 8, upsample="nearest")
    expected = r.astype(np.float64).mean(axis=(0, 1)) * gain + offset
    np.testing.assert_allclose(out.astype(np.float64).mean(axis=(0, 1)), expected, atol=1e-5)
    # block means computed directly
    direct = np.array([[r[i:i + 8, j:j + 8].astype(np.float64).mean(axis=(0, 1))
                        for j in range(0, 64, 8)] for i in range(0, 64, 8)])
    np.testing.assert_allclose(sg.degrade_to_coarse(r, 8, sg.IDENTITY_BIAS, upsample=None), direct, atol=1e-6)


def test_degrade_non_divisible():
    with pytest.raises(ValueError):
        sg.degrade_to_coarse(np.zeros((30, 30, 6)), 8)
    with pytest.raises(ValueError):
        sg.degrade_to_coarse(np.zeros((32, 32, 6)), 8, upsample="cubic")


def test_bilinear_interpolates_between_block_centres():
    coarse = np.zeros((2, 1, 1))
    coarse[1] = 1.0
    fine = sg.bilinear_upsample(coarse, 4)[:, 0, 0]
    # centres of coarse cells sit at fine rows 1.5 and 5.5
    np.testing.assert_allclose(fine, [0, 0, 0.125, 0.375, 0.625, 0.875, 1, 1])


@pytest.mark.parametrize("seed", range(4))
def test_degrade_removes_detail(seed):
    scene = sg.gen_series(sg.WorldConfig(seed=seed))[5]
    coarse = sg.degrade_to_coarse(scene, 8)
    for b in range(6):
        fine_hf = ndimage.laplace(scene.raster[..., b].astype(np.float64)).var()
        coarse_hf = ndimage.laplace(coarse[..., b].astype(np.float64)).var()
        assert coarse_hf <= fine_hf


@pytest.mark.parametrize("seed", range(10))
def test_fine_coarse_correlation(seed):
    # band-wise correlation averaged over the scenes of one world
    scenes = sg.gen_series(sg.WorldConfig(seed=seed))
    cors = []
    for s in scenes:
        c = sg.degrade_to_coarse(s, 8)
        cors.append([np.corrcoef(s.raster[..., b].ravel(), c[..., b].ravel())[0, 1] for b in range(6)])
    assert np.mean(cors, axis=0).min() >= 0.8


# -- clouds ------------------------------------------------------------------

@pytest.mark.parametrize("coverage", [0.10, 0.25, 0.50, 0.75])
def test_cloud_coverage(coverage):
    for seed in range(5):
        m = sg.synth_cloud_mask(64, coverage, np.random.default_rng(seed))
        assert m.dtype == np.uint8 and m.shape == (64, 64)
        assert abs(m.mean() - coverage) <= 0.02


@pytest.mark.parametrize("coverage", [0.10, 0.25, 0.50, 0.75])
def test_cloud_blobby(coverage):
    m = sg.synth_cloud_mask(64, coverage, np.random.default_rng(7))
    labels, n = ndimage.label(m)
    assert n > 0
    assert m.sum() / n >= 4


def test_cloud_deterministic():
    a = sg.synth_cloud_mask(64, 0.3, np.random.default_rng(11))
    b = sg.synth_cloud_mask(64, 0.3, np.random.default_rng(11))
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("coverage", [0.0, 1.0, -0.1, 0.01])
def test_cloud_unreachable(coverage):
    with pytest.raises(ValueError):
        sg.synth_cloud_mask(4, coverage, np.random.default_rng(0))


def test_scan_lines():
    m = sg.scan_line_mask(32, period=8, width=2)
    assert 0.2 <= m.mean() <= 0.3


# -- composites --------------------------------------------------------------

def _raster(value, shape=(8, 8)):
    return np.full(shape + (6,), value, dtype=np.float32)


def test_composite_single_clear_prior():
    r = np.random.default_rng(0).random((8, 8, 6)).astype(np.float32)
    out = sg.build_composite([r], [np.zeros((8, 8), np.uint8)])
    np.testing.assert_array_equal(out, r)


def test_composite_recency():
    old, new = _raster(0.2), _raster(0.7)
    m_old = np.zeros((8, 8), np.uint8)
    m_new = np.zeros((8, 8), np.uint8)
    m_new[2, 3] = 1
    out = sg.build_composite([old, new], [m_old, m_new])
    assert np.allclose(out[2, 3], 0.2)
    assert np.allclose(np.delete(out.reshape(64, 6), 2 * 8 + 3, axis=0), 0.7)


def test_composite_fallback_mean():
    a, b = _raster(0.2), _raster(0.6)
    ma = np.zeros((8, 8), np.uint8)
    mb = np.ones((8, 8), np.uint8)
    ma[0, 0] = 1
    out = sg.build_composite([a, b], [ma, mb])
    # only clear observations are a's 63 pixels at 0.2
    np.testing.assert_allclose(out[0, 0], 0.2, atol=1e-7)
    assert np.isfinite(out).all()


def test_composite_fallback_mixes_priors():
    a, b = _raster(0.2), _raster(0.6)
    ma = np.zeros((8, 8), np.uint8)
    mb = np.zeros((8, 8), np.uint8)
    ma[:4] = 1
    mb[4:] = 1
    ma[:, 0] = 1
    mb[:, 0] = 1
    out = sg.build_composite([a, b], [ma, mb])
    clear_a, clear_b = (ma == 0).sum(), (mb == 0).sum()
    expected = (0.2 * clear_a + 0.6 * clear_b) / (clear_a + clear_b)
    np.testing.assert_allclose(out[:, 0], expected, atol=1e-6)


def test_composite_errors():
    with pytest.raises(ValueError):
        sg.build_composite([], [])
    with pytest.raises(ValueError):
        sg.build_composite([_raster(0.1)], [np.zeros((4, 4), np.uint8)])
    with pytest.raises(ValueError):
        sg.build_composite([_raster(0.1)], [np.ones((8, 8), np.uint8)])


def test_composite_qa_erosion_leaks_cloud_edges():
    clear, cloudy = _raster(0.2), _raster(0.9)
    m = np.zeros((8, 8), np.uint8)
    m[2:6, 2:6] = 1
    exact = sg.build_composite([clear, cloudy], [np.zeros((8, 8), np.uint8), m])
    leaky = sg.build_composite([clear, cloudy], [np.zeros((8, 8), np.uint8), m], qa_erosion=1)
    assert np.allclose(exact[2, 2], 0.2)
    assert np.allclose(leaky[2, 2], 0.9)
    assert np.allclose(leaky[3, 3], 0.2)


# -- temporal interpolation --------------------------------------------------

def test_interp_no_gaps_identity():
    rng = np.random.default_rng(0)
    series = [rng.random((4, 4, 6)).astype(np.float32) for _ in range(3)]
    masks = [np.zeros((4, 4), np.uint8)] * 3
    for a, b in zip(sg.coarse_temporal_interp(series, masks), series):
        np.testing.assert_array_equal(a, b)


def test_interp_midpoint():
    series = [_raster(0.2, (2, 2)), _raster(0.9, (2, 2)), _raster(0.4, (2, 2))]
    masks = [np.zeros((2, 2), np.uint8), np.ones((2, 2), np.uint8), np.zeros((2, 2), np.uint8)]
    out = sg.coarse_temporal_interp(series, masks)
    np.testing.assert_allclose(out[1], 0.3, atol=1e-7)


def _interp_oracle(stack, invalid, times):
    out = stack.copy()
    T, H, W, C = stack.shape
    for y in range(H):
        for x in range(W):
            ok = [t for t in range(T) if not invalid[t, y, x]]
            for t in range(T):
                if not invalid[t, y, x]:
                    continue
                before = [s for s in ok if s < t]
                after = [s for s in ok if s > t]
                if before and after:
                    p, q = before[-1], after[0]
                    w = (times[t] - times[p]) / (times[q] - times[p])
                    out[t, y, x] = (1 - w) * stack[p, y, x] + w * stack[q, y, x]
                else:
                    out[t, y, x] = stack[(before or after)[-1 if before else 0], y, x]
    return out


@pytest.mark.parametrize("seed", range(5))
def test_interp_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(2, 7))
    stack = rng.random((T, 6, 5, 6))
    invalid = rng.random((T, 6, 5)) < 0.5
    invalid[rng.integers(T), ...] = False  # every pixel valid somewhere
    times = np.cumsum(rng.integers(1, 9, size=T)).astype(float)
    out = sg.coarse_temporal_interp(list(stack), list(invalid.astype(np.uint8)), times)
    np.testing.assert_allclose(np.stack(out), _interp_oracle(stack, invalid, times), atol=1e-6)


def test_interp_reports_dead_pixels():
    series = [_raster(0.1, (3, 3))] * 2
    masks = [np.zeros((3, 3), np.uint8), np.zeros((3, 3), np.uint8)]
    masks = [m.copy() for m in masks]
    for m in masks:
        m[1, 2] = 1
    with pytest.raises(ValueError, match=r"\(1,2\)"):
        sg.coarse_temporal_interp(series, masks)


def test_interp_needs_two_points():
    with pytest.raises(ValueError):
        sg.coarse_temporal_interp([_raster(0.1)], [np.zeros((8, 8), np.uint8)])


# -- normalization -----------------------------------------------------------

def test_normalize_midpoint():
    c = sg.NormCoeffs(offset=np.full(6, 0.5), scale=np.full(6, 0.5))
    np.testing.assert_allclose(sg.normalize(_raster(0.5), c), 0.0)
    np.testing.assert_allclose(sg.normalize(_raster(1.0), c), 1.0)


def test_normalize_round_trip():
    rng = np.random.default_rng(2)
    rasters = [rng.random((16, 16, 6)).astype(np.float32) for _ in range(3)]
    c = sg.compute_coefficients(rasters)
    for r in rasters:
        z = sg.normalize(r, c)
        assert z.min() >= -1 - 1e-6 and z.max() <= 1 + 1e-6
        assert np.abs(sg.denormalize(z, c) - r).max() <= 1e-6


def test_coefficients_deterministic():
    rng = np.random.default_rng(3)
    rasters = [rng.random((8, 8, 6)) for _ in range(4)]
    a, b = sg.compute_coefficients(rasters), sg.compute_coefficients(rasters)
    np.testing.assert_array_equal(a.offset, b.offset)
    np.testing.assert_array_equal(a.scale, b.scale)
    assert sg.NormCoeffs.from_dict(a.to_dict()).to_dict() == a.to_dict()


def test_zero_scale_rejected():
    with pytest.raises(ValueError):
        sg.NormCoeffs(offset=np.zeros(6), scale=np.zeros(6))
    with pytest.raises(ValueError):
        sg.compute_coefficients([_raster(0.3)])


# -- samples -----------------------------------------------------------------

def test_make_samples():
    cfg = sg.WorldConfig(seed=5, series_length=6)
    samples = sg.make_samples(cfg)
    assert len(samples) == 3
    s = samples[0]
    assert len(s.composites) == 3
    assert all(c.shape == (64, 64, 6) and np.isfinite(c).all() for c in s.composites)
    assert s.coarse.shape == (64, 64, 6)
    assert s.mask.shape == (64, 64)
    again = sg.make_samples(cfg)
    assert all(a.composites[2].tobytes() == b.composites[2].tobytes() for a, b in zip(samples, again))


def test_world_seed_splits_disjoint():
    train = sg.world_seeds(0, "train", 200)
    val = sg.world_seeds(0, "val", 200)
    assert len(set(train)) == 200
    assert not set(train) & set(val)
    assert sg.world_seeds(0, "train", 5) == train[:5]
