import numpy as np
import pytest

from flowfuse import baseline as bl
from flowfuse import metrics as mt
from flowfuse import scenegen as sg


def test_upsample_constant():
    c = np.full((16, 16, 6), 0.3, dtype=np.float32)
    np.testing.assert_array_equal(bl.upsample_baseline(c), c)


def test_upsample_is_a_copy():
    c = np.zeros((4, 4, 6), dtype=np.float32)
    out = bl.upsample_baseline(c)
    out[0, 0, 0] = 1
    assert c[0, 0, 0] == 0


def test_upsample_below_perfect_on_textured_scene():
    scene = sg.gen_series(sg.WorldConfig(seed=1))[4]
    out = bl.upsample_baseline(sg.degrade_to_coarse(scene, 8))
    assert mt.ssim(out, scene.raster) < mt.ssim(scene.raster, scene.raster) == 1.0


def test_starfm_window_one_is_additive_delta():
    rng = np.random.default_rng(0)
    fine, ct, cr = (rng.random((8, 8, 6)) for _ in range(3))
    out = bl.starfm_lite(ct, cr, fine, window=1)
    np.testing.assert_allclose(out, fine + ct - cr, atol=1e-6)


def test_starfm_uniform_shift():
    fine = np.random.default_rng(1).random((8, 8, 6))
    cr = np.full((8, 8, 6), 0.2)
    out = bl.starfm_lite(cr + 0.1, cr, fine, window=1)
    np.testing.assert_allclose(out, fine + 0.1, atol=1e-6)
    smooth = bl.starfm_lite(cr + 0.1, cr, fine, window=5)
    np.testing.assert_allclose(smooth - bl.starfm_lite(cr, cr, fine, window=5), 0.1, atol=1e-6)


def test_starfm_no_change_smooths_reference():
    fine = np.random.default_rng(2).random((10, 10, 6))
    c = np.zeros_like(fine)
    out = bl.starfm_lite(c, c, fine, window=3)
    assert out.shape == fine.shape and np.isfinite(out).all()
    assert out.min() >= fine.min() - 1e-6 and out.max() <= fine.max() + 1e-6
    # a constant reference stays exactly constant
    flat = np.full((6, 6, 6), 0.4)
    np.testing.assert_allclose(bl.starfm_lite(c[:6, :6], c[:6, :6], flat, window=5), 0.4, atol=1e-6)


@pytest.mark.parametrize("window", [0, 2, 8, -3])
def test_starfm_rejects_even_windows(window):
    x = np.zeros((8, 8, 6))
    with pytest.raises(ValueError):
        bl.starfm_lite(x, x, x, window=window)


def test_starfm_deterministic():
    rng = np.random.default_rng(3)
    fine, ct, cr = (rng.random((12, 12, 6)) for _ in range(3))
    a = bl.starfm_lite(ct, cr, fine)
    b = bl.starfm_lite(ct, cr, fine)
    assert a.tobytes() == b.tobytes()


def test_run_baseline_dispatch():
    x = np.full((8, 8, 6), 0.1)
    assert bl.run_baseline("upsample", x).method == "upsample"
    assert bl.run_baseline("starfm_lite", x, x, x, window=3).raster.shape == x.shape
    with pytest.raises(ValueError):
        bl.run_baseline("starfm_lite", x)
    with pytest.raises(ValueError):
        bl.run_baseline("kriging", x)


def test_starfm_beats_upsample_on_synthetic_scenes():
    ssim_up, ssim_fm = [], []
    for seed in sg.world_seeds(0, "val", 5):
        for s in sg.make_samples(sg.WorldConfig(seed=seed))[:4]:
            ref = s.composites[0]
            cr = sg.degrade_to_coarse(ref, 8)
            ssim_up.append(mt.ssim(bl.upsample_baseline(s.coarse), s.scene.raster))
            ssim_fm.append(mt.ssim(bl.starfm_lite(s.coarse, cr, ref), s.scene.raster))
    assert len(ssim_fm) >= 20
    assert np.mean(ssim_fm) > np.mean(ssim_up)
