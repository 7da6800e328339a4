"""Library-level tour: synthesize a world, train briefly, fill a cloud gap.

Training here is far too short for quality; the acceptance suite compares a
desk-trained model against the baselines.
"""

import numpy as np

from flowfuse import baseline as bl
from flowfuse import evaluation as ev
from flowfuse import flowmatch as fm
from flowfuse import metrics as mt
from flowfuse import sampler as sp
from flowfuse import scenegen as sg
from flowfuse import unet

world = sg.WorldConfig(size=32, series_length=8, seed=7)
samples = sg.make_samples(world) + sg.make_samples(sg.replace(world, seed=8))
norm = sg.compute_coefficients([s.scene.raster for s in samples])

net = unet.NetConfig(base_channels=8, channel_multipliers=(1, 2), num_res_blocks=1)
state = fm.TrainState.fresh(unet.build(net, 0))
cfg = fm.TrainConfig(lr_base=2e-3, warmup_steps=10, total_steps=150, batch_size=4, grad_accum=1)
records = fm.fit(state, fm.examples_from(samples, norm), cfg)
sm = fm.smoothed([r.loss for r in records])
print(f"{unet.param_count(net)} params, smoothed loss {sm[9]:.3f} -> {sm[-1]:.3f}")

scene = ev.EvalScene.build(samples[0], norm)
mask = sg.synth_cloud_mask(world.size, 0.4, np.random.default_rng(0))
contaminated = np.where(mask[..., None] == 1, 0.0, scene.truth)
filled = sp.impute(state.params, contaminated, mask, scene.cond, scene.meta, sp.SampleConfig(10, 0))
clear = mask == 0
print(f"cloud fraction {mask.mean():.2f}; clear pixels kept to "
      f"{np.abs(filled - scene.truth)[clear].max():.1e}")
for name, out in (("upsample", np.clip(bl.upsample_baseline(samples[0].coarse), 0, 1)),
                  ("flow fill", ev.decode(filled, norm))):
    rep = mt.report(out, samples[0].scene.raster)
    print(f"{name:10s} SSIM {rep.ssim:.3f}  SID {rep.sid:.4f}")
