"""Evaluation protocols shared by the CLI and the acceptance suite.

Every score is computed on physical reflectance: model outputs are
denormalized and clipped to [0, 1] before comparison with the clear fine
raster, which is how the CLI writes them to disk.
"""

from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np

from . import baseline as bl
from . import metrics as mt
from . import sampler as sp
from . import scenegen as sg
from .unet import ConditionStack, MetaInputs, NetParams

BATCH = 8


def decode(x: np.ndarray, norm: sg.NormCoeffs) -> np.ndarray:
    return np.clip(sg.denormalize(x, norm), 0.0, 1.0)


@dataclasses.dataclass
class EvalScene:
    """One held-out scene prepared for the model."""

    sample: sg.Sample
    truth: np.ndarray  # normalized
    cond: ConditionStack
    meta: MetaInputs

    @classmethod
    def build(cls, sample: sg.Sample, norm: sg.NormCoeffs, composite: int = 0) -> "EvalScene":
        s = sample.scene
        cond = ConditionStack(sg.normalize(sample.composites[composite], norm),
                              sg.normalize(sample.coarse, norm), True, s.doy, s.sensor_id)
        return cls(sample, sg.normalize(s.raster, norm), cond, MetaInputs(0.0, s.doy, s.sensor_id))

    def conditioning(self, modis: bool) -> tuple[ConditionStack, MetaInputs]:
        if modis:
            return self.cond, self.meta
        return self.cond.without_modis(), dataclasses.replace(self.meta, modis_available=False)


def prepare(samples: Sequence[sg.Sample], norm: sg.NormCoeffs) -> list[EvalScene]:
    return [EvalScene.build(s, norm) for s in samples]


def _row(scene: EvalScene, protocol, method, coverage, cloud, modis, rep, steps, seed) -> dict:
    r = mt.metrics_row(scene.sample.scene_id, cloud, modis, rep, method, steps, seed)
    r.update(protocol=protocol, coverage=coverage)
    return r


def _chunks(n: int, batch: int):
    for lo in range(0, n, batch):
        yield range(lo, min(lo + batch, n))


def baseline_rows(scenes: Sequence[EvalScene], coarse_factor: int, window: int = 9) -> list[dict]:
    """Upsampling and STARFM-style fusion; the reference date is the most
    recent composite."""
    rows = []
    for sc in scenes:
        s = sc.sample
        ref = s.composites[0]
        fused = bl.starfm_lite(s.coarse, sg.degrade_to_coarse(ref, coarse_factor), ref, window)
        for method, out in (("upsample", bl.upsample_baseline(s.coarse)), ("starfm_lite", fused)):
            rows.append(_row(sc, "downscale", method, "", 1.0, True,
                             mt.report(np.clip(out, 0, 1), s.scene.raster), "", ""))
    return rows


def downscale_rows(params: NetParams, norm: sg.NormCoeffs, scenes: Sequence[EvalScene],
                   steps: int, seeds: Sequence[int], offset: int = 0,
                   batch: int = BATCH) -> list[dict]:
    """Fine rasters generated from composite plus coarse conditioning."""
    rows = []
    for seed in seeds:
        for idx in _chunks(len(scenes), batch):
            out = sp.generate_batch(params, [scenes[i].cond for i in idx],
                                    [scenes[i].meta for i in idx], steps,
                                    [seed * 100003 + offset + i for i in idx])
            for i, x in zip(idx, out):
                rep = mt.report(decode(x, norm), scenes[i].sample.scene.raster)
                rows.append(_row(scenes[i], "downscale", "flow", "", 1.0, True, rep, steps, seed))
    return rows


def eval_mask(size: int, coverage: float, seed: int, index: int) -> np.ndarray:
    return sg.synth_cloud_mask(size, coverage,
                               np.random.default_rng([seed, index, int(round(coverage * 1000))]))


def impute_rows(params: NetParams, norm: sg.NormCoeffs, scenes: Sequence[EvalScene],
                coverages: Sequence[float], steps: int, seeds: Sequence[int],
                modis_options: Sequence[bool] = (True, False), offset: int = 0,
                batch: int = BATCH) -> list[dict]:
    """Cloud filling on synthetic masks, with and without coarse input.

    Scores cover the whole raster, so observed pixels count as well.
    """
    rows = []
    for seed in seeds:
        for cover in coverages:
            masks = [eval_mask(sc.truth.shape[0], cover, seed, offset + i)
                     for i, sc in enumerate(scenes)]
            for modis in modis_options:
                for idx in _chunks(len(scenes), batch):
                    cm = [scenes[i].conditioning(modis) for i in idx]
                    x1 = np.stack([np.where(masks[i][..., None] == 1, 0.0, scenes[i].truth)
                                   for i in idx])
                    out = sp.impute_batch(params, x1, np.stack([masks[i] for i in idx]),
                                          [c for c, _ in cm], [m for _, m in cm], steps,
                                          [seed * 100003 + offset + i for i in idx])
                    for i, x in zip(idx, out):
                        rep = mt.report(decode(x, norm), scenes[i].sample.scene.raster)
                        rows.append(_row(scenes[i], "impute", "flow", cover,
                                         float(masks[i].mean()), modis, rep, steps, seed))
    return rows


def steps_rows(params: NetParams, norm: sg.NormCoeffs, scenes: Sequence[EvalScene],
               steps_list: Sequence[int], seeds: Sequence[int] = (0,)) -> list[dict]:
    eval_set = [(sc.cond, sc.meta, sc.truth) for sc in scenes]
    return sp.steps_sweep(params, eval_set, steps_list, seeds, BATCH,
                          decode=lambda x: decode(x, norm))


AGG_KEYS = ("protocol", "method", "coverage", "with_modis")


def aggregate(rows: Sequence[dict], keys: Sequence[str] = AGG_KEYS) -> list[dict]:
    """Mean metrics per group; PSNR averages finite values in dB."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault(tuple(r.get(k, "") for k in keys), []).append(r)
    out = []
    for key, rs in sorted(groups.items(), key=lambda kv: tuple(str(x) for x in kv[0])):
        psnrs = [mt.parse_psnr(r["psnr"]) for r in rs]
        out.append({
            **dict(zip(keys, key)),
            "scene_id": "ALL",
            "cloud_fraction": f"{np.mean([float(r['cloud_fraction']) for r in rs]):.4f}",
            "steps": rs[0]["steps"],
            "seed": "",
            "n": len(rs),
            "sid": f"{np.mean([float(r['sid']) for r in rs]):.8f}",
            "ssim": f"{np.mean([float(r['ssim']) for r in rs]):.8f}",
            "psnr": mt.format_psnr(float(np.mean(psnrs))),
        })
    return out


def mean_metric(rows: Sequence[dict], metric: str, **where) -> float:
    sel = [float(r[metric]) for r in rows if all(r.get(k) == v for k, v in where.items())]
    if not sel:
        raise ValueError(f"no rows match {where}")
    return float(np.mean(sel))
