"""Command-line entry point: synth, train, generate, impute, evaluate, pipeline."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import evaluation as ev
from . import flowmatch as fm
from . import io as fio
from . import metrics as mt
from . import sampler as sp
from . import scenegen as sg
from .numcore import NumericError
from .unet import DESK_CONFIG, ConditionStack, MetaInputs, NetConfig, build

log = logging.getLogger("flowfuse")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CONFIG_NAME = "run_config.json"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    world: sg.WorldConfig = field(default_factory=sg.WorldConfig)
    n_train_worlds: int = 60
    n_val_worlds: int = 8
    net: NetConfig = DESK_CONFIG
    train: fm.TrainConfig = fm.DESK_TRAIN
    sample: sp.SampleConfig = field(default_factory=sp.SampleConfig)
    checkpoint_every: int = 500
    coverages: tuple[float, ...] = (0.10, 0.25, 0.50, 0.75)
    eval_seeds: tuple[int, ...] = (0, 1, 2)
    eval_scenes: int = 20
    starfm_window: int = 9

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "world": dataclasses.asdict(self.world),
            "n_train_worlds": self.n_train_worlds,
            "n_val_worlds": self.n_val_worlds,
            "net": self.net.to_dict(),
            "train": self.train.to_dict(),
            "sample": dataclasses.asdict(self.sample),
            "checkpoint_every": self.checkpoint_every,
            "coverages": list(self.coverages),
            "eval_seeds": list(self.eval_seeds),
            "eval_scenes": self.eval_scenes,
            "starfm_window": self.starfm_window,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        try:
            if "world" in d:
                d["world"] = sg.WorldConfig(**d["world"])
            if "net" in d:
                d["net"] = NetConfig.from_dict(d["net"])
            if "train" in d:
                d["train"] = fm.TrainConfig.from_dict(d["train"])
            if "sample" in d:
                d["sample"] = sp.SampleConfig(**d["sample"])
        except TypeError as exc:
            raise UsageError(f"bad config section: {exc}") from exc
        for key in ("coverages", "eval_seeds"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        return RunConfig.from_dict(json.loads(Path(path).read_text()))
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Command-line flags take precedence over the config file."""
    get = lambda name: getattr(args, name, None)  # noqa: E731
    if get("seed") is not None:
        cfg.seed = args.seed
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
        cfg.sample = dataclasses.replace(cfg.sample, seed=args.seed)
    if get("train_worlds") is not None:
        cfg.n_train_worlds = args.train_worlds
    if get("val_worlds") is not None:
        cfg.n_val_worlds = args.val_worlds
    if get("size") is not None:
        cfg.world = dataclasses.replace(cfg.world, size=args.size)
    if get("coarse_factor") is not None:
        cfg.world = dataclasses.replace(cfg.world, coarse_factor=args.coarse_factor)
    if get("series_length") is not None:
        cfg.world = dataclasses.replace(cfg.world, series_length=args.series_length)
    train_kw = {k: get(k) for k in ("total_steps", "warmup_steps", "batch_size", "grad_accum",
                                    "lr_base") if get(k) is not None}
    if train_kw:
        cfg.train = dataclasses.replace(cfg.train, **train_kw)
    if get("steps") is not None:
        cfg.sample = dataclasses.replace(cfg.sample, steps=args.steps)
    if get("checkpoint_every") is not None:
        cfg.checkpoint_every = args.checkpoint_every
    if get("eval_scenes") is not None:
        cfg.eval_scenes = args.eval_scenes
    if get("eval_seeds") is not None:
        cfg.eval_seeds = tuple(args.eval_seeds)
    if get("coverages") is not None:
        cfg.coverages = tuple(args.coverages)
    try:
        cfg.train.validate()
        cfg.world.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


# -- synth ---------------------------------------------------------------------

def _prepare_output_dir(out: Path, force: bool) -> Path:
    """Fresh sibling temp dir that replaces ``out`` once complete."""
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
    out.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}."))


def _commit_dir(tmp: Path, out: Path) -> None:
    if out.exists():
        shutil.rmtree(out)
    tmp.rename(out)


def _synth_world(args):
    world, seed, split, root = args
    samples = sg.make_samples(dataclasses.replace(world, seed=seed))
    for s in samples:
        fio.write_sample(Path(root) / split / s.scene_id, s, {"split": split})
    return len(samples)


def write_series(directory: Path, world: sg.WorldConfig, coverage=(0.1, 0.6),
                 coarse_every: int = 4, coarse_gap: float = 0.2) -> None:
    """Synthetic input for ``pipeline``: contaminated fine scenes plus a dense,
    partly invalid coarse series."""
    directory.mkdir(parents=True, exist_ok=True)
    scenes = sg.gen_series(world)
    rng = np.random.default_rng([world.seed, 0x5E7])
    fine_days = [s.doy for s in scenes]
    span = world.revisit_days * (world.series_length - 1)
    offsets = list(range(0, span + 1, coarse_every))
    coarse_days = [(fine_days[0] - 1 + o) % 365 + 1 for o in offsets]
    for o, day, r in zip(offsets, coarse_days, sg.render_on(world, offsets)):
        fio.write_raster(directory / f"coarse_{day:03d}.rst", sg.degrade_to_coarse(r, world.coarse_factor))
        invalid = sg.synth_cloud_mask(world.size, coarse_gap, rng) if o % world.revisit_days else \
            np.zeros((world.size, world.size), np.uint8)
        fio.write_mask(directory / f"coarse_valid_{day:03d}.rst", invalid)
    for s in scenes:
        cov = float(rng.uniform(*coverage))
        mask = sg.synth_cloud_mask(world.size, cov, rng)
        contaminated = s.raster.copy()
        contaminated[mask == 1] = 1.0  # clouds are bright
        fio.write_raster(directory / f"fine_{s.doy:03d}.rst", contaminated)
        fio.write_raster(directory / f"truth_{s.doy:03d}.rst", s.raster)
        fio.write_mask(directory / f"fine_mask_{s.doy:03d}.rst", mask)
    fio.write_kv(directory / "series.txt", {
        "sensor_id": scenes[0].sensor_id,
        "fine_days": ",".join(map(str, fine_days)),
        "coarse_days": ",".join(map(str, coarse_days)),
        "world_seed": world.seed,
    })


def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    tmp = _prepare_output_dir(out, args.force)
    try:
        jobs = []
        for split, n in (("train", cfg.n_train_worlds), ("val", cfg.n_val_worlds)):
            for seed in sg.world_seeds(cfg.seed, split, n):
                jobs.append((cfg.world, seed, split, str(tmp)))
        counts = _map(_synth_world, jobs, args.jobs)
        n_train = sum(c for c, j in zip(counts, jobs) if j[2] == "train")
        n_val = sum(counts) - n_train
        if args.series:
            seed = sg.world_seeds(cfg.seed, "test", 1)[0]
            write_series(tmp / "series", dataclasses.replace(cfg.world, seed=seed))
        (tmp / CONFIG_NAME).write_text(cfg.dumps())
        fio.write_kv(tmp / "dataset.txt", {"n_train": n_train, "n_val": n_val, "seed": cfg.seed,
                                           "size": cfg.world.size})
        _commit_dir(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(f"wrote {n_train} train and {n_val} val scenes to {out}")
    return EXIT_OK


# -- train ---------------------------------------------------------------------

def _load_dataset(root, split: str) -> list[sg.Sample]:
    try:
        samples = fio.read_split(root, split)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc
    if not samples:
        raise DataError(f"dataset split {split!r} under {root} is empty")
    return samples


def _check_compatible(net: NetConfig, shape: tuple[int, ...]) -> None:
    h, w, c = shape
    div = 2 ** (net.levels - 1)
    if c != net.bands:
        raise DataError(f"dataset rasters have {c} bands, network expects {net.bands}")
    if h % div or w % div:
        raise DataError(f"dataset scenes are {h}x{w}; network needs sizes divisible by {div}")


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state_path, log_path = out / "state.bin", out / "train_log.csv"
    samples = _load_dataset(args.data, "train")
    _check_compatible(cfg.net, samples[0].scene.raster.shape)

    if args.resume:
        if not state_path.exists():
            raise DataError(f"nothing to resume: {state_path} missing")
        state, saved_train, norm = fio.load_state(state_path)
        saved = load_config(str(out / CONFIG_NAME))
        if saved_train != cfg.train or state.params.config != cfg.net:
            log.warning("resuming with the configuration stored in %s", out)
        cfg.train, cfg.net = saved_train, state.params.config
        cfg.seed, cfg.world = saved.seed, saved.world
        if log_path.exists():
            fm.truncate_log(log_path, state.step)
    else:
        norm = sg.compute_coefficients([s.scene.raster for s in samples])
        state = fm.TrainState.fresh(build(cfg.net, cfg.seed))
    (out / CONFIG_NAME).write_text(cfg.dumps())
    examples = fm.examples_from(samples, norm)
    until = cfg.train.total_steps if args.until is None else min(args.until, cfg.train.total_steps)

    with fm.TrainLog(log_path, resume=args.resume) as tlog:
        def on_step(st, rec):
            tlog.write(rec)
            if rec.step % 100 == 0:
                log.info("step %d lr %.3g loss %.4f (%.0fs)", rec.step, rec.lr, rec.loss, rec.wallclock)
            if cfg.checkpoint_every and rec.step % cfg.checkpoint_every == 0:
                fio.save_state(state_path, st, cfg.train, norm)

        fm.fit(state, examples, cfg.train, until=until, on_step=on_step)
    fio.save_state(state_path, state, cfg.train, norm)
    fio.save_checkpoint(out / "model.ckpt", state.params, norm, {"step": state.step})
    print(f"trained to step {state.step}; checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


# -- generate / impute ---------------------------------------------------------

def _load_model(path):
    try:
        ck = fio.load_checkpoint(path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc
    if ck.norm is None:
        raise DataError(f"checkpoint {path} carries no normalization coefficients")
    return ck


def _read_raster(path) -> np.ndarray:
    try:
        return fio.read_raster(path).data
    except FileNotFoundError as exc:
        raise DataError(f"raster not found: {path}") from exc


def _condition(args, norm, shape_check=None) -> tuple[ConditionStack, MetaInputs, sg.Sample | None]:
    sample = None
    if args.scene:
        try:
            sample = fio.read_sample(args.scene)
        except FileNotFoundError as exc:
            raise DataError(f"scene directory incomplete: {exc}") from exc
        composite = sample.composites[args.composite]
        coarse, doy, sensor = sample.coarse, sample.scene.doy, sample.scene.sensor_id
    else:
        if not (args.composite_file and args.coarse_file and args.doy):
            raise UsageError("give --scene or all of --composite-file, --coarse-file and --doy")
        composite, coarse = _read_raster(args.composite_file), _read_raster(args.coarse_file)
        doy, sensor = args.doy, args.sensor
    if args.doy:
        doy = args.doy
    try:
        cond = ConditionStack(sg.normalize(composite, norm), sg.normalize(coarse, norm), True, doy, sensor)
        meta = MetaInputs(0.0, doy, sensor, True)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if args.no_modis:
        cond = cond.without_modis()
        meta = dataclasses.replace(meta, modis_available=False)
    return cond, meta, sample


def _check_model_input(net: NetConfig, shape) -> None:
    try:
        _check_compatible(net, shape)
    except DataError as exc:
        raise DataError(f"input does not fit the checkpoint: {exc}") from exc


def _write_output(out: Path, raster_norm: np.ndarray, norm, png: str | None, info: dict) -> None:
    phys = sg.denormalize(raster_norm, norm)
    outside = float(np.mean((phys < 0) | (phys > 1)))
    phys = np.clip(phys, 0.0, 1.0)
    fio.write_raster(out, phys)
    fio.write_kv(out.with_suffix(out.suffix + ".txt"), {**info, "clamped_fraction": f"{outside:.6f}"})
    if png:
        fio.write_png(png, phys)


def cmd_generate(args, cfg: RunConfig) -> int:
    ck = _load_model(args.checkpoint)
    cond, meta, _ = _condition(args, ck.norm)
    _check_model_input(ck.params.config, cond.composite.shape)
    scfg = cfg.sample
    x = sp.generate(ck.params, cond, meta, scfg)
    _write_output(Path(args.out), x, ck.norm, args.png,
                  {"mode": "generate", "steps": scfg.steps, "seed": scfg.seed,
                   "with_modis": int(meta.modis_available)})
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_impute(args, cfg: RunConfig) -> int:
    ck = _load_model(args.checkpoint)
    cond, meta, sample = _condition(args, ck.norm)
    _check_model_input(ck.params.config, cond.composite.shape)
    if args.input:
        observed = _read_raster(args.input)
    elif sample is not None:
        observed = sample.scene.raster
    else:
        raise UsageError("impute needs --input or --scene")
    if args.mask:
        try:
            mask = fio.read_mask(args.mask)
        except FileNotFoundError as exc:
            raise DataError(f"mask not found: {args.mask}") from exc
    elif args.coverage is not None:
        mask = sg.synth_cloud_mask(observed.shape[0], args.coverage,
                                   np.random.default_rng([cfg.seed, 0xC0]))
    elif sample is not None:
        mask = sample.mask
    else:
        raise UsageError("impute needs --mask, --coverage or --scene")
    if mask.shape != observed.shape[:2] or observed.shape != cond.composite.shape:
        raise DataError(f"mask {mask.shape}, raster {observed.shape} and conditioning "
                        f"{cond.composite.shape} do not line up")
    with np.errstate(invalid="ignore"):
        x1 = sg.normalize(np.where(mask[..., None] == 1, 0.0, observed), ck.norm)
    scfg = cfg.sample
    x = sp.impute(ck.params, x1, mask, cond, meta, scfg)
    info = {"mode": "impute", "steps": scfg.steps, "seed": scfg.seed,
            "with_modis": int(meta.modis_available), "cloud_fraction": f"{float(mask.mean()):.6f}"}
    if sample is not None:
        rep = mt.report(ev.decode(x, ck.norm), sample.scene.raster)
        info.update(sid=f"{rep.sid:.8f}", ssim=f"{rep.ssim:.8f}", psnr=mt.format_psnr(rep.psnr))
        print(f"sid {rep.sid:.5f} ssim {rep.ssim:.4f} psnr {mt.format_psnr(rep.psnr)}")
    _write_output(Path(args.out), x, ck.norm, args.png, info)
    print(f"wrote {args.out}")
    return EXIT_OK


# -- evaluate ------------------------------------------------------------------

@dataclass
class EvalJob:
    checkpoint: str
    samples: list
    cfg: RunConfig
    offset: int


def _eval_chunk(job: EvalJob) -> list[dict]:
    ck = fio.load_checkpoint(job.checkpoint)
    return evaluate_samples(ck, job.samples, job.cfg, job.offset)


def evaluate_samples(ck: fio.Checkpoint, samples: Sequence[sg.Sample], cfg: RunConfig,
                     offset: int = 0) -> list[dict]:
    """Per-scene rows for the downscaling and cloud-imputation protocols."""
    scenes = ev.prepare(samples, ck.norm)
    steps = cfg.sample.steps
    return (ev.baseline_rows(scenes, cfg.world.coarse_factor, cfg.starfm_window)
            + ev.downscale_rows(ck.params, ck.norm, scenes, steps, cfg.eval_seeds, offset)
            + ev.impute_rows(ck.params, ck.norm, scenes, cfg.coverages, steps, cfg.eval_seeds,
                             offset=offset))


REPORT_FIELDS = ("protocol", "method", "scene_id", "coverage", "cloud_fraction", "with_modis",
                 "steps", "seed", "n", "sid", "ssim", "psnr")


def cmd_evaluate(args, cfg: RunConfig) -> int:
    ck = _load_model(args.checkpoint)
    samples = _load_dataset(args.data, args.split)[: cfg.eval_scenes]
    _check_model_input(ck.params.config, samples[0].scene.raster.shape)
    if args.jobs > 1:
        # chunk on batch boundaries so every job sees the same batches as a serial run
        starts = np.arange(0, len(samples), ev.BATCH)
        chunks = [np.arange(len(samples))[b[0]: b[-1] + ev.BATCH]
                  for b in np.array_split(starts, args.jobs) if len(b)]
        jobs = [EvalJob(args.checkpoint, [samples[i] for i in c], cfg, int(c[0]))
                for c in chunks if len(c)]
        rows = [r for part in _map(_eval_chunk, jobs, args.jobs) for r in part]
    else:
        rows = evaluate_samples(ck, samples, cfg)
    # same order whatever the chunking
    rows.sort(key=lambda r: (r["protocol"], r["method"], str(r.get("coverage", "")),
                             str(r["with_modis"]), str(r["seed"]), r["scene_id"]))
    agg = ev.aggregate(rows)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(f".{out.name}.tmp")
    mt.write_rows(tmp, [{k: r.get(k, "") for k in REPORT_FIELDS} for r in rows + agg], REPORT_FIELDS)
    tmp.replace(out)
    (out.parent / CONFIG_NAME).write_text(cfg.dumps())
    for r in agg:
        print(f"{r['protocol']:9s} {r['method']:11s} cov={r['coverage']!s:5s} modis={r['with_modis']} "
              f"sid={float(r['sid']):.5f} ssim={float(r['ssim']):.4f} psnr={r['psnr']}")
    return EXIT_OK


# -- pipeline ------------------------------------------------------------------

def _days(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def run_pipeline(ck: fio.Checkpoint, series_dir: Path, cadence: Sequence[int], steps: int,
                 seed: int) -> dict[int, np.ndarray]:
    """Gap-free reflectance rasters for every requested day."""
    meta = fio.read_kv(series_dir / "series.txt")
    sensor = meta["sensor_id"]
    fine_days, coarse_days = _days(meta["fine_days"]), _days(meta["coarse_days"])
    coarse = [fio.read_raster(series_dir / f"coarse_{d:03d}.rst").data for d in coarse_days]
    valid = [fio.read_mask(series_dir / f"coarse_valid_{d:03d}.rst") for d in coarse_days]
    try:
        filled = sg.coarse_temporal_interp(coarse, valid, coarse_days)
    except ValueError as exc:
        raise DataError(f"coarse series in {series_dir}: {exc}") from exc
    coarse_at = dict(zip(coarse_days, filled))
    norm, params = ck.norm, ck.params

    def nearest_coarse(day):
        return coarse_at[min(coarse_days, key=lambda c: (abs(c - day), c))]

    history: list[tuple[int, np.ndarray]] = []  # gap-free fine rasters, time-ordered
    outputs = {}
    wanted = sorted(set(cadence) | set(fine_days))
    for k, day in enumerate(wanted):
        if history:
            composite = sg.build_composite([r for _, r in history],
                                           [np.zeros(r.shape[:2], np.uint8) for _, r in history])
        else:
            composite = nearest_coarse(day)
        cond = ConditionStack(sg.normalize(composite, norm), sg.normalize(nearest_coarse(day), norm),
                              True, day, sensor)
        info = MetaInputs(0.0, day, sensor, True)
        scfg = sp.SampleConfig(steps, seed * 1000 + k)
        if day in fine_days:
            obs = fio.read_raster(series_dir / f"fine_{day:03d}.rst").data
            mask = fio.read_mask(series_dir / f"fine_mask_{day:03d}.rst")
            with np.errstate(invalid="ignore"):
                x1 = sg.normalize(np.where(mask[..., None] == 1, 0.0, obs), norm)
            x = sp.impute(params, x1, mask, cond, info, scfg)
        else:
            x = sp.generate(params, cond, info, scfg)
        phys = np.clip(sg.denormalize(x, norm), 0.0, 1.0)
        if day in fine_days:
            history.append((day, phys))
        if day in cadence:
            outputs[day] = phys
    return outputs


def cmd_pipeline(args, cfg: RunConfig) -> int:
    ck = _load_model(args.checkpoint)
    series = Path(args.series)
    if not (series / "series.txt").exists():
        raise DataError(f"{series} is not a series directory (series.txt missing)")
    meta = fio.read_kv(series / "series.txt")
    if args.cadence_days:
        cadence = _days(args.cadence_days)
    else:
        first, last = _days(meta["fine_days"])[0], _days(meta["fine_days"])[-1]
        cadence = list(range(first, last + 1, args.cadence))
    outputs = run_pipeline(ck, series, cadence, cfg.sample.steps, cfg.seed)
    out = Path(args.out)
    tmp = _prepare_output_dir(out, args.force)
    try:
        for day, r in sorted(outputs.items()):
            fio.write_raster(tmp / f"day_{day:03d}.rst", r)
        (tmp / CONFIG_NAME).write_text(cfg.dumps())
        _commit_dir(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(f"wrote {len(outputs)} rasters to {out}")
    return EXIT_OK


# -- plumbing ------------------------------------------------------------------

def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flowfuse", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp_):
        sp_.add_argument("--config", help="JSON run configuration; flags override it")
        sp_.add_argument("--seed", type=int)
        sp_.add_argument("--jobs", type=int, default=1)

    s = sub.add_parser("synth", help="generate a synthetic train/val dataset")
    common(s)
    s.add_argument("--out", required=True)
    s.add_argument("--train-worlds", type=int)
    s.add_argument("--val-worlds", type=int)
    s.add_argument("--size", type=int)
    s.add_argument("--series-length", type=int)
    s.add_argument("--coarse-factor", type=int)
    s.add_argument("--series", action="store_true", help="also write a pipeline input series")
    s.add_argument("--force", action="store_true")

    t = sub.add_parser("train", help="train the vector-field network")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--until", type=int, help="stop after this optimizer step")
    t.add_argument("--total-steps", type=int)
    t.add_argument("--warmup-steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--grad-accum", type=int)
    t.add_argument("--lr-base", type=float)
    t.add_argument("--checkpoint-every", type=int)

    def conditioning(sp_):
        sp_.add_argument("--checkpoint", required=True)
        sp_.add_argument("--scene", help="dataset scene directory")
        sp_.add_argument("--composite", type=int, default=0, help="composite index within --scene")
        sp_.add_argument("--composite-file")
        sp_.add_argument("--coarse-file")
        sp_.add_argument("--doy", type=int)
        sp_.add_argument("--sensor", default="OLI", choices=("TM", "OLI"))
        sp_.add_argument("--no-modis", action="store_true")
        sp_.add_argument("--steps", type=int)
        sp_.add_argument("--out", required=True)
        sp_.add_argument("--png")

    g = sub.add_parser("generate", help="synthesize a fine raster")
    common(g)
    conditioning(g)

    i = sub.add_parser("impute", help="fill clouds and gaps in a fine raster")
    common(i)
    conditioning(i)
    i.add_argument("--input", help="contaminated raster (defaults to the scene's fine raster)")
    i.add_argument("--mask", help="mask raster, 1 = missing")
    i.add_argument("--coverage", type=float, help="synthesize a cloud mask at this coverage")

    e = sub.add_parser("evaluate", help="metrics report over a dataset split")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--out", required=True)
    e.add_argument("--steps", type=int)
    e.add_argument("--eval-scenes", type=int)
    e.add_argument("--eval-seeds", type=int, nargs="+")
    e.add_argument("--coverages", type=float, nargs="+")

    pl = sub.add_parser("pipeline", help="gap-free series at a fixed cadence")
    common(pl)
    pl.add_argument("--checkpoint", required=True)
    pl.add_argument("--series", required=True)
    pl.add_argument("--cadence", type=int, default=16, help="days between outputs")
    pl.add_argument("--cadence-days", help="explicit comma-separated output days")
    pl.add_argument("--steps", type=int)
    pl.add_argument("--out", required=True)
    pl.add_argument("--force", action="store_true")
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "generate": cmd_generate,
            "impute": cmd_impute, "evaluate": cmd_evaluate, "pipeline": cmd_pipeline}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, fio.FormatError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
