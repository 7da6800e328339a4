"""Conditional flow-matching training: probability paths, loss, AdamW and
the warmup/cosine learning-rate schedule."""

from __future__ import annotations

import csv
import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numcore as nc
from .numcore import NumericError, Tape
from .scenegen import NormCoeffs, Sample, normalize
from .unet import ConditionStack, MetaBatch, MetaInputs, NetParams, apply, stack_conditions


@dataclass(frozen=True)
class TrainConfig:
    sigma: float = 0.001
    lr_base: float = 1e-4
    warmup_steps: int = 200
    total_steps: int = 2000
    batch_size: int = 4
    grad_accum: int = 4
    modis_dropout_prob: float = 0.5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def validate(self) -> None:
        if not 0.0 <= self.modis_dropout_prob <= 1.0:
            raise ValueError(f"modis_dropout_prob {self.modis_dropout_prob} outside [0, 1]")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")
        if self.batch_size < 1 or self.grad_accum < 1:
            raise ValueError("batch_size and grad_accum must be >= 1")
        if self.lr_base <= 0:
            raise ValueError("lr_base must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# Four samples per optimizer step keeps 2000 steps within a CPU budget.
DESK_TRAIN = TrainConfig(batch_size=4, grad_accum=1)
# lr 1e-4 leaves a 2000-step desk run far from converged; 1e-3 gets there.
DESK_TRAIN_FAST = dataclasses.replace(DESK_TRAIN, lr_base=1e-3)


@dataclass
class TrainState:
    params: NetParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0  # optimizer applications so far
    samples_seen: int = 0  # index of the next per-sample RNG stream
    micro: int = 0  # micro-batches accumulated towards the next update
    accum: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def fresh(cls, params: NetParams) -> "TrainState":
        zeros = {k: np.zeros_like(a) for k, a in params.arrays.items()}
        return cls(params, zeros, {k: z.copy() for k, z in zeros.items()})

    def check(self) -> None:
        for k, a in self.params.arrays.items():
            if self.m[k].shape != a.shape or self.v[k].shape != a.shape:
                raise ValueError(f"optimizer moments for {k} do not match parameter shape {a.shape}")


@dataclass
class TrainExample:
    """One normalized training target with its conditioning pool."""

    target: np.ndarray  # H x W x 6
    composites: list[np.ndarray]
    coarse: np.ndarray
    doy: int
    sensor_id: str
    scene_id: str = ""

    @classmethod
    def from_sample(cls, sample: Sample, coeffs: NormCoeffs) -> "TrainExample":
        return cls(
            target=normalize(sample.scene.raster, coeffs),
            composites=[normalize(c, coeffs) for c in sample.composites],
            coarse=normalize(sample.coarse, coeffs),
            doy=sample.scene.doy,
            sensor_id=sample.scene.sensor_id,
            scene_id=sample.scene_id,
        )


# -- path and loss -----------------------------------------------------------

def target_field(x0: np.ndarray, x1: np.ndarray) -> np.ndarray:
    x0, x1 = np.asarray(x0), np.asarray(x1)
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {x1.shape}")
    return x1 - x0


def sample_path(x0, x1, t, sigma: float, rng: np.random.Generator | None = None,
                noise: np.ndarray | None = None) -> np.ndarray:
    """Point on the Gaussian path around the straight line from ``x0`` to ``x1``.

    ``t`` may be a scalar or one value per leading batch entry. Pass ``noise``
    to supply the standard-normal draw explicitly.
    """
    x0, x1 = np.asarray(x0), np.asarray(x1)
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {x1.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0) | (t > 1)) or np.any(np.isnan(t)):
        raise ValueError(f"t outside [0, 1]: {t}")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    tb = t.reshape(t.shape + (1,) * (x0.ndim - t.ndim))
    out = (1 - tb) * x0 + tb * x1
    if sigma > 0:
        if noise is None:
            if rng is None:
                raise ValueError("rng or noise required when sigma > 0")
            noise = rng.standard_normal(x0.shape)
        out = out + sigma * noise
    return out.astype(np.result_type(x0.dtype, x1.dtype))


def cfm_loss(pred, target) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return 0.5 * float(np.mean((pred - target) ** 2))


def cfm_loss_tensor(pred: nc.Tensor, target: np.ndarray) -> nc.Tensor:
    return nc.mul_scalar(nc.mse(pred, target), 0.5)


def augment_condition(example: TrainExample, rng: np.random.Generator,
                      modis_dropout_prob: float) -> ConditionStack:
    """Pick one composite uniformly and drop the coarse raster with the given
    probability."""
    if not example.composites:
        raise ValueError("example has no composites to choose from")
    if not 0.0 <= modis_dropout_prob <= 1.0:
        raise ValueError("modis_dropout_prob outside [0, 1]")
    comp = example.composites[int(rng.integers(len(example.composites)))]
    cond = ConditionStack(comp, example.coarse, True, example.doy, example.sensor_id)
    if rng.random() < modis_dropout_prob:
        cond = cond.without_modis()
    return cond


# -- optimization ------------------------------------------------------------

def lr_schedule(step: int, cfg: TrainConfig) -> float:
    if step < 0 or step > cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.lr_base * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.lr_base * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_update(state: TrainState, grads: dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.01) -> TrainState:
    """One AdamW step in place; the state is untouched if any gradient is
    non-finite."""
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NumericError(f"non-finite gradients for {', '.join(sorted(bad))}; step rejected")
    k = state.step + 1
    c1 = 1.0 - beta1 ** k
    c2 = 1.0 - beta2 ** k
    for name, p in state.params.arrays.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1 - beta2) * np.square(g)
        if weight_decay:
            p -= (lr * weight_decay) * p
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    state.step = k
    return state


# -- training step -----------------------------------------------------------

@dataclass
class MicroBatch:
    x_t: np.ndarray  # N x 6 x H x W
    cond: np.ndarray  # N x 12 x H x W
    meta: MetaBatch
    target: np.ndarray  # N x 6 x H x W


def sample_stream(seed: int, index: int) -> np.random.Generator:
    """Independent RNG stream for the ``index``-th training sample."""
    return np.random.default_rng([seed, 0xF10, index])


def prepare_batch(batch: Sequence[TrainExample], cfg: TrainConfig, first_index: int,
                  dtype=np.float32) -> MicroBatch:
    xs, conds, metas, targets = [], [], [], []
    shape = batch[0].target.shape
    for j, ex in enumerate(batch):
        if ex.target.shape != shape:
            raise ValueError("examples in a batch must share one spatial size")
        rng = sample_stream(cfg.seed, first_index + j)
        cond = augment_condition(ex, rng, cfg.modis_dropout_prob)
        t = float(rng.random())
        x0 = rng.standard_normal(shape)
        noise = rng.standard_normal(shape)
        x1 = ex.target.astype(np.float64)
        xs.append(sample_path(x0, x1, t, cfg.sigma, noise=noise))
        targets.append(target_field(x0, x1))
        conds.append(cond)
        metas.append(cond.meta(t))
    to_cf = lambda arrs: np.stack(arrs).transpose(0, 3, 1, 2).astype(dtype)  # noqa: E731
    return MicroBatch(to_cf(xs), stack_conditions(conds).astype(dtype),
                      MetaBatch.from_meta(metas), to_cf(targets))


def loss_and_grads(params: NetParams, mb: MicroBatch) -> tuple[float, dict[str, np.ndarray]]:
    tensors = params.tensors(requires_grad=True)
    with Tape() as tape:
        pred = apply(tensors, params.config, nc.tensor(mb.x_t), mb.cond, mb.meta)
        loss = cfm_loss_tensor(pred, mb.target)
    grads = tape.backward(loss)
    return float(loss.data), {k: grads[t] for k, t in tensors.items() if t in grads}


def train_step(state: TrainState, batch: Sequence[TrainExample],
               cfg: TrainConfig) -> tuple[TrainState, float]:
    """Accumulate one micro-batch; every ``grad_accum`` calls apply AdamW.

    The returned loss is that of this micro-batch.
    """
    if not batch:
        raise ValueError("empty batch")
    mb = prepare_batch(batch, cfg, state.samples_seen,
                       dtype=state.params.arrays["out.conv.weight"].dtype)
    loss, grads = loss_and_grads(state.params, mb)
    state.samples_seen += len(batch)
    scale = 1.0 / cfg.grad_accum
    for k, g in grads.items():
        if k in state.accum:
            state.accum[k] += g * scale
        else:
            state.accum[k] = g * scale
    state.micro += 1
    if state.micro == cfg.grad_accum:
        lr = lr_schedule(state.step + 1, cfg)
        adamw_update(state, state.accum, lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
        state.accum = {}
        state.micro = 0
    return state, loss


def choose_examples(n_examples: int, cfg: TrainConfig, first_index: int, count: int) -> list[int]:
    """Dataset indices for samples ``first_index .. first_index + count``."""
    return [int(np.random.default_rng([cfg.seed, 0xDA7A, i]).integers(n_examples))
            for i in range(first_index, first_index + count)]


@dataclass
class StepRecord:
    step: int
    lr: float
    loss: float
    wallclock: float


def fit(state: TrainState, examples: Sequence[TrainExample], cfg: TrainConfig,
        until: int | None = None,
        on_step: Callable[[TrainState, StepRecord], None] | None = None) -> list[StepRecord]:
    """Run optimizer steps until ``until`` (default ``cfg.total_steps``)."""
    cfg.validate()
    if not examples:
        raise ValueError("no training examples")
    until = cfg.total_steps if until is None else until
    if until > cfg.total_steps:
        raise ValueError("cannot train past total_steps")
    records = []
    t0 = time.perf_counter()
    while state.step < until:
        losses = []
        while True:
            idx = choose_examples(len(examples), cfg, state.samples_seen, cfg.batch_size)
            state, loss = train_step(state, [examples[i] for i in idx], cfg)
            losses.append(loss)
            if state.micro == 0:
                break
        rec = StepRecord(state.step, lr_schedule(state.step, cfg), float(np.mean(losses)),
                         time.perf_counter() - t0)
        records.append(rec)
        if on_step is not None:
            on_step(state, rec)
    return records


def smoothed(losses: Sequence[float], window: int = 50) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    x = np.asarray(losses, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


LOG_FIELDS = ("step", "lr", "loss", "wallclock")


class TrainLog:
    """Append-only CSV log with one row per optimizer step."""

    def __init__(self, path, resume: bool = False):
        self.path = path
        mode = "a" if resume else "w"
        self._fh = open(path, mode, newline="")
        self._writer = csv.writer(self._fh)
        if not resume or self._fh.tell() == 0:
            self._writer.writerow(LOG_FIELDS)

    def write(self, rec: StepRecord) -> None:
        self._writer.writerow([rec.step, f"{rec.lr:.9e}", f"{rec.loss:.9e}", f"{rec.wallclock:.3f}"])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_log(path) -> list[StepRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [StepRecord(int(r["step"]), float(r["lr"]), float(r["loss"]), float(r["wallclock"]))
            for r in rows]


def truncate_log(path, step: int) -> None:
    """Drop rows after ``step`` so a resumed run continues the log cleanly."""
    rows = [r for r in read_log(path) if r.step <= step]
    with TrainLog(path) as log:
        for r in rows:
            log.write(r)


def examples_from(samples: Iterable[Sample], coeffs: NormCoeffs) -> list[TrainExample]:
    return [TrainExample.from_sample(s, coeffs) for s in samples]


__all__ = [
    "DESK_TRAIN",
    "MetaInputs",
    "StepRecord",
    "TrainConfig",
    "TrainExample",
    "TrainLog",
    "TrainState",
    "adamw_update",
    "augment_condition",
    "cfm_loss",
    "cfm_loss_tensor",
    "examples_from",
    "fit",
    "lr_schedule",
    "read_log",
    "sample_path",
    "smoothed",
    "target_field",
    "train_step",
]
