"""Conditional vector-field network ``u(x_t, t, c)``.

A U-Net with residual blocks, self-attention at the coarsest level(s) and a
metadata embedding (flow time, day of year, sensor, coarse-input flag) that is
projected into every residual block. The conditioning rasters are stacked with
``x_t`` along the channel axis at full resolution.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from . import numcore as nc
from .numcore import Tensor

BANDS = ("red", "green", "blue", "nir", "swir1", "swir2")
SENSORS = ("TM", "OLI")
SUB_EMBED_DIM = 8
DOY_PERIOD = 365.25


@dataclass(frozen=True)
class NetConfig:
    base_channels: int = 16
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    num_res_blocks: int = 2
    attention_levels: tuple[int, ...] | None = None  # None -> coarsest level only
    bands: int = 6
    embed_dim: int = 64
    heads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(self.channel_multipliers))
        if self.attention_levels is not None:
            object.__setattr__(self, "attention_levels", tuple(sorted(set(self.attention_levels))))

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)

    @property
    def attn_levels(self) -> tuple[int, ...]:
        if self.attention_levels is None:
            return (self.levels - 1,)
        return self.attention_levels

    @property
    def in_channels(self) -> int:
        return 3 * self.bands

    @property
    def meta_dim(self) -> int:
        return self.embed_dim + 2 + 2 * SUB_EMBED_DIM

    def validate(self) -> None:
        if self.bands != len(BANDS):
            raise ValueError(f"network must output {len(BANDS)} bands, got {self.bands}")
        if self.base_channels < 1 or self.num_res_blocks < 1:
            raise ValueError("base_channels and num_res_blocks must be positive")
        if not self.channel_multipliers or any(m < 1 for m in self.channel_multipliers):
            raise ValueError(f"invalid channel multipliers {self.channel_multipliers}")
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ValueError("embed_dim must be an even number >= 2")
        if any(lv < 0 or lv >= self.levels for lv in self.attn_levels):
            raise ValueError(
                f"attention levels {self.attn_levels} outside 0..{self.levels - 1}"
            )
        for lv in self.attn_levels:
            if self.base_channels * self.channel_multipliers[lv] % self.heads:
                raise ValueError("attention channels must be divisible by heads")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        if self.attention_levels is not None:
            d["attention_levels"] = list(self.attention_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["channel_multipliers"] = tuple(d["channel_multipliers"])
        if d.get("attention_levels") is not None:
            d["attention_levels"] = tuple(d["attention_levels"])
        return cls(**d)


# Desk-scale default: about 2e5 parameters, trainable on one CPU core.
DESK_CONFIG = NetConfig(base_channels=16, channel_multipliers=(1, 1, 2), num_res_blocks=1)


@dataclass(frozen=True)
class MetaInputs:
    t: float
    doy: int
    sensor_id: str = "OLI"
    modis_available: bool = True

    def __post_init__(self):
        if not 0.0 <= float(self.t) <= 1.0:
            raise ValueError(f"flow time t={self.t} outside [0, 1]")
        if not 1 <= int(self.doy) <= 366:
            raise ValueError(f"day of year {self.doy} outside [1, 366]")
        if self.sensor_id not in SENSORS:
            raise ValueError(f"unknown sensor {self.sensor_id!r}; expected one of {SENSORS}")


class MetaBatch(NamedTuple):
    t: np.ndarray
    doy: np.ndarray
    sensor: np.ndarray
    available: np.ndarray

    @classmethod
    def from_meta(cls, metas: "MetaInputs | Sequence[MetaInputs]") -> "MetaBatch":
        if isinstance(metas, MetaInputs):
            metas = [metas]
        return cls(
            t=np.array([m.t for m in metas], dtype=np.float64),
            doy=np.array([m.doy for m in metas], dtype=np.int64),
            sensor=np.array([SENSORS.index(m.sensor_id) for m in metas], dtype=np.int64),
            available=np.array([bool(m.modis_available) for m in metas]),
        )

    def with_t(self, t) -> "MetaBatch":
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), self.t.shape).copy()
        if np.any((t < 0) | (t > 1)):
            raise ValueError("flow time outside [0, 1]")
        return self._replace(t=t)


@dataclass
class ConditionStack:
    """Conditioning rasters (``H x W x 6``, normalized units) plus metadata."""

    composite: np.ndarray
    coarse: np.ndarray
    modis_available: bool = True
    doy: int = 1
    sensor_id: str = "OLI"

    def __post_init__(self):
        if self.composite.shape != self.coarse.shape:
            raise ValueError(
                f"composite {self.composite.shape} and coarse {self.coarse.shape} differ"
            )

    def meta(self, t: float) -> MetaInputs:
        return MetaInputs(t=t, doy=self.doy, sensor_id=self.sensor_id,
                          modis_available=self.modis_available)

    def without_modis(self) -> "ConditionStack":
        return dataclasses.replace(self, coarse=np.zeros_like(self.coarse), modis_available=False)

    def channels_first(self) -> np.ndarray:
        """``(12, H, W)`` array: composite bands then coarse bands."""
        return np.concatenate([self.composite, self.coarse], axis=-1).transpose(2, 0, 1)


def stack_conditions(conds: Sequence[ConditionStack]) -> np.ndarray:
    return np.stack([c.channels_first() for c in conds]).astype(np.float32)


@dataclass
class NetParams:
    config: NetConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.arrays.items()}

    def copy(self) -> "NetParams":
        return NetParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype) -> "NetParams":
        return NetParams(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()})


def norm_groups(channels: int, max_groups: int = 8) -> int:
    for g in range(min(max_groups, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


# -- layout ----------------------------------------------------------------

def _res_layout(prefix, cin, cout, meta_dim):
    yield f"{prefix}.norm1.gamma", (cin,), "ones"
    yield f"{prefix}.norm1.beta", (cin,), "zeros"
    yield f"{prefix}.conv1.weight", (cout, cin, 3, 3), "fan_in"
    yield f"{prefix}.conv1.bias", (cout,), "zeros"
    # scale and shift applied after the second norm
    yield f"{prefix}.emb.weight", (2 * cout, meta_dim), "fan_in"
    yield f"{prefix}.emb.bias", (2 * cout,), "zeros"
    yield f"{prefix}.norm2.gamma", (cout,), "ones"
    yield f"{prefix}.norm2.beta", (cout,), "zeros"
    yield f"{prefix}.conv2.weight", (cout, cout, 3, 3), "fan_in"
    yield f"{prefix}.conv2.bias", (cout,), "zeros"
    if cin != cout:
        yield f"{prefix}.skip.weight", (cout, cin, 1, 1), "fan_in"
        yield f"{prefix}.skip.bias", (cout,), "zeros"


def _attn_layout(prefix, ch):
    yield f"{prefix}.qkv.weight", (3 * ch, ch), "fan_in"
    yield f"{prefix}.qkv.bias", (3 * ch,), "zeros"
    yield f"{prefix}.out.weight", (ch, ch), "fan_in"
    yield f"{prefix}.out.bias", (ch,), "zeros"


def layout(cfg: NetConfig) -> Iterator[tuple[str, tuple[int, ...], str]]:
    """Yield ``(name, shape, init)`` for every parameter, in a fixed order."""
    cfg.validate()
    E, M = cfg.embed_dim, cfg.meta_dim
    yield "time.fc1.weight", (E, E), "fan_in"
    yield "time.fc1.bias", (E,), "zeros"
    yield "time.fc2.weight", (E, E), "fan_in"
    yield "time.fc2.bias", (E,), "zeros"
    # lookup tables stored (dim, rows) so a one-hot row selects a column
    yield "meta.sensor", (SUB_EMBED_DIM, len(SENSORS)), "normal"
    yield "meta.available", (SUB_EMBED_DIM, 2), "normal"

    chans = [cfg.base_channels * m for m in cfg.channel_multipliers]
    yield "in_conv.weight", (chans[0], cfg.in_channels, 3, 3), "fan_in"
    yield "in_conv.bias", (chans[0],), "zeros"
    skips = [chans[0]]
    ch = chans[0]
    for lv, cout in enumerate(chans):
        for i in range(cfg.num_res_blocks):
            yield from _res_layout(f"down.{lv}.res.{i}", ch, cout, M)
            ch = cout
            if lv in cfg.attn_levels:
                yield from _attn_layout(f"down.{lv}.attn.{i}", ch)
            skips.append(ch)
        if lv != cfg.levels - 1:
            yield f"down.{lv}.downsample.weight", (ch, ch, 3, 3), "fan_in"
            yield f"down.{lv}.downsample.bias", (ch,), "zeros"
            skips.append(ch)

    yield from _res_layout("mid.res.0", ch, ch, M)
    yield from _attn_layout("mid.attn", ch)
    yield from _res_layout("mid.res.1", ch, ch, M)

    for lv in reversed(range(cfg.levels)):
        cout = chans[lv]
        for i in range(cfg.num_res_blocks + 1):
            yield from _res_layout(f"up.{lv}.res.{i}", ch + skips.pop(), cout, M)
            ch = cout
            if lv in cfg.attn_levels:
                yield from _attn_layout(f"up.{lv}.attn.{i}", ch)
        if lv != 0:
            yield f"up.{lv}.upsample.weight", (ch, ch, 3, 3), "fan_in"
            yield f"up.{lv}.upsample.bias", (ch,), "zeros"

    yield "out.norm.gamma", (ch,), "ones"
    yield "out.norm.beta", (ch,), "zeros"
    yield "out.conv.weight", (cfg.bands, ch, 3, 3), "zeros"
    yield "out.conv.bias", (cfg.bands,), "zeros"


def param_count(cfg: NetConfig) -> int:
    return sum(math.prod(shape) for _, shape, _ in layout(cfg))


def build(cfg: NetConfig, seed: int) -> NetParams:
    """Initialize parameters deterministically; the output convolution starts
    at zero so a fresh network predicts a zero field."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape, init in layout(cfg):
        if init == "zeros":
            arr = np.zeros(shape)
        elif init == "ones":
            arr = np.ones(shape)
        elif init == "normal":
            arr = rng.standard_normal(shape)
        else:
            fan_in = math.prod(shape[1:])
            bound = 1.0 / math.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        if name in arrays:
            raise AssertionError(f"duplicate parameter name {name}")
        arrays[name] = arr.astype(np.float32)
    return NetParams(cfg, arrays)


# -- forward ---------------------------------------------------------------

def sinusoidal(t: np.ndarray, dim: int) -> np.ndarray:
    """``[sin(t*f), cos(t*f)]`` with ``dim/2`` frequencies geometric in [1, 1e4]."""
    freqs = np.geomspace(1.0, 1e4, dim // 2)
    arg = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def doy_features(doy: np.ndarray) -> np.ndarray:
    phase = 2 * np.pi * np.asarray(doy, dtype=np.float64) / DOY_PERIOD
    return np.stack([np.sin(phase), np.cos(phase)], axis=1)


def embed_meta(meta: "MetaInputs | Sequence[MetaInputs] | MetaBatch", embed_dim: int,
               params: dict[str, Tensor]) -> Tensor:
    """Metadata vector ``[time MLP | doy sin/cos | sensor | availability]``.

    Returns ``(N, embed_dim + 18)``.
    """
    mb = meta if isinstance(meta, MetaBatch) else MetaBatch.from_meta(meta)
    if np.any((mb.doy < 1) | (mb.doy > 366)):
        raise ValueError("day of year outside [1, 366]")
    if np.any((mb.t < 0) | (mb.t > 1)):
        raise ValueError("flow time outside [0, 1]")
    dtype = params["time.fc1.weight"].dtype
    n = len(mb.t)
    base = nc.tensor(sinusoidal(mb.t, embed_dim), dtype=dtype)
    h = nc.linear(base, params["time.fc1.weight"], params["time.fc1.bias"])
    h = nc.linear(nc.silu(h), params["time.fc2.weight"], params["time.fc2.bias"])
    doy = nc.tensor(doy_features(mb.doy), dtype=dtype)
    sensor_onehot = nc.tensor(np.eye(len(SENSORS))[mb.sensor], dtype=dtype)
    avail_onehot = nc.tensor(np.eye(2)[mb.available.astype(np.int64)], dtype=dtype)
    sensor = nc.linear(sensor_onehot, params["meta.sensor"])
    avail = nc.linear(avail_onehot, params["meta.available"])
    out = nc.concat([h, doy, sensor, avail], axis=1)
    assert out.shape == (n, embed_dim + 2 + 2 * SUB_EMBED_DIM)
    return out


def _res_block(p, prefix, h, emb_act):
    cin = h.shape[1]
    a = nc.group_norm(h, norm_groups(cin), p[f"{prefix}.norm1.gamma"], p[f"{prefix}.norm1.beta"])
    a = nc.conv2d(nc.silu(a), p[f"{prefix}.conv1.weight"], p[f"{prefix}.conv1.bias"], padding=1)
    cout = a.shape[1]
    a = nc.group_norm(a, norm_groups(cout), p[f"{prefix}.norm2.gamma"], p[f"{prefix}.norm2.beta"])
    # modulating after the norm keeps the conditioning from being normalized away
    a = nc.scale_shift(a, nc.linear(emb_act, p[f"{prefix}.emb.weight"], p[f"{prefix}.emb.bias"]))
    a = nc.conv2d(nc.silu(a), p[f"{prefix}.conv2.weight"], p[f"{prefix}.conv2.bias"], padding=1)
    if f"{prefix}.skip.weight" in p:
        h = nc.conv2d(h, p[f"{prefix}.skip.weight"], p[f"{prefix}.skip.bias"])
    return nc.add(h, a)


def _attn(p, prefix, h, heads):
    return nc.self_attention(
        h, heads, p[f"{prefix}.qkv.weight"], p[f"{prefix}.qkv.bias"],
        p[f"{prefix}.out.weight"], p[f"{prefix}.out.bias"],
    )


def apply(p: dict[str, Tensor], cfg: NetConfig, x_t: Tensor, cond: np.ndarray,
          meta: MetaBatch) -> Tensor:
    """Channels-first forward pass: ``x_t`` is ``(N, 6, H, W)``, ``cond`` is
    ``(N, 12, H, W)``. Records on the active tape when parameters require
    gradients."""
    n, c, hgt, wid = x_t.shape
    if c != cfg.bands:
        raise ValueError(f"x_t has {c} channels, expected {cfg.bands}")
    if cond.shape != (n, 2 * cfg.bands, hgt, wid):
        raise ValueError(f"conditioning shape {cond.shape} does not match x_t {x_t.shape}")
    div = 2 ** (cfg.levels - 1)
    if hgt % div or wid % div:
        raise ValueError(f"spatial size {hgt}x{wid} not divisible by {div}")

    emb = embed_meta(meta, cfg.embed_dim, p)
    emb_act = nc.silu(emb)
    h = nc.concat([x_t, nc.tensor(cond, dtype=x_t.dtype)], axis=1)
    h = nc.conv2d(h, p["in_conv.weight"], p["in_conv.bias"], padding=1)
    skips = [h]
    for lv in range(cfg.levels):
        for i in range(cfg.num_res_blocks):
            h = _res_block(p, f"down.{lv}.res.{i}", h, emb_act)
            if lv in cfg.attn_levels:
                h = _attn(p, f"down.{lv}.attn.{i}", h, cfg.heads)
            skips.append(h)
        if lv != cfg.levels - 1:
            h = nc.conv2d(h, p[f"down.{lv}.downsample.weight"], p[f"down.{lv}.downsample.bias"],
                          stride=2, padding=1)
            skips.append(h)

    h = _res_block(p, "mid.res.0", h, emb_act)
    h = _attn(p, "mid.attn", h, cfg.heads)
    h = _res_block(p, "mid.res.1", h, emb_act)

    for lv in reversed(range(cfg.levels)):
        for i in range(cfg.num_res_blocks + 1):
            h = _res_block(p, f"up.{lv}.res.{i}", nc.concat([h, skips.pop()], axis=1), emb_act)
            if lv in cfg.attn_levels:
                h = _attn(p, f"up.{lv}.attn.{i}", h, cfg.heads)
        if lv != 0:
            h = nc.upsample_nearest(h, 2)
            h = nc.conv2d(h, p[f"up.{lv}.upsample.weight"], p[f"up.{lv}.upsample.bias"], padding=1)

    ch = h.shape[1]
    h = nc.silu(nc.group_norm(h, norm_groups(ch), p["out.norm.gamma"], p["out.norm.beta"]))
    return nc.conv2d(h, p["out.conv.weight"], p["out.conv.bias"], padding=1)


def forward(params: NetParams, x_t: np.ndarray,
            cond: "ConditionStack | Sequence[ConditionStack]",
            meta: "MetaInputs | Sequence[MetaInputs]") -> np.ndarray:
    """Predict the vector field for channel-last rasters.

    ``x_t`` is ``H x W x 6`` (with a single ``cond``/``meta``) or
    ``N x H x W x 6`` (with sequences of length ``N``). The output has the
    same layout as ``x_t``.
    """
    single = x_t.ndim == 3
    conds = [cond] if isinstance(cond, ConditionStack) else list(cond)
    metas = [meta] if isinstance(meta, MetaInputs) else list(meta)
    x = x_t[None] if single else x_t
    if not (len(conds) == len(metas) == x.shape[0]):
        raise ValueError("batch size mismatch between x_t, conditions and metadata")
    for c in conds:
        if c.composite.shape != x.shape[1:]:
            raise ValueError(
                f"conditioning raster {c.composite.shape} does not match x_t {x.shape[1:]}"
            )
    dtype = params.arrays["out.conv.weight"].dtype
    xt = nc.tensor(x.transpose(0, 3, 1, 2), dtype=dtype)
    out = apply(params.tensors(), params.config, xt, stack_conditions(conds).astype(dtype),
                MetaBatch.from_meta(metas))
    y = out.data.transpose(0, 2, 3, 1)
    return y[0] if single else y
