"""Binary raster and checkpoint containers, metadata files, dataset layout."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .flowmatch import TrainConfig, TrainState
from .scenegen import NormCoeffs, Sample, Scene
from .unet import BANDS, NetConfig, NetParams, layout

RASTER_MAGIC = b"FFRASTER"
CHECKPOINT_MAGIC = b"FFCKPT\x00\x00"
STATE_MAGIC = b"FFSTATE\x00"
VERSION = 1
_DTYPE_TAGS = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8"), "u1": np.dtype("u1")}
_TAG_OF = {v: k for k, v in _DTYPE_TAGS.items()}


class FormatError(ValueError):
    """Malformed or incompatible file."""


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- rasters -----------------------------------------------------------------

@dataclass
class RasterFile:
    data: np.ndarray  # H x W x C
    bands: tuple[str, ...]

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[-1] != len(self.bands):
            raise ValueError(f"raster {self.data.shape} does not match bands {self.bands}")


def encode_raster(data: np.ndarray, bands: Sequence[str] | None = None) -> bytes:
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[..., None]
    if data.ndim != 3:
        raise ValueError(f"raster must be H x W x C, got shape {data.shape}")
    h, w, c = data.shape
    bands = tuple(bands) if bands is not None else (BANDS if c == len(BANDS) else
                                                     tuple(f"b{i}" for i in range(c)))
    if len(bands) != c:
        raise ValueError(f"{len(bands)} band names for {c} channels")
    dt = data.dtype.newbyteorder("<") if data.dtype.itemsize > 1 else data.dtype
    if dt not in _TAG_OF:
        raise ValueError(f"unsupported raster dtype {data.dtype}")
    out = [RASTER_MAGIC, struct.pack("<HIII2s", VERSION, h, w, c, _TAG_OF[dt].encode())]
    for name in bands:
        raw = name.encode()
        out.append(struct.pack("<B", len(raw)) + raw)
    out.append(np.ascontiguousarray(data, dtype=dt).tobytes())
    return b"".join(out)


def decode_raster(buf: bytes) -> RasterFile:
    if buf[:8] != RASTER_MAGIC:
        raise FormatError("not a raster file (bad magic)")
    head = struct.calcsize("<HIII2s")
    version, h, w, c, tag = struct.unpack_from("<HIII2s", buf, 8)
    if version != VERSION:
        raise FormatError(f"unsupported raster version {version}")
    dt = _DTYPE_TAGS.get(tag.decode(errors="replace"))
    if dt is None:
        raise FormatError(f"unknown dtype tag {tag!r}")
    pos = 8 + head
    bands = []
    for _ in range(c):
        n = buf[pos]
        bands.append(buf[pos + 1:pos + 1 + n].decode())
        pos += 1 + n
    size = h * w * c * dt.itemsize
    if len(buf) - pos != size:
        raise FormatError(f"raster payload has {len(buf) - pos} bytes, expected {size}")
    data = np.frombuffer(buf, dtype=dt, count=h * w * c, offset=pos).reshape(h, w, c)
    return RasterFile(data.astype(dt.newbyteorder("="), copy=True), tuple(bands))


def write_raster(path, data: np.ndarray, bands: Sequence[str] | None = None) -> None:
    atomic_write(path, encode_raster(data, bands))


def read_raster(path) -> RasterFile:
    return decode_raster(Path(path).read_bytes())


def write_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary")
    write_raster(path, mask.astype(np.uint8), ("mask",))


def read_mask(path) -> np.ndarray:
    r = read_raster(path)
    if r.data.shape[-1] != 1 or r.data.dtype != np.uint8:
        raise FormatError(f"{path} is not a single-band 8-bit mask")
    return r.data[..., 0]


def stretch_rgb(raster: np.ndarray, lo: float = 2.0, hi: float = 98.0) -> np.ndarray:
    """8-bit RGB preview with a per-band percentile stretch."""
    rgb = np.asarray(raster, dtype=np.float64)[..., [BANDS.index(b) for b in ("red", "green", "blue")]]
    out = np.empty(rgb.shape, dtype=np.uint8)
    for i in range(3):
        a, b = np.percentile(rgb[..., i], [lo, hi])
        scaled = (rgb[..., i] - a) / (b - a) if b > a else np.zeros(rgb.shape[:2])
        out[..., i] = np.round(np.clip(scaled, 0, 1) * 255).astype(np.uint8)
    return out


def write_png(path, raster: np.ndarray) -> None:
    from PIL import Image

    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".png")
    os.close(fd)
    try:
        Image.fromarray(stretch_rgb(raster), mode="RGB").save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- key/value metadata --------------------------------------------------------

def write_kv(path, values: dict) -> None:
    lines = []
    for k, v in values.items():
        if "=" in str(k) or "\n" in f"{k}{v}":
            raise ValueError(f"cannot store {k!r}={v!r} in a key-value file")
        lines.append(f"{k}={v}\n")
    atomic_write(path, "".join(lines).encode())


def read_kv(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


# -- named-array containers ----------------------------------------------------

def _encode_container(magic: bytes, header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, a in arrays.items():
        a = np.ascontiguousarray(a, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    head = json.dumps({**header, "arrays": entries}, sort_keys=True).encode()
    return magic + struct.pack("<HI", VERSION, len(head)) + head + b"".join(blobs)


def _decode_container(buf: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if buf[:8] != magic:
        raise FormatError("bad magic bytes")
    version, n = struct.unpack_from("<HI", buf, 8)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    start = 8 + struct.calcsize("<HI")
    header = json.loads(buf[start:start + n])
    body = start + n
    arrays = {}
    for e in header.pop("arrays"):
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = body + e["offset"] + 4 * count
        if end > len(buf):
            raise FormatError(f"truncated data for {e['name']}")
        arrays[e["name"]] = np.frombuffer(buf, dtype="<f4", count=count,
                                          offset=body + e["offset"]).reshape(e["shape"]).astype(np.float32)
    return header, arrays


def _validated_params(config: NetConfig, arrays: dict[str, np.ndarray]) -> NetParams:
    expected = {name: tuple(shape) for name, shape, _ in layout(config)}
    missing = expected.keys() - arrays.keys()
    extra = arrays.keys() - expected.keys()
    if missing or extra:
        raise FormatError(f"parameter names do not match config (missing {sorted(missing)[:3]}, "
                          f"unexpected {sorted(extra)[:3]})")
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise FormatError(f"{name}: stored shape {arrays[name].shape} != config shape {shape}")
    return NetParams(config, {name: arrays[name] for name in expected})


@dataclass
class Checkpoint:
    params: NetParams
    norm: NormCoeffs | None = None
    extra: dict | None = None


def save_checkpoint(path, params: NetParams, norm: NormCoeffs | None = None,
                    extra: dict | None = None) -> None:
    header = {"config": params.config.to_dict(),
              "norm": norm.to_dict() if norm is not None else None,
              "extra": extra or {}}
    atomic_write(path, _encode_container(CHECKPOINT_MAGIC, header, params.arrays))


def load_checkpoint(path) -> Checkpoint:
    header, arrays = _decode_container(Path(path).read_bytes(), CHECKPOINT_MAGIC)
    config = NetConfig.from_dict(header["config"])
    norm = NormCoeffs.from_dict(header["norm"]) if header.get("norm") else None
    return Checkpoint(_validated_params(config, arrays), norm, header.get("extra", {}))


def save_state(path, state: TrainState, train_cfg: TrainConfig,
               norm: NormCoeffs | None = None, extra: dict | None = None) -> None:
    """Everything needed to continue training exactly where it stopped."""
    arrays = {}
    for group, src in (("param", state.params.arrays), ("m", state.m), ("v", state.v),
                       ("accum", state.accum)):
        arrays.update({f"{group}/{k}": a for k, a in src.items()})
    header = {
        "config": state.params.config.to_dict(),
        "train": train_cfg.to_dict(),
        "step": state.step,
        "samples_seen": state.samples_seen,
        "micro": state.micro,
        "norm": norm.to_dict() if norm is not None else None,
        "extra": extra or {},
    }
    atomic_write(path, _encode_container(STATE_MAGIC, header, arrays))


def load_state(path) -> tuple[TrainState, TrainConfig, NormCoeffs | None]:
    header, arrays = _decode_container(Path(path).read_bytes(), STATE_MAGIC)
    config = NetConfig.from_dict(header["config"])

    def group(prefix):
        n = len(prefix) + 1
        return {k[n:]: a for k, a in arrays.items() if k.startswith(prefix + "/")}

    params = _validated_params(config, group("param"))
    state = TrainState(params, group("m"), group("v"), int(header["step"]),
                       int(header["samples_seen"]), int(header["micro"]), group("accum"))
    state.check()
    norm = NormCoeffs.from_dict(header["norm"]) if header.get("norm") else None
    return state, TrainConfig.from_dict(header["train"]), norm


# -- dataset layout ------------------------------------------------------------

def write_sample(directory, sample: Sample, extra: dict | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_raster(d / "fine.rst", sample.scene.raster)
    write_raster(d / "coarse.rst", sample.coarse)
    for i, comp in enumerate(sample.composites):
        write_raster(d / f"composite_{i}.rst", comp)
    write_mask(d / "mask.rst", sample.mask)
    meta = {
        "scene_id": sample.scene.scene_id,
        "doy": sample.scene.doy,
        "sensor_id": sample.scene.sensor_id,
        "world_seed": sample.scene.world_seed,
        "index": sample.scene.index,
        "n_composites": len(sample.composites),
        "cloud_fraction": f"{float(sample.mask.mean()):.6f}",
    }
    meta.update(extra or {})
    write_kv(d / "meta.txt", meta)


def read_sample(directory) -> Sample:
    d = Path(directory)
    meta = read_kv(d / "meta.txt")
    fine = read_raster(d / "fine.rst").data
    scene = Scene(fine, int(meta["doy"]), meta["sensor_id"], meta["scene_id"],
                  int(meta["world_seed"]), int(meta.get("index", 0)))
    comps = [read_raster(d / f"composite_{i}.rst").data for i in range(int(meta["n_composites"]))]
    return Sample(scene, read_raster(d / "coarse.rst").data, comps, read_mask(d / "mask.rst"),
                  meta=dict(meta))


def read_split(root, split: str) -> list[Sample]:
    base = Path(root) / split
    if not base.is_dir():
        raise FileNotFoundError(f"no {split} split under {root}")
    return [read_sample(p) for p in sorted(base.iterdir()) if (p / "meta.txt").exists()]
