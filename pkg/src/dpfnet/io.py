"""Point-cloud files, flat key=value configs, report files and binary checkpoints."""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import zlib
from dataclasses import dataclass, field, fields
from typing import Iterable

import numpy as np

from .core import Rng
from .errors import FormatError, IncompatibleConfigError, ParameterError, ParseError
from .model import DPFNet, ModelConfig
from .train import OptimizerState, TrainConfig, TrainState


def atomic_write(path, data: bytes | str) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    mode = "wb" if isinstance(data, bytes) else "w"
    kw = {} if isinstance(data, bytes) else {"encoding": "utf-8", "newline": "\n"}
    with open(tmp, mode, **kw) as fh:
        fh.write(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# point clouds

CLOUD_MAGIC = b"DPFC"


def write_xyz(path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    atomic_write(path, "".join(f"{x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in pts))


def read_xyz(path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.split()
            try:
                rows.append([float(p) for p in parts[:3]])
            except ValueError:
                raise ParseError("bad coordinate", path, lineno) from None
            if len(rows[-1]) != 3:
                raise ParseError("expected x y z", path, lineno)
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def write_cloud_bin(path, points: np.ndarray) -> None:
    pts = np.ascontiguousarray(points, dtype="<f8").reshape(-1, 3)
    atomic_write(path, CLOUD_MAGIC + struct.pack("<QI", len(pts), 3) + pts.tobytes())


def read_cloud_bin(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CLOUD_MAGIC or len(raw) < 16:
        raise FormatError("not a binary point cloud", "header")
    n, d = struct.unpack_from("<QI", raw, 4)
    body = raw[16:]
    if d != 3 or len(body) != n * d * 8:
        raise FormatError("truncated or malformed body", "points")
    return np.frombuffer(body, dtype="<f8").reshape(n, d).astype(np.float64)


def read_cloud(path) -> np.ndarray:
    return read_cloud_bin(path) if os.fspath(path).endswith(".bin") else read_xyz(path)


def write_cloud(path, points) -> None:
    if os.fspath(path).endswith(".bin"):
        write_cloud_bin(path, points)
    else:
        write_xyz(path, points)


def list_clouds(directory) -> list[str]:
    names = sorted(f for f in os.listdir(directory) if f.endswith((".xyz", ".bin")))
    return [os.path.join(directory, f) for f in names]


# ---------------------------------------------------------------------------
# configuration


@dataclass
class Config:
    """Effective settings for every command, in one flat namespace."""

    # model
    latent_dim: int = 128
    point_layers: int = 63
    prior_layers: int = 14
    hidden: int = 64
    prior_hidden: int = 256
    log_scale_bound: float = 5.0
    # training
    epochs: int = 100
    batch_size: int = 4
    points: int = 2048
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    lr_gamma: float = 0.1
    lr_milestones: tuple = (0.5, 0.75)
    clip_norm: float = 0.0
    checkpoint_interval: int = 0
    log_interval: int = 1
    # data
    data_dir: str = ""
    family: str = "torus"
    count: int = 50
    resolution: int = 32
    normalization: str = "shape"  # shape | global | none
    # metrics
    grid_resolution: int = 28
    emd_mode: str = "exact"
    f1_tau: float = 1e-3

    MODEL_KEYS = ("latent_dim", "point_layers", "prior_layers", "hidden", "prior_hidden",
                  "log_scale_bound")

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{k: getattr(self, k) for k in self.MODEL_KEYS})

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: getattr(self, k) for k in names})

    def update(self, values: dict) -> "Config":
        known = {f.name: f for f in fields(self)}
        for k, v in values.items():
            if k not in known:
                raise ParameterError(f"unknown config key {k!r}")
            setattr(self, k, _coerce(known[k], v))
        return self

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, tuple):
                val = ",".join(repr(x) for x in val)
            elif isinstance(val, float):
                val = repr(val)
            lines.append(f"{f.name} = {val}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, source: str = "<config>") -> "Config":
        return cls().update(parse_kv(text, source))


def _coerce(f: dataclasses.Field, raw):
    default = f.default
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ParameterError(f"bad value for {f.name}: {raw!r}") from None
    return raw.strip()


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ParseError("expected key = value", source, lineno)
        k, v = body.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path) -> Config:
    with open(path, encoding="utf-8") as fh:
        return Config.loads(fh.read(), os.fspath(path))


# ---------------------------------------------------------------------------
# reports


def write_report(path, sections: list[tuple[str, dict]]) -> None:
    chunks = []
    for name, values in sections:
        lines = [f"[{name}]"]
        for k, v in values.items():
            lines.append(f"{k} = {v:.10g}" if isinstance(v, float) else f"{k} = {v}")
        chunks.append("\n".join(lines))
    atomic_write(path, "\n\n".join(chunks) + "\n")


def read_report(path) -> dict[str, dict[str, str]]:
    sections: dict[str, dict[str, str]] = {}
    cur = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                cur = sections.setdefault(line[1:-1], {})
            elif cur is not None and "=" in line:
                k, v = line.split("=", 1)
                cur[k.strip()] = v.strip()
    return sections


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: b"DPFN" | u32 version | sections...
# section: 4-byte tag | u64 payload length | payload | u32 crc32(payload)

MAGIC = b"DPFN"
VERSION = 1
SECTION_ORDER = (b"CONF", b"PARA", b"OPTM", b"RNGS", b"EPOC")


@dataclass
class Checkpoint:
    config: Config
    params: dict  # name -> array, in store order
    optimizer: OptimizerState | None = None
    rng_state: dict | None = None
    epoch: int = 0
    step: int = 0
    extra: dict = field(default_factory=dict)


def _pack_blobs(named: Iterable[tuple[str, np.ndarray]]) -> bytes:
    items = list(named)
    out = [struct.pack("<I", len(items))]
    for name, arr in items:
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<II", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def _unpack_blobs(buf: bytes, section: str) -> dict[str, np.ndarray]:
    try:
        (count,) = struct.unpack_from("<I", buf, 0)
        off = 4
        out = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + ln].decode("utf-8")
            off += ln
            rows, cols = struct.unpack_from("<II", buf, off)
            off += 8
            nbytes = rows * cols * 8
            if off + nbytes > len(buf):
                raise FormatError("blob overruns section", section)
            out[name] = np.frombuffer(buf[off:off + nbytes], dtype="<f8").reshape(rows, cols).astype(np.float64)
            off += nbytes
        if off != len(buf):
            raise FormatError("trailing bytes", section)
        return out
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed blob table ({exc})", section) from None


def encode_checkpoint(ck: Checkpoint) -> bytes:
    sections = {}
    sections[b"CONF"] = ck.config.dumps().encode("utf-8")
    sections[b"PARA"] = _pack_blobs(ck.params.items())
    opt = ck.optimizer
    if opt is None:
        sections[b"OPTM"] = b""
    else:
        head = struct.pack("<Q5d", opt.t, opt.lr, opt.beta1, opt.beta2, opt.eps, opt.weight_decay)
        names = list(opt.m)
        blobs = []
        for n in names:
            blobs += [(f"m:{n}", opt.m[n]), (f"v:{n}", opt.v[n]), (f"vmax:{n}", opt.v_max[n])]
        sections[b"OPTM"] = head + _pack_blobs(blobs)
    sections[b"RNGS"] = json.dumps(ck.rng_state, sort_keys=True).encode("utf-8") if ck.rng_state else b""
    sections[b"EPOC"] = struct.pack("<QQ", ck.epoch, ck.step)
    out = [MAGIC, struct.pack("<I", VERSION)]
    for tag in SECTION_ORDER:
        payload = sections[tag]
        out.append(tag + struct.pack("<Q", len(payload)) + payload
                   + struct.pack("<I", zlib.crc32(payload)))
    return b"".join(out)


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if raw[:4] != MAGIC:
        raise FormatError("bad magic (not a DPFN checkpoint)", "header")
    if len(raw) < 8:
        raise FormatError("truncated header", "header")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", "header")
    off = 8
    payloads = {}
    for tag in SECTION_ORDER:
        name = tag.decode()
        if off + 12 > len(raw) or raw[off:off + 4] != tag:
            raise FormatError("missing or out of order", name)
        (length,) = struct.unpack_from("<Q", raw, off + 4)
        start = off + 12
        end = start + length
        if end + 4 > len(raw):
            raise FormatError("truncated", name)
        payload = raw[start:end]
        (crc,) = struct.unpack_from("<I", raw, end)
        if zlib.crc32(payload) != crc:
            raise FormatError("checksum mismatch", name)
        payloads[name] = payload
        off = end + 4
    if off != len(raw):
        raise FormatError("trailing bytes after last section", "EPOC")

    try:
        config = Config.loads(payloads["CONF"].decode("utf-8"), "checkpoint")
    except (UnicodeDecodeError, ParseError, ParameterError) as exc:
        raise FormatError(str(exc), "CONF") from None
    params = _unpack_blobs(payloads["PARA"], "PARA")
    opt = None
    buf = payloads["OPTM"]
    if buf:
        hsize = struct.calcsize("<Q5d")
        if len(buf) < hsize:
            raise FormatError("truncated optimizer header", "OPTM")
        t, lr, b1, b2, eps, wd = struct.unpack_from("<Q5d", buf, 0)
        blobs = _unpack_blobs(buf[hsize:], "OPTM")
        opt = OptimizerState(lr, b1, b2, eps, wd, t)
        for key, arr in blobs.items():
            kind, _, name = key.partition(":")
            target = {"m": opt.m, "v": opt.v, "vmax": opt.v_max}.get(kind)
            if target is None:
                raise FormatError(f"unknown optimizer blob {key!r}", "OPTM")
            target[name] = arr
    rng_state = None
    if payloads["RNGS"]:
        try:
            rng_state = json.loads(payloads["RNGS"].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(str(exc), "RNGS") from None
    if len(payloads["EPOC"]) != 16:
        raise FormatError("expected two u64 counters", "EPOC")
    epoch, step = struct.unpack("<QQ", payloads["EPOC"])
    return Checkpoint(config, params, opt, rng_state, epoch, step)


def save_checkpoint(path, ck: Checkpoint) -> None:
    atomic_write(path, encode_checkpoint(ck))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def checkpoint_from(net: DPFNet, config: Config, state: TrainState | None = None) -> Checkpoint:
    ck = Checkpoint(config, {k: v.copy() for k, v in net.params.items()})
    if state is not None:
        ck.optimizer = state.optimizer
        ck.rng_state = state.rng.state
        ck.epoch = state.epoch
        ck.step = state.step
    return ck


def restore_net(ck: Checkpoint) -> DPFNet:
    net = DPFNet(ck.config.model_config(), seed=ck.config.seed)
    expected = net.params.names()
    if list(ck.params) != expected:
        missing = sorted(set(expected) - set(ck.params))
        extra = sorted(set(ck.params) - set(expected))
        raise FormatError(f"parameter table mismatch (missing {missing[:3]}, extra {extra[:3]})", "PARA")
    for name, arr in ck.params.items():
        if arr.shape != net.params.value(name).shape:
            raise FormatError(f"{name} has shape {arr.shape}", "PARA")
        net.params.set_value(name, arr)
    return net


def restore_state(ck: Checkpoint) -> TrainState:
    if ck.optimizer is None or ck.rng_state is None:
        raise FormatError("checkpoint has no training state to resume", "OPTM")
    rng = Rng(0)
    try:
        rng.state = ck.rng_state
    except (TypeError, ValueError, KeyError) as exc:
        raise FormatError(f"unusable rng state ({exc})", "RNGS") from None
    return TrainState(ck.optimizer, rng, ck.epoch, ck.step)


def check_resume_compatible(saved: Config, current: Config) -> None:
    """Model shape and data settings must match; epochs may grow."""
    keys = Config.MODEL_KEYS + ("points", "batch_size", "seed", "data_dir", "family", "count",
                                "resolution", "normalization")
    diffs = [k for k in keys if getattr(saved, k) != getattr(current, k)]
    if diffs:
        detail = ", ".join(f"{k}: {getattr(saved, k)!r} != {getattr(current, k)!r}" for k in diffs)
        raise IncompatibleConfigError(f"cannot resume, config differs ({detail})")
