"""
Frozen-model container and packed binary-weight inference.

Container layout (all integers little-endian):

    b"SBT1" | u16 version | u32 total length incl. CRC
    u32 config length | canonical config JSON
    u32 module count
    per module:
        u16 name length | name (utf-8) | u8 kind code | u8 ndim | ndim × u32 dims | u8 flags
        flags bit 0 (binary): f32 α | mask bits | sign bits (1 = +1)
        u32 residual count | residual × f32
    u32 CRC32 of every preceding byte

Bitstreams are ceil(elements / 8) bytes, row-major element e at byte e // 8,
bit e % 8, least significant bit first. Q/K/V activation masks are not
stored: they are regenerated from the config seed.
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .biprop import EffectiveWeights
from .errors import (
    ChecksumError,
    ConfigError,
    ContainerError,
    ShapeError,
    TruncatedContainerError,
    UnfrozenModuleError,
    UnsupportedVersionError,
)
from .model import FrozenModel, FrozenModule, ModelConfig, frozen_forward, module_specs, parse_config, reference_linear
from .numerics import INFER_DTYPE

logger = logging.getLogger(__name__)

MAGIC = b"SBT1"
VERSION = 1
FLAG_BINARY = 0x01
KIND_CODES = {"linear": 0, "gain": 1, "dense": 2, "affine": 3, "layernorm": 4, "positional": 5}
CODE_KINDS = {v: k for k, v in KIND_CODES.items()}
HEADER = struct.Struct("<4sHI")


def pack_bits(flags: np.ndarray) -> bytes:
    return np.packbits(np.asarray(flags, dtype=bool).ravel().astype(np.uint8), bitorder="little").tobytes()


def unpack_bits(data: bytes, count: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little", count=count)
    return bits.astype(bool)


# -----------------------------------------------------------------------------
# pack
# -----------------------------------------------------------------------------

def _check_frozen(frozen) -> None:
    if not isinstance(frozen, FrozenModel):
        raise UnfrozenModuleError(f"pack needs a frozen model, got {type(frozen).__name__}; call freeze() first")
    for spec in module_specs(frozen.config):
        module = frozen.modules.get(spec.name)
        if module is None:
            raise UnfrozenModuleError(f"module {spec.name} missing from the frozen model")
        if spec.binarized and not module.binarized:
            raise UnfrozenModuleError(f"module {spec.name} has no frozen mask, signs and α")


def _pack_module(module: FrozenModule) -> bytes:
    name = module.name.encode("utf-8")
    out = bytearray(struct.pack("<H", len(name)) + name)
    out += struct.pack("<BB", KIND_CODES[module.kind], len(module.shape))
    out += struct.pack(f"<{len(module.shape)}I", *module.shape)
    out += struct.pack("<B", FLAG_BINARY if module.binarized else 0)
    if module.binarized:
        eff = module.effective
        out += struct.pack("<f", eff.alpha)
        out += pack_bits(eff.mask)
        out += pack_bits(eff.signs > 0)
    residual = np.asarray(module.residual, dtype="<f4")
    out += struct.pack("<I", residual.size) + residual.tobytes()
    return bytes(out)


def pack(frozen: FrozenModel) -> bytes:
    """Serialize a frozen model; pack(unpack(b)) == b."""
    _check_frozen(frozen)
    config = frozen.config.canonical_json().encode("utf-8")
    body = bytearray(struct.pack("<I", len(config)) + config)
    body += struct.pack("<I", len(frozen.modules))
    for module in frozen.modules.values():
        body += _pack_module(module)
    total = HEADER.size + len(body) + 4
    data = HEADER.pack(MAGIC, VERSION, total) + bytes(body)
    return data + struct.pack("<I", zlib.crc32(data) & 0xFFFFFFFF)


def save_packed(frozen: FrozenModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(pack(frozen))
    return path


# -----------------------------------------------------------------------------
# unpack
# -----------------------------------------------------------------------------

class _Reader:
    def __init__(self, data: bytes, offset: int, end: int):
        self.data = data
        self.offset = offset
        self.end = end

    def take(self, n: int) -> bytes:
        if self.offset + n > self.end:
            raise TruncatedContainerError(f"container ends inside a field at byte {self.offset}")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def _read_module(reader: _Reader) -> FrozenModule:
    (name_len,) = reader.unpack("<H")
    name = reader.take(name_len).decode("utf-8")
    code, ndim = reader.unpack("<BB")
    if code not in CODE_KINDS:
        raise ContainerError(f"module {name}: unknown kind code {code}")
    kind = CODE_KINDS[code]
    shape = reader.unpack(f"<{ndim}I")
    (flags,) = reader.unpack("<B")
    effective = None
    if flags & FLAG_BINARY:
        (alpha,) = reader.unpack("<f")
        count = int(np.prod(shape))
        n_bytes = (count + 7) // 8
        mask = unpack_bits(reader.take(n_bytes), count).reshape(shape)
        signs = np.where(unpack_bits(reader.take(n_bytes), count), 1, -1).astype(np.int8).reshape(shape)
        effective = EffectiveWeights(name, "linear" if kind == "linear" else "layernorm-gain", mask, signs, float(alpha))
    (n_res,) = reader.unpack("<I")
    residual = np.frombuffer(reader.take(4 * n_res), dtype="<f4").astype(INFER_DTYPE)
    residual.flags.writeable = False
    return FrozenModule(name, kind, tuple(shape), effective, residual)


def unpack(data: bytes) -> FrozenModel:
    """
    Rebuild a frozen model from container bytes.

    Checked in order: magic, version, length, CRC. A failing check raises
    before any module is decoded.
    """
    data = bytes(data)
    if len(data) < HEADER.size:
        raise TruncatedContainerError(f"{len(data)} bytes is shorter than the container header")
    magic, version, total = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ContainerError(f"not a packed model (magic {magic!r})")
    if version != VERSION:
        raise UnsupportedVersionError(f"container version {version} is not supported (expected {VERSION})")
    if len(data) < total:
        raise TruncatedContainerError(f"container declares {total} bytes, got {len(data)}")
    if len(data) > total:
        raise ContainerError(f"{len(data) - total} trailing bytes after the container")
    (stored,) = struct.unpack_from("<I", data, total - 4)
    if zlib.crc32(data[:total - 4]) & 0xFFFFFFFF != stored:
        raise ChecksumError("CRC32 mismatch; the container is corrupt")

    reader = _Reader(data, HEADER.size, total - 4)
    (config_len,) = reader.unpack("<I")
    try:
        config = parse_config(json.loads(reader.take(config_len).decode("utf-8")))
    except (ConfigError, json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ContainerError(f"container config is unreadable: {e}") from e
    (count,) = reader.unpack("<I")
    modules = {}
    for _ in range(count):
        module = _read_module(reader)
        modules[module.name] = module
    if reader.offset != reader.end:
        raise ContainerError(f"{reader.end - reader.offset} unparsed bytes before the checksum")
    frozen = FrozenModel.from_modules(config, modules)
    _check_frozen(frozen)
    return frozen


def load_packed(path: Union[str, Path]) -> FrozenModel:
    path = Path(path)
    try:
        return unpack(path.read_bytes())
    except FileNotFoundError as e:
        raise ContainerError(f"packed model not found: {path}") from e


# -----------------------------------------------------------------------------
# packed inference
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class _SignPlanes:
    positive: np.ndarray
    negative: np.ndarray
    alpha: np.float32


class PackedRuntime:
    """
    Inference over an immutable frozen model with the bitwise linear kernel:
    y = α·(Σ kept +x − Σ kept −x). Planes are built once, so one runtime
    can serve concurrent batches.
    """

    def __init__(self, frozen: FrozenModel):
        _check_frozen(frozen)
        self.frozen = frozen
        self._planes = {}
        for name, module in frozen.modules.items():
            if module.kind == "linear":
                eff = module.effective
                pos = (eff.mask & (eff.signs > 0)).astype(INFER_DTYPE)
                neg = (eff.mask & (eff.signs < 0)).astype(INFER_DTYPE)
                pos.flags.writeable = False
                neg.flags.writeable = False
                self._planes[name] = _SignPlanes(pos, neg, INFER_DTYPE(eff.alpha))

    @property
    def config(self) -> ModelConfig:
        return self.frozen.config

    def linear(self, x: np.ndarray, module: FrozenModule) -> np.ndarray:
        planes = self._planes.get(module.name)
        if planes is None:
            return reference_linear(x, module)
        return planes.alpha * (np.matmul(x, planes.positive.T) - np.matmul(x, planes.negative.T))

    def __call__(self, x: np.ndarray, valid: Optional[np.ndarray] = None) -> np.ndarray:
        cfg = self.frozen.config
        x = np.asarray(x, dtype=INFER_DTYPE)
        if x.ndim != 3 or x.shape[1:] != (cfg.w, cfg.m):
            raise ShapeError("packed_infer", x.shape, (cfg.w, cfg.m))
        return frozen_forward(self.frozen, x, valid, linear=self.linear, fast_step_t=True)


def bitwise_linear(x: np.ndarray, module: FrozenModule) -> np.ndarray:
    """Stateless bitwise kernel; PackedRuntime caches the sign planes instead."""
    if not module.binarized:
        return reference_linear(x, module)
    eff = module.effective
    pos = (eff.mask & (eff.signs > 0)).astype(x.dtype)
    neg = (eff.mask & (eff.signs < 0)).astype(x.dtype)
    return x.dtype.type(eff.alpha) * (np.matmul(x, pos.T) - np.matmul(x, neg.T))


def packed_infer(model: Union[FrozenModel, PackedRuntime, bytes], x, valid: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Task output of a packed model. ``x`` is a (B, w, m) array or a
    WindowBatch, whose validity mask is used when ``valid`` is not given.
    """
    if hasattr(x, "x"):
        valid = valid if valid is not None else x.valid
        x = x.x
    if isinstance(model, (bytes, bytearray)):
        model = unpack(model)
    runtime = model if isinstance(model, PackedRuntime) else PackedRuntime(model)
    return runtime(x, valid)


# -----------------------------------------------------------------------------
# size report
# -----------------------------------------------------------------------------

def size_report(frozen: FrozenModel) -> dict:
    """
    Per-module container bits against information bits.

    Information bits count one bit per binary weight; the container also
    stores a sign bit for every pruned entry and pads bitstreams to bytes.
    The difference between the packed length and the module sum is header
    and checksum overhead.
    """
    modules = []
    for module in frozen.modules.values():
        residual_bits = 32 * int(np.asarray(module.residual).size)
        if module.binarized:
            n = module.size
            container = 2 * 8 * ((n + 7) // 8) + 32 + residual_bits
            information = n + 32 + residual_bits
        else:
            container = information = residual_bits
        modules.append({"name": module.name, "kind": module.kind,
                        "container_bits": container, "information_bits": information})
    packed_bits = 8 * len(pack(frozen))
    module_bits = sum(m["container_bits"] for m in modules)
    return {
        "modules": modules,
        "container_bits": module_bits,
        "information_bits": sum(m["information_bits"] for m in modules),
        "packed_bits": packed_bits,
        "overhead_bits": packed_bits - module_bits,
    }
