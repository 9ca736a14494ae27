"""Binary model artifacts.

PUQB (frozen base model), little-endian::

    "PUQB" | u32 version=1 | u32 input_dim | u32 n_hidden | u32 widths[n_hidden]
    | u32 num_classes | u32 n_taps | u32 tap_layers[n_taps]
    | f64 train_accuracy | f64 test_accuracy | f64 parameters (W row-major, then b, per layer)

PUQM (meta-model), little-endian::

    "PUQM" | u32 version=1 | u32 n_taps | u32 tap_dims[n_taps] | u32 num_classes
    | f64 logit_clamp | u32 mode tag | f64 parameters (reducers in tap order, then combiner)
"""

import logging
import struct
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from puq.core.errors import FormatError
from puq.core.files import atomic_write_bytes
from puq.schemas.models import BaseModelSpec, MetaMode, MetaModelSpec
from puq.services import numkernel
from puq.services.basemodel import FrozenBaseModel, build_base_net
from puq.services.metamodel import MetaModel, build_meta

logger = logging.getLogger(__name__)

BASE_MAGIC = b"PUQB"
META_MAGIC = b"PUQM"
VERSION = 1
MODE_TAGS: dict[MetaMode, int] = {
    MetaMode.DIRICHLET: 0,
    MetaMode.LINEAR_META: 1,
    MetaMode.CROSS_ENT: 2,
    MetaMode.LAST_LAYER: 3,
}


class _Reader:
    def __init__(self, payload: bytes, what: str) -> None:
        self.payload = payload
        self.offset = 0
        self.what = what

    def unpack(self, fmt: str) -> tuple[Any, ...]:
        size = struct.calcsize(fmt)
        if len(self.payload) < self.offset + size:
            raise FormatError(f"truncated {self.what}", offset=len(self.payload))
        values = struct.unpack_from(fmt, self.payload, self.offset)
        self.offset += size
        return values

    def u32_list(self, count: int) -> tuple[int, ...]:
        return self.unpack(f"<{count}I") if count else ()

    def float64s(self, count: int) -> np.ndarray:
        size = 8 * count
        if len(self.payload) < self.offset + size:
            raise FormatError(f"truncated {self.what} parameters", offset=len(self.payload))
        values = np.frombuffer(self.payload, dtype="<f8", count=count, offset=self.offset)
        self.offset += size
        if not np.all(np.isfinite(values)):
            raise FormatError(f"non-finite parameter in {self.what}", offset=self.offset)
        return values.astype(np.float64)

    def expect_end(self) -> None:
        if self.offset != len(self.payload):
            raise FormatError(f"trailing bytes after {self.what}", offset=self.offset)


def _pack_params(params: Sequence[np.ndarray]) -> bytes:
    return b"".join(np.ascontiguousarray(param, dtype="<f8").tobytes() for param in params)


def _load_params(params: Sequence[np.ndarray], reader: _Reader) -> None:
    for param in params:
        param[...] = reader.float64s(param.size).reshape(param.shape)


def _check_header(reader: _Reader, magic: bytes) -> None:
    found, version = reader.unpack("<4sI")
    if found != magic:
        raise FormatError(f"bad {reader.what} magic {found!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported {reader.what} version {version}", offset=4)


def encode_base_model(model: FrozenBaseModel) -> bytes:
    spec = model.spec
    header = struct.pack("<4sIII", BASE_MAGIC, VERSION, spec.input_dim, len(spec.hidden_widths))
    header += struct.pack(f"<{len(spec.hidden_widths)}I", *spec.hidden_widths)
    header += struct.pack("<II", spec.num_classes, len(spec.tap_layers))
    header += struct.pack(f"<{len(spec.tap_layers)}I", *spec.tap_layers)
    header += struct.pack("<dd", model.train_accuracy, model.test_accuracy)
    return header + _pack_params(model.net.parameters())


def decode_base_model(payload: bytes) -> FrozenBaseModel:
    reader = _Reader(payload, "base model")
    _check_header(reader, BASE_MAGIC)
    input_dim, n_hidden = reader.unpack("<II")
    widths = reader.u32_list(n_hidden)
    num_classes, n_taps = reader.unpack("<II")
    taps = reader.u32_list(n_taps)
    train_accuracy, test_accuracy = reader.unpack("<dd")
    try:
        spec = BaseModelSpec(
            input_dim=input_dim, hidden_widths=widths, num_classes=num_classes, tap_layers=taps
        )
    except ValueError as exc:
        raise FormatError(f"invalid base-model spec: {exc}", offset=8) from exc
    net = build_base_net(spec, seed=0)
    _load_params(net.parameters(), reader)
    reader.expect_end()
    return FrozenBaseModel(
        net=net, spec=spec, train_accuracy=train_accuracy, test_accuracy=test_accuracy
    )


def encode_meta_model(model: MetaModel) -> bytes:
    spec = model.spec
    header = struct.pack("<4sII", META_MAGIC, VERSION, len(spec.tap_dims))
    header += struct.pack(f"<{len(spec.tap_dims)}I", *spec.tap_dims)
    header += struct.pack("<IdI", spec.num_classes, spec.logit_clamp, MODE_TAGS[spec.mode])
    return header + _pack_params(model.parameters())


def decode_meta_model(payload: bytes) -> MetaModel:
    reader = _Reader(payload, "meta model")
    _check_header(reader, META_MAGIC)
    (n_taps,) = reader.unpack("<I")
    tap_dims = reader.u32_list(n_taps)
    num_classes, logit_clamp, tag = reader.unpack("<IdI")
    modes = {value: mode for mode, value in MODE_TAGS.items()}
    if tag not in modes:
        raise FormatError(f"unknown meta-model mode tag {tag}", offset=reader.offset - 4)
    try:
        spec = MetaModelSpec(
            tap_dims=tap_dims, num_classes=num_classes, mode=modes[tag], logit_clamp=logit_clamp
        )
    except ValueError as exc:
        raise FormatError(f"invalid meta-model spec: {exc}", offset=8) from exc
    model = build_meta(spec, seed=0)
    _load_params(model.parameters(), reader)
    reader.expect_end()
    numkernel.freeze(model.parameters())
    return model


def save_base_model(path: str | Path, model: FrozenBaseModel) -> Path:
    target = atomic_write_bytes(path, encode_base_model(model))
    logger.info("Saved base model to %s", target)
    return target


def load_base_model(path: str | Path) -> FrozenBaseModel:
    try:
        payload = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return decode_base_model(payload)


def save_meta_model(path: str | Path, model: MetaModel) -> Path:
    target = atomic_write_bytes(path, encode_meta_model(model))
    logger.info("Saved meta-model to %s", target)
    return target


def load_meta_model(path: str | Path) -> MetaModel:
    try:
        payload = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return decode_meta_model(payload)
