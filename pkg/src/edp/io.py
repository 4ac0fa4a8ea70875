"""Model files exchanged between roles, and metrics CSVs.

Model file layout (all integers little-endian)::

    b"EDPM"                     magic
    u32  format version          (1)
    u32  n, then n bytes         architecture descriptor
    u32  flags                   bit 0: file holds a backbone
    u32  n, then n bytes         provenance block (n = 0 when absent)
    u64  parameter count
    f64 * count                  parameters, layer order, weight then bias,
                                 each array in C order
    u32  CRC-32 of every preceding byte

Architecture descriptor: ``u32 rank, u32 dims[rank]`` (input shape),
``u32 layer_count``, then per layer ``u8 kind, u8 trainable`` followed by the
kind's fields as u32 (Conv2D: out_channels, kernel_h, kernel_w, stride;
MaxPool2D: window, stride; Dense: out_features; others: none).

Provenance block: ``i32 participant_id, f64 noise_multiplier,
f64 clip_threshold, u32 minibatch_size, f64 delta, f64 epsilon,
u32 epochs``; infinities are stored as IEEE infinities.
"""

from __future__ import annotations

import csv
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import nncore
from .errors import (ChecksumError, ContractError, FormatError, NumericError, PayloadShapeError,
                     UnsupportedVersionError, WrongMagicError)

MAGIC = b"EDPM"
FORMAT_VERSION = 1
FLAG_BACKBONE = 1

_KIND_CODES = {"Conv2D": 1, "MaxPool2D": 2, "Flatten": 3, "Dense": 4, "ReLU": 5, "Softmax": 6}
_KIND_FIELDS = {
    "Conv2D": ("out_channels", "kernel_h", "kernel_w", "stride"),
    "MaxPool2D": ("window", "stride"),
    "Dense": ("out_features",),
}
_PROVENANCE = struct.Struct("<iddIddI")


@dataclass
class Provenance:
    participant_id: int
    noise_multiplier: float
    clip_threshold: float
    minibatch_size: int
    delta: float
    epsilon: float
    epochs: int


@dataclass
class LoadedModel:
    model: nncore.Model
    is_backbone: bool
    provenance: Optional[Provenance]


def encode_architecture(model: nncore.Model) -> bytes:
    out = [struct.pack("<I", len(model.input_shape)), struct.pack(f"<{len(model.input_shape)}I", *model.input_shape),
           struct.pack("<I", len(model.layers))]
    for spec, trainable in zip(model.layers, model.trainable):
        out.append(struct.pack("<BB", _KIND_CODES[spec.kind], int(bool(trainable))))
        names = _KIND_FIELDS.get(spec.kind, ())
        out.append(struct.pack(f"<{len(names)}I", *(getattr(spec, n) for n in names)))
    return b"".join(out)


def decode_architecture(buf: bytes):
    """Returns (input_shape, layers, trainable)."""
    kinds = {code: name for name, code in _KIND_CODES.items()}
    classes = {cls.kind: cls for cls in nncore.LAYER_KINDS}
    try:
        pos = 0
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        input_shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        layers, trainable = [], []
        for _ in range(count):
            code, flag = struct.unpack_from("<BB", buf, pos)
            pos += 2
            if code not in kinds:
                raise FormatError(f"unknown layer kind code {code}")
            names = _KIND_FIELDS.get(kinds[code], ())
            values = struct.unpack_from(f"<{len(names)}I", buf, pos)
            pos += 4 * len(names)
            layers.append(classes[kinds[code]](**dict(zip(names, values))))
            trainable.append(bool(flag))
    except struct.error as exc:
        raise FormatError(f"architecture descriptor truncated: {exc}") from None
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} stray bytes after architecture descriptor")
    return tuple(input_shape), layers, trainable


def _encode_provenance(prov: Optional[Provenance]) -> bytes:
    if prov is None:
        return b""
    return _PROVENANCE.pack(prov.participant_id, prov.noise_multiplier, prov.clip_threshold,
                            prov.minibatch_size, prov.delta, prov.epsilon, prov.epochs)


def provenance_of(private_model) -> Provenance:
    """Provenance record for a federation ``PrivateModel``."""
    dp = private_model.dp
    return Provenance(private_model.participant_id,
                      dp.noise_multiplier if dp else math.nan,
                      dp.clip_threshold if dp else math.nan,
                      dp.minibatch_size if dp else 0,
                      dp.delta if dp else math.nan,
                      private_model.epsilon, private_model.epochs)


def encode_model(model: nncore.Model, *, is_backbone: bool = False, provenance: Provenance = None) -> bytes:
    flat = [p.ravel() for plist in model.params for p in plist]
    payload = np.concatenate(flat) if flat else np.zeros(0)
    if not np.isfinite(payload).all():
        raise NumericError("refusing to serialize non-finite parameters")
    arch = encode_architecture(model)
    prov = _encode_provenance(provenance)
    body = b"".join([
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<I", len(arch)), arch,
        struct.pack("<I", FLAG_BACKBONE if is_backbone else 0),
        struct.pack("<I", len(prov)), prov,
        struct.pack("<Q", payload.size),
        payload.astype("<f8").tobytes(),
    ])
    return body + struct.pack("<I", zlib.crc32(body))


def save_model(model, path, *, is_backbone: bool = None, provenance: Provenance = None) -> int:
    """Write a model (or a federation ``PrivateModel``) and return the byte count."""
    if hasattr(model, "backbone"):
        provenance = provenance if provenance is not None else provenance_of(model)
        is_backbone = True if is_backbone is None else is_backbone
        model = model.backbone
    data = encode_model(model, is_backbone=bool(is_backbone), provenance=provenance)
    Path(path).write_bytes(data)
    return len(data)


def decode_model(data: bytes) -> LoadedModel:
    if len(data) < 4 or data[:4] != MAGIC:
        raise WrongMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 8:
        raise FormatError("file ends inside the header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"format version {version} is not supported (expected {FORMAT_VERSION})")
    if len(data) < 12:
        raise FormatError("file ends inside the header")
    (stored_crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != stored_crc:
        raise ChecksumError("CRC-32 mismatch; file is corrupt")
    try:
        pos = 8
        (alen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        arch = data[pos:pos + alen]
        pos += alen
        (flags,) = struct.unpack_from("<I", data, pos)
        pos += 4
        (plen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        prov_raw = data[pos:pos + plen]
        pos += plen
        (count,) = struct.unpack_from("<Q", data, pos)
        pos += 8
    except struct.error as exc:
        raise FormatError(f"header truncated: {exc}") from None
    input_shape, layers, trainable = decode_architecture(arch)
    provenance = None
    if plen:
        if plen != _PROVENANCE.size:
            raise FormatError(f"provenance block is {plen} bytes, expected {_PROVENANCE.size}")
        provenance = Provenance(*_PROVENANCE.unpack(prov_raw))

    payload_bytes = len(data) - 4 - pos
    shapes = []
    in_shape = input_shape
    try:
        out_shapes = nncore.shape_chain(layers, input_shape)
    except ContractError as exc:
        raise FormatError(f"architecture does not type-check: {exc}") from None
    for spec, out in zip(layers, out_shapes):
        shapes.append(nncore.param_shapes(spec, in_shape))
        in_shape = out
    expected = sum(math.prod(s) for plist in shapes for s in plist)
    actual = payload_bytes // 8
    if count != expected or payload_bytes != 8 * count:
        raise PayloadShapeError(expected, actual if payload_bytes % 8 == 0 else payload_bytes / 8)
    values = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64)
    params, k = [], 0
    for plist in shapes:
        arrays = []
        for s in plist:
            n = math.prod(s)
            arrays.append(values[k:k + n].reshape(s).copy())
            k += n
        params.append(arrays)
    model = nncore.Model(layers, input_shape, params, trainable)
    return LoadedModel(model, bool(flags & FLAG_BACKBONE), provenance)


def load_model(path) -> LoadedModel:
    return decode_model(Path(path).read_bytes())


def header_size(model: nncore.Model, provenance: Provenance = None) -> int:
    """Bytes before the parameter payload."""
    return 4 + 4 + 4 + len(encode_architecture(model)) + 4 + 4 + len(_encode_provenance(provenance)) + 8


# ---------------------------------------------------------------- metrics

METRICS_HEADER = ["nm", "nc", "delta", "epsilon", "initial_acc", "private_avg_acc", "final_acc", "seed",
                  "epochs", "batch"]
CURVES_HEADER = ["participant", "epoch", "train_acc", "test_acc"]


def fmt(x) -> str:
    """Six significant digits; infinities as ``inf``."""
    if x is None:
        return ""
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.6g}"


def metrics_row(report) -> list:
    return [fmt(report.noise_multiplier), fmt(report.clip_threshold), fmt(report.delta), fmt(report.epsilon),
            fmt(report.initial_acc), fmt(report.private_avg_acc), fmt(report.final_acc),
            str(int(report.seed)), str(int(report.epochs)), str(int(report.batch))]


def write_metrics(reports, path, curves_path=None) -> None:
    """One CSV row per report; optional per-epoch curves to ``curves_path``.

    ``reports`` may be a single report, a list, or empty (header only).
    """
    if reports is None:
        reports = []
    elif not isinstance(reports, (list, tuple)):
        reports = [reports]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for report in reports:
            writer.writerow(metrics_row(report))
    if curves_path is not None:
        with open(curves_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CURVES_HEADER)
            for report in reports:
                for participant, epoch, train_acc, test_acc in report.curves:
                    writer.writerow([participant, epoch, fmt(train_acc), fmt(test_acc)])
