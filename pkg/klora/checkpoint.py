"""
Binary adapter checkpoints.

Layout, all integers unsigned little-endian::

    header   8s  magic b"KLORAv01"
             B   kind code (1 LoRA, 2 KronA, 3 Kron-LoRA)
             7I  d_A1, d_A2, d_B1, d_B2, r, d_in, d_out
             2d  alpha, dropout_p
             I   tensor count
    tensor   I   name length, then the UTF-8 name
             2I  rows, cols
             rows*cols little-endian float64, row-major

Tensors follow ``trainable_parameters`` order. See docs/checkpoint_detail.md
for an annotated example.
"""

from __future__ import annotations

import array
import io
import logging
import math
import os
import struct as _struct
import sys
import typing

from . import (
    CheckpointCorruptionError,
    CheckpointFormatError,
    KronLoRAException,
    PlanningError,
    ShapeError,
)
from .adapters import Adapter, build_adapter, parameter_shapes, trainable_parameters
from .linalg import DenseMatrix
from .planner import AdapterKind, AdapterPlan, is_trivial_split, param_count

logger = logging.getLogger(__name__)

MAGIC = b"KLORAv01"
HEADER = _struct.Struct("<8sB7I2dI")
NAME_LENGTH = _struct.Struct("<I")
TENSOR_SHAPE = _struct.Struct("<2I")


def checkpoint_size(plan: AdapterPlan) -> int:
    """Exact byte size of a checkpoint of ``plan``, without writing one."""
    overhead = sum(
        NAME_LENGTH.size + len(name.encode("utf-8")) + TENSOR_SHAPE.size
        for name, _shape in parameter_shapes(plan)
    )
    return HEADER.size + overhead + 8 * param_count(plan)


def _le_bytes(matrix):
    data = array.array("d", matrix.data)
    if sys.byteorder == "big":
        data.byteswap()
    return data.tobytes()


def dumps(adapter: Adapter) -> bytes:
    """Serialize an adapter to checkpoint bytes."""
    plan = adapter.plan
    params = trainable_parameters(adapter)
    chunks = [
        HEADER.pack(
            MAGIC,
            plan.kind.value,
            plan.d_A1,
            plan.d_A2,
            plan.d_B1,
            plan.d_B2,
            plan.r,
            plan.d_in,
            plan.d_out,
            plan.alpha,
            plan.dropout_p,
            len(params),
        )
    ]
    for name, matrix in params:
        encoded = name.encode("utf-8")
        chunks.append(NAME_LENGTH.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(TENSOR_SHAPE.pack(matrix.rows, matrix.cols))
        chunks.append(_le_bytes(matrix))
    return b"".join(chunks)


def dump(adapter: Adapter, dest_file: typing.BinaryIO) -> int:
    """Write checkpoint bytes to an open binary file; returns the byte count."""
    data = dumps(adapter)
    dest_file.write(data)
    return len(data)


def save(adapter: Adapter, path: str | os.PathLike | typing.BinaryIO) -> int:
    """
    Write ``adapter`` to ``path``, a filesystem path or writable binary file.

    Returns:
        int: number of bytes written
    """
    if hasattr(path, "write"):
        return dump(adapter, path)
    try:
        with open(path, "wb") as file:
            count = dump(adapter, file)
    except OSError as exc:
        raise KronLoRAException("cannot write checkpoint %s: %s" % (path, exc)) from exc
    logger.info("wrote %d-byte %s checkpoint to %s", count, adapter.plan.kind.name, path)
    return count


def _take(stream, n, what):
    chunk = stream.read(n)
    if len(chunk) != n:
        raise CheckpointCorruptionError(
            "truncated checkpoint: %s needs %d bytes, %d left" % (what, n, len(chunk))
        )
    return chunk


def _read_plan(header):
    (_magic, code, d_A1, d_A2, d_B1, d_B2, r, d_in, d_out,
     alpha, dropout_p, count) = HEADER.unpack(header)
    try:
        kind = AdapterKind(code)
    except ValueError:
        raise CheckpointFormatError("unknown adapter kind code %d" % code) from None
    if not (math.isfinite(alpha) and 0.0 <= dropout_p < 1.0):
        raise CheckpointCorruptionError(
            "header has alpha=%r dropout_p=%r" % (alpha, dropout_p)
        )
    prime_fallback = kind is AdapterKind.KRONA and (
        is_trivial_split(d_in, d_A1) or is_trivial_split(d_out, d_A2)
    )
    try:
        plan = AdapterPlan(
            kind=kind,
            d_in=d_in,
            d_out=d_out,
            d_A1=d_A1,
            d_A2=d_A2,
            d_B1=d_B1,
            d_B2=d_B2,
            r=r,
            alpha=alpha,
            dropout_p=dropout_p,
            prime_fallback=prime_fallback,
        )
    except PlanningError as exc:
        raise CheckpointCorruptionError("inconsistent plan in header: %s" % exc) from None
    return plan, count


def loads(data: bytes) -> Adapter:
    """
    Rebuild an adapter from checkpoint bytes.

    Raises:
        CheckpointFormatError: wrong magic or unknown adapter kind
        CheckpointCorruptionError: inconsistent shapes, truncation or trailing bytes
    """
    data = bytes(data)
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(
            "bad magic %r, expected %r" % (data[: len(MAGIC)], MAGIC)
        )
    stream = io.BytesIO(data)
    plan, count = _read_plan(_take(stream, HEADER.size, "header"))

    expected = parameter_shapes(plan)
    if count != len(expected):
        raise CheckpointCorruptionError(
            "%s checkpoint declares %d tensors, expected %d"
            % (plan.kind.name, count, len(expected))
        )
    tensors = {}
    for name, shape in expected:
        (length,) = NAME_LENGTH.unpack(_take(stream, NAME_LENGTH.size, "name length"))
        found = _take(stream, length, "tensor name").decode("utf-8", "replace")
        rows, cols = TENSOR_SHAPE.unpack(_take(stream, TENSOR_SHAPE.size, "tensor shape"))
        if found != name or (rows, cols) != shape:
            raise CheckpointCorruptionError(
                "tensor %r %s does not match plan tensor %r %s"
                % (found, (rows, cols), name, shape)
            )
        payload = array.array("d")
        payload.frombytes(_take(stream, 8 * rows * cols, "payload of %s" % name))
        if sys.byteorder == "big":
            payload.byteswap()
        tensors[name] = DenseMatrix(rows, cols, payload)

    trailing = len(data) - stream.tell()
    if trailing:
        raise CheckpointCorruptionError("%d trailing bytes after last tensor" % trailing)
    return build_adapter(plan, tensors)


def load(path: str | os.PathLike | typing.BinaryIO) -> Adapter:
    """Read an adapter from a filesystem path or readable binary file."""
    if hasattr(path, "read"):
        return loads(path.read())
    try:
        with open(path, "rb") as file:
            data = file.read()
    except OSError as exc:
        raise KronLoRAException("cannot read checkpoint %s: %s" % (path, exc)) from exc
    return loads(data)


def restore_into(adapter: Adapter, source: Adapter | bytes) -> Adapter:
    """Copy tensors from ``source`` (an adapter or checkpoint bytes) into ``adapter``."""
    if isinstance(source, (bytes, bytearray, memoryview)):
        source = loads(source)
    if source.plan.kind is not adapter.plan.kind or parameter_shapes(
        source.plan
    ) != parameter_shapes(adapter.plan):
        raise ShapeError(
            "cannot restore a %s checkpoint into a %s adapter"
            % (source.plan, adapter.plan)
        )
    for (_name, target), (_, values) in zip(
        trainable_parameters(adapter), trainable_parameters(source)
    ):
        target.assign(values)
    return adapter


def checkpoint_path(directory: str | os.PathLike, label: str) -> str:
    return os.path.join(directory, "%s.klora" % label)
