"""Binary containers, network checkpoints and CSV output.

Container layout (all little-endian)::

    magic    4 bytes  b"GFDC"
    version  u16
    kind     u16      payload kind (see KIND_*)
    count    u64      rows
    dim      u64      columns
    n_aux    u16
    aux      n_aux x u32   kind-specific integers (e.g. column split)
    payload  count*dim float64
    crc32    u32      over every preceding byte

Checkpoint layout::

    magic    5 bytes  b"GFNC1"
    hlen     u32
    header   hlen bytes of UTF-8 JSON (sorted keys): kind, spec, version,
             dtype ("<f8" or "<f4"), n_params, checksum (crc32 of payload)
    payload  n_params floats
    crc32    u32      over every preceding byte
"""

from __future__ import annotations

import csv
import json
import struct
import zlib
from pathlib import Path

import numpy as np

CONTAINER_MAGIC = b"GFDC"
CONTAINER_VERSION = 1
CHECKPOINT_MAGIC = b"GFNC1"
CHECKPOINT_VERSION = 1

KIND_RAW = 0
KIND_PAIRED_DATASET = 1
KIND_TRAJECTORY = 2

_HEAD = struct.Struct("<4sHHQQH")


class FormatError(ValueError):
    pass


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


def _seal(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def _unseal(blob: bytes, what: str) -> bytes:
    if len(blob) < 4:
        raise TruncatedError(f"{what}: file too short")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError(f"{what}: checksum mismatch")
    return body


def encode_container(array, kind: int = KIND_RAW, aux=()) -> bytes:
    a = np.asarray(array, dtype="<f8")
    if a.ndim == 1:
        a = a.reshape(-1, 1) if a.size else a.reshape(0, 0)
    if a.ndim != 2:
        raise ValueError("containers hold 2-D arrays")
    aux = [int(v) for v in aux]
    head = _HEAD.pack(CONTAINER_MAGIC, CONTAINER_VERSION, int(kind), a.shape[0], a.shape[1], len(aux))
    head += struct.pack(f"<{len(aux)}I", *aux)
    return _seal(head + np.ascontiguousarray(a).tobytes())


def decode_container(blob: bytes):
    if len(blob) < _HEAD.size + 4:
        raise TruncatedError("container: file too short")
    if blob[:4] != CONTAINER_MAGIC:
        raise FormatError("container: bad magic")
    body = _unseal(blob, "container")
    magic, version, kind, count, dim, n_aux = _HEAD.unpack_from(body)
    if version != CONTAINER_VERSION:
        raise VersionError(f"container: unsupported version {version}")
    off = _HEAD.size
    aux = struct.unpack_from(f"<{n_aux}I", body, off)
    off += 4 * n_aux
    payload = body[off:]
    if len(payload) != 8 * count * dim:
        raise TruncatedError(f"container: payload has {len(payload)} bytes, header says {8 * count * dim}")
    arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(count, dim)
    return arr, kind, tuple(aux)


def write_container(path, array, kind: int = KIND_RAW, aux=()) -> None:
    Path(path).write_bytes(encode_container(array, kind, aux))


def read_container(path):
    """Returns ``(array, kind, aux)``; raises :class:`FormatError` subclasses on damage."""
    return decode_container(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def encode_checkpoint(net, dtype: str = "<f8") -> bytes:
    if dtype not in ("<f8", "<f4"):
        raise ValueError("checkpoint dtype must be '<f8' or '<f4'")
    payload = np.asarray(net.params, dtype=dtype).tobytes()
    header = {
        "checksum": zlib.crc32(payload) & 0xFFFFFFFF,
        "dtype": dtype,
        "kind": net.kind,
        "n_params": int(net.params.size),
        "spec": net.spec.to_dict(),
        "version": CHECKPOINT_VERSION,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _seal(CHECKPOINT_MAGIC + struct.pack("<I", len(hb)) + hb + payload)


def decode_checkpoint(blob: bytes):
    from .nets import CorrectorNet, MlpSpec, VelocityNet

    if len(blob) < len(CHECKPOINT_MAGIC) + 8:
        raise TruncatedError("checkpoint: file too short")
    if blob[:5] != CHECKPOINT_MAGIC:
        raise FormatError("checkpoint: bad magic")
    body = _unseal(blob, "checkpoint")
    (hlen,) = struct.unpack_from("<I", body, 5)
    try:
        header = json.loads(body[9 : 9 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint: unreadable header ({exc})") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint: unsupported version {header.get('version')}")
    payload = body[9 + hlen :]
    if zlib.crc32(payload) & 0xFFFFFFFF != header["checksum"]:
        raise ChecksumError("checkpoint: payload checksum mismatch")
    dtype = header["dtype"]
    n = int(header["n_params"])
    if len(payload) != n * np.dtype(dtype).itemsize:
        raise TruncatedError("checkpoint: payload size does not match header")
    params = np.frombuffer(payload, dtype=dtype).astype(np.float64)
    spec = MlpSpec.from_dict(header["spec"])
    cls = {"corrector": CorrectorNet, "velocity": VelocityNet}.get(header["kind"])
    if cls is None:
        raise FormatError(f"checkpoint: unknown network kind {header['kind']!r}")
    return cls(spec, params)


def save_checkpoint(net, path, dtype: str = "<f8") -> None:
    Path(path).write_bytes(encode_checkpoint(net, dtype))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return f"{float(v):.17g}"


def write_csv(path, header, rows) -> None:
    """UTF-8, comma separated, header row, floats at 17 significant digits."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header))
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [[float(v) for v in row] for row in r]
