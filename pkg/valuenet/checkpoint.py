"""Binary checkpoint for a flat parameter vector.

Layout, little-endian throughout:
    magic  b"JFBV"
    u32    format version
    u32    config-hash length H, then H bytes of ASCII hex (H = 0 when unknown)
    u32    number of widths L, then L x u32 widths
    i64    init seed
    u64    parameter count p, then p x f64 values

Version 1 files lack the config-hash field and still load.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"JFBV"
FORMAT_VERSION = 2
READABLE_VERSIONS = (1, 2)


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Checkpoint:
    widths: list[int]
    seed: int
    theta: np.ndarray
    config_hash: str = ""


def write_checkpoint(path, widths, seed: int, theta, config_hash: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    theta = np.ascontiguousarray(theta, dtype="<f8")
    tag = config_hash.encode("ascii")
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, len(tag)) + tag
    header += struct.pack("<I", len(widths))
    header += struct.pack(f"<{len(widths)}I", *widths)
    header += struct.pack("<qQ", int(seed), theta.size)
    with path.open("wb") as handle:
        handle.write(header)
        handle.write(theta.tobytes())
    return path


def read_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a value-network checkpoint")
    offset = 4
    config_hash = ""
    try:
        (version,) = struct.unpack_from("<I", data, offset)
        offset += 4
        if version not in READABLE_VERSIONS:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        if version >= 2:
            (length,) = struct.unpack_from("<I", data, offset)
            offset += 4
            if offset + length > len(data):
                raise CheckpointError(f"truncated checkpoint header in {path}")
            config_hash = data[offset:offset + length].decode("ascii")
            offset += length
        (count,) = struct.unpack_from("<I", data, offset)
        offset += 4
        widths = list(struct.unpack_from(f"<{count}I", data, offset))
        offset += 4 * count
        seed, size = struct.unpack_from("<qQ", data, offset)
        offset += 16
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"truncated checkpoint header in {path}") from exc
    if len(data) - offset != 8 * size:
        raise CheckpointError(f"{path}: expected {size} parameters, found {(len(data) - offset) // 8}")
    theta = np.frombuffer(data, dtype="<f8", count=size, offset=offset).astype(np.float64)
    return Checkpoint(widths, seed, theta, config_hash)
