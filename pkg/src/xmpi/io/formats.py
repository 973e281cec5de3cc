"""Binary frame-stack and volume files, written atomically.

Frame stack: ``<name>.frames`` holds a 32-byte header followed by
little-endian frame planes, and ``<name>.frames.json`` holds the sidecar
(timestamps, shot records, pixel pitch, beamlet id, metadata and the payload
hash). Header layout, all little-endian::

    0   4s   magic b"XFRM"
    4   u32  version (1)
    8   u32  dtype code (1 = uint16 counts, 2 = float32 processed frames)
    12  u32  frame count
    16  u32  rows
    20  u32  cols
    24  u64  payload bytes

Volume: ``.xvol`` with a 96-byte header and float32 voxels, x fastest::

    0   4s   magic b"XVOL"
    4   u32  version (1)
    8   4u32 dims (nx, ny, nz, nt)
    24  f64  voxel pitch (µm)
    32  f64  frame period (ns, 0 for a single time point)
    40  f64  value scale (µ = stored value * scale, 1/µm)
    48  3f64 origin of voxel (0, 0, 0) as (x, y, z) µm
    72  f64  first time point (ns)
    80  16x  reserved (zero)
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from ..forward import FrameStack, ShotRecord
from ..phantom import ScalarField4D

FRAME_MAGIC = b"XFRM"
VOLUME_MAGIC = b"XVOL"
VERSION = 1
_FRAME_HDR = struct.Struct("<4sIIIIIQ")
_VOL_HDR = struct.Struct("<4sI4Iddd3dd16x")
_DTYPES = {1: np.dtype("<u2"), 2: np.dtype("<f4")}


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte position where reading failed."""

    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write(path, data: bytes | str):
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def to_json(obj) -> str:
    return json.dumps(obj, default=_json_default, sort_keys=True, indent=1)


# -- frame stacks ----------------------------------------------------------------


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def store_framestack(path, stack: FrameStack):
    """Persist ``stack``. Integer frames must fit in uint16; float frames are stored as float32."""
    frames = np.asarray(stack.frames)
    if np.issubdtype(frames.dtype, np.integer) or frames.dtype == bool:
        if frames.size and (frames.min() < 0 or frames.max() > 0xFFFF):
            raise ValueError("integer frames must lie in the uint16 range")
        code = 1
    elif frames.dtype == np.float32:
        code = 2
    else:
        raise ValueError(f"frames must be uint16-compatible integers or float32, got {frames.dtype}")
    payload = np.ascontiguousarray(frames, dtype=_DTYPES[code]).tobytes()
    n, h, w = frames.shape
    header = _FRAME_HDR.pack(FRAME_MAGIC, VERSION, code, n, h, w, len(payload))
    side = {
        "version": VERSION,
        "frame_count": n,
        "shape": [h, w],
        "source_dtype": frames.dtype.str,
        "timestamps": [float(t) for t in stack.timestamps],
        "shot_records": [s.to_dict() for s in stack.shot_records],
        "beamlet_id": int(stack.beamlet_id),
        "pixel_pitch": float(stack.pixel_pitch),
        "metadata": stack.metadata,
        "payload_sha256": sha256_bytes(payload),
    }
    atomic_write(path, header + payload)
    atomic_write(sidecar_path(path), to_json(side))


def read_frame_header(path) -> dict:
    path = Path(path)
    with open(path, "rb") as f:
        raw = f.read(_FRAME_HDR.size)
    return _parse_frame_header(path, raw)


def _parse_frame_header(path, raw: bytes) -> dict:
    if len(raw) < _FRAME_HDR.size:
        raise FormatError(path, len(raw), f"header truncated (need {_FRAME_HDR.size} bytes)")
    magic, version, code, n, h, w, nbytes = _FRAME_HDR.unpack(raw[:_FRAME_HDR.size])
    if magic != FRAME_MAGIC:
        raise FormatError(path, 0, f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(path, 4, f"unsupported version {version}")
    if code not in _DTYPES:
        raise FormatError(path, 8, f"unknown dtype code {code}")
    if nbytes != n * h * w * _DTYPES[code].itemsize:
        raise FormatError(path, 24, f"payload size {nbytes} does not match {n}×{h}×{w} frames")
    return {"dtype": _DTYPES[code], "frame_count": n, "rows": h, "cols": w, "payload_bytes": nbytes}


def load_framestack(path) -> FrameStack:
    """Read a stack written by :func:`store_framestack`; any inconsistency raises :class:`FormatError`."""
    path = Path(path)
    raw = path.read_bytes()
    hdr = _parse_frame_header(path, raw)
    start = _FRAME_HDR.size
    end = start + hdr["payload_bytes"]
    if len(raw) < end:
        raise FormatError(path, len(raw), f"payload truncated: expected {end} bytes in total")
    if len(raw) > end:
        raise FormatError(path, end, f"{len(raw) - end} trailing bytes after the payload")
    payload = raw[start:end]
    sp = sidecar_path(path)
    try:
        side = json.loads(sp.read_text())
    except FileNotFoundError:
        raise FormatError(sp, 0, "sidecar missing") from None
    except json.JSONDecodeError as e:
        raise FormatError(sp, e.pos, f"sidecar is not valid JSON ({e.msg})") from None
    if side.get("payload_sha256") != sha256_bytes(payload):
        raise FormatError(path, start, "payload hash does not match the sidecar")
    n = hdr["frame_count"]
    if side.get("frame_count") != n or len(side.get("timestamps", ())) != n:
        raise FormatError(sp, 0, "sidecar frame count does not match the header")
    frames = np.frombuffer(payload, dtype=hdr["dtype"]).reshape(n, hdr["rows"], hdr["cols"])
    frames = frames.astype(np.dtype(side.get("source_dtype", hdr["dtype"].str)))
    return FrameStack(
        frames,
        np.array(side["timestamps"], float),
        [ShotRecord.from_dict(d) for d in side["shot_records"]],
        side["beamlet_id"],
        side["pixel_pitch"],
        side["metadata"],
    )


# -- volumes ----------------------------------------------------------------------


def store_volume(path, volume: ScalarField4D, value_scale: float = 1.0):
    """Write a gridded field as float32 ``stored = µ / value_scale``."""
    if not volume.is_gridded:
        raise ValueError("only gridded fields can be stored")
    if not value_scale > 0:
        raise ValueError("value_scale must be > 0")
    nt, nz, ny, nx = volume.data.shape
    period = volume.frame_period or 0.0
    header = _VOL_HDR.pack(VOLUME_MAGIC, VERSION, nx, ny, nz, nt, float(volume.voxel_pitch), float(period),
                           float(value_scale), *map(float, volume.origin), float(volume.times[0]))
    data = volume.data if value_scale == 1.0 else volume.data / value_scale
    atomic_write(path, header + np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_volume(path) -> ScalarField4D:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _VOL_HDR.size:
        raise FormatError(path, len(raw), f"header truncated (need {_VOL_HDR.size} bytes)")
    magic, version, nx, ny, nz, nt, pitch, period, scale, ox, oy, oz, t0 = _VOL_HDR.unpack(raw[:_VOL_HDR.size])
    if magic != VOLUME_MAGIC:
        raise FormatError(path, 0, f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(path, 4, f"unsupported version {version}")
    need = nx * ny * nz * nt * 4
    have = len(raw) - _VOL_HDR.size
    if have != need:
        off = len(raw) if have < need else _VOL_HDR.size + need
        raise FormatError(path, off, f"payload is {have} bytes, header dims need {need}")
    data = np.frombuffer(raw, dtype="<f4", offset=_VOL_HDR.size).reshape(nt, nz, ny, nx).astype(np.float32)
    if scale != 1.0:
        data = (data * scale).astype(np.float32)
    times = t0 + np.arange(nt) * period
    return ScalarField4D(data=data, voxel_pitch=pitch, times=times, origin=np.array([ox, oy, oz]),
                         metadata={"value_scale": scale})
