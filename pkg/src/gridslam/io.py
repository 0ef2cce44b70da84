"""File formats: versioned binary container, PLY point clouds, pose
files, and the key=value config format.

Container layout (all little-endian):
    magic   8 bytes  b"GSLAMBIN"
    version u32      currently 1
    count   u32      number of named arrays
    per array:
        name_len u16, name utf-8
        dtype    u8 (0 = float64, 1 = int64, 2 = uint8)
        ndim     u8
        dims     ndim * i64
        data     raw C-order bytes

Pose files are text, one pose per line: 12 numbers, rotation row-major
then translation.
"""

import struct

import numpy as np

from .errors import FormatVersionMismatch, IoError
from .geometry import Pose

MAGIC = b"GSLAMBIN"
VERSION = 1

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8"), 2: np.dtype("u1")}
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.int64): 1,
                np.dtype(np.uint8): 2}


def write_container(path, arrays: dict) -> None:
    """Write named arrays; insertion order is preserved on read."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _DTYPE_CODES:
                arr = arr.astype(np.float64)
            code = _DTYPE_CODES[arr.dtype]
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<BB", code, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            f.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def read_container(path) -> dict:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from exc
    if len(data) < len(MAGIC) + 8 or data[:len(MAGIC)] != MAGIC:
        raise FormatVersionMismatch(f"{path}: bad magic bytes")
    version, count = struct.unpack_from("<II", data, len(MAGIC))
    if version != VERSION:
        raise FormatVersionMismatch(
            f"{path}: version {version}, expected {VERSION}")
    off = len(MAGIC) + 8
    out = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + name_len].decode("utf-8")
            off += name_len
            code, ndim = struct.unpack_from("<BB", data, off)
            off += 2
            dims = struct.unpack_from(f"<{ndim}q", data, off)
            off += 8 * ndim
            dtype = _DTYPES[code]
            n_bytes = int(np.prod(dims)) * dtype.itemsize if ndim else dtype.itemsize
            n_items = int(np.prod(dims)) if ndim else 1
            end = off + n_items * dtype.itemsize
            if end > len(data):
                raise IoError(f"{path}: truncated array {name!r}")
            arr = np.frombuffer(data[off:end], dtype=dtype).reshape(dims)
            out[name] = arr.astype(arr.dtype.newbyteorder("="))
            off = end
    except (struct.error, KeyError) as exc:
        raise IoError(f"{path}: truncated or corrupt container") from exc
    return out


# ---- poses ----

def pose_to_row(pose: Pose) -> np.ndarray:
    return np.concatenate([pose.rotation.reshape(9), pose.translation])


def pose_from_row(row: np.ndarray) -> Pose:
    row = np.asarray(row, float)
    if row.shape != (12,):
        raise IoError(f"pose row must have 12 numbers, got {row.shape}")
    return Pose(row[:9].reshape(3, 3).copy(), row[9:].copy())


def save_poses(path, poses) -> None:
    with open(path, "w") as f:
        for pose in poses:
            row = pose_to_row(pose)
            f.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def load_poses(path) -> list:
    poses = []
    try:
        f = open(path)
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from exc
    with f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = line.split()
            if len(vals) != 12:
                raise IoError(
                    f"{path}:{line_no}: expected 12 numbers, got {len(vals)}")
            poses.append(pose_from_row(np.array([float(v) for v in vals])))
    return poses


# ---- PLY labeled point clouds ----

_PLY_DTYPE = np.dtype([
    ("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
    ("kind", "u1"),
    ("sdf", "<f8"), ("weight", "<f8"),
    ("bound_lo", "<f8"), ("bound_hi", "<f8"),
])

_PLY_HEADER = """ply
format binary_little_endian 1.0
comment labeled depth samples: kind 0 = near-surface, 1 = free-space
element vertex {n}
property double x
property double y
property double z
property uchar kind
property double sdf
property double weight
property double bound_lo
property double bound_hi
end_header
"""


def write_ply(path, pos: np.ndarray, kind: np.ndarray, sdf: np.ndarray,
              weight: np.ndarray, bound_lo: np.ndarray,
              bound_hi: np.ndarray) -> None:
    n = pos.shape[0]
    rec = np.empty(n, dtype=_PLY_DTYPE)
    rec["x"], rec["y"], rec["z"] = pos[:, 0], pos[:, 1], pos[:, 2]
    rec["kind"] = kind
    rec["sdf"] = sdf
    rec["weight"] = weight
    rec["bound_lo"] = bound_lo
    rec["bound_hi"] = bound_hi
    with open(path, "wb") as f:
        f.write(_PLY_HEADER.format(n=n).encode("ascii"))
        f.write(rec.tobytes())


def read_ply(path):
    """Read a labeled cloud; returns (pos, kind, sdf, weight, b_lo, b_hi)."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from exc
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise IoError(f"{path}: not a ply file")
    header = data[:end].decode("ascii", errors="replace")
    n = None
    for line in header.splitlines():
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        if line.startswith("format") and "binary_little_endian" not in line:
            raise IoError(f"{path}: unsupported ply format {line!r}")
    if n is None:
        raise IoError(f"{path}: missing vertex element")
    body = data[end + len(b"end_header\n"):]
    if len(body) < n * _PLY_DTYPE.itemsize:
        raise IoError(f"{path}: truncated ply body")
    rec = np.frombuffer(body[:n * _PLY_DTYPE.itemsize], dtype=_PLY_DTYPE)
    pos = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(float)
    return (pos, rec["kind"].copy(), rec["sdf"].astype(float),
            rec["weight"].astype(float), rec["bound_lo"].astype(float),
            rec["bound_hi"].astype(float))


# ---- key=value config ----

class Config:
    """Flat key=value config; repeated keys accumulate into lists."""

    def __init__(self, entries=None):
        self.entries: dict = dict(entries or {})

    @classmethod
    def load(cls, path) -> "Config":
        cfg = cls()
        try:
            f = open(path)
        except OSError as exc:
            raise IoError(f"{path}: {exc}") from exc
        with f:
            for line_no, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise IoError(f"{path}:{line_no}: expected key = value")
                key, value = line.split("=", 1)
                cfg.add(key.strip(), value.strip())
        return cfg

    def add(self, key: str, value: str) -> None:
        if key in self.entries:
            prev = self.entries[key]
            if isinstance(prev, list):
                prev.append(value)
            else:
                self.entries[key] = [prev, value]
        else:
            self.entries[key] = value

    def set(self, key: str, value) -> None:
        self.entries[key] = str(value)

    def has(self, key: str) -> bool:
        return key in self.entries

    def _one(self, key: str, default):
        if key not in self.entries:
            return None
        v = self.entries[key]
        if isinstance(v, list):
            raise IoError(f"config key {key!r} given multiple times")
        return v

    def require_str(self, key: str) -> str:
        v = self._one(key, None)
        if v is None:
            raise IoError(f"missing config key {key!r}")
        return v

    def get_str(self, key: str, default=None) -> str:
        v = self._one(key, default)
        return default if v is None else v

    def get_float(self, key: str, default=None):
        v = self._one(key, default)
        return default if v is None else float(v)

    def get_int(self, key: str, default=None):
        v = self._one(key, default)
        return default if v is None else int(v)

    def get_bool(self, key: str, default=None):
        v = self._one(key, default)
        if v is None:
            return default
        if v.lower() in ("1", "true", "yes", "on"):
            return True
        if v.lower() in ("0", "false", "no", "off"):
            return False
        raise IoError(f"config key {key!r}: bad boolean {v!r}")

    def get_vec(self, key: str, default=None) -> np.ndarray:
        v = self._one(key, default)
        if v is None:
            return None if default is None else np.asarray(default, float)
        return np.array([float(tok) for tok in v.replace(",", " ").split()])

    def get_list(self, key: str) -> list:
        if key not in self.entries:
            return []
        v = self.entries[key]
        return v if isinstance(v, list) else [v]

    def save(self, path) -> None:
        with open(path, "w") as f:
            for key, v in self.entries.items():
                if isinstance(v, list):
                    for item in v:
                        f.write(f"{key} = {item}\n")
                else:
                    f.write(f"{key} = {v}\n")
