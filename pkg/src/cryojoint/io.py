"""File formats: MRC (mode 2) volumes and stacks, pose tables, JSON metadata.

Volumes are written in C order with ``nx`` the length of the last axis, so
``read_mrc(write_mrc(a))`` returns an array of the same shape.
"""

from __future__ import annotations

import csv
import json
import math
import os
import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import canonicalize

HEADER_BYTES = 1024
MODE_FLOAT32 = 2
_MACHST_LE = bytes([0x44, 0x44, 0x00, 0x00])
_MACHST_BE = bytes([0x11, 0x11, 0x00, 0x00])


class MrcError(ValueError):
    pass


class PoseTableError(ValueError):
    pass


@dataclass
class MrcFile:
    data: np.ndarray
    voxel_size: float
    header: bytes  # the raw 1024-byte header as read
    extended: bytes = b""


def _header_dtype(endian: str) -> np.dtype:
    i4, f4 = endian + "i4", endian + "f4"
    return np.dtype(
        [
            ("nx", i4), ("ny", i4), ("nz", i4), ("mode", i4),
            ("nxstart", i4), ("nystart", i4), ("nzstart", i4),
            ("mx", i4), ("my", i4), ("mz", i4),
            ("cella", f4, 3), ("cellb", f4, 3),
            ("mapc", i4), ("mapr", i4), ("maps", i4),
            ("dmin", f4), ("dmax", f4), ("dmean", f4),
            ("ispg", i4), ("nsymbt", i4),
            ("extra1", "V8"), ("exttyp", "S4"), ("nversion", i4), ("extra2", "V84"),
            ("origin", f4, 3), ("map", "S4"), ("machst", "V4"), ("rms", f4),
            ("nlabl", i4), ("label", "S80", 10),
        ]
    )


def _endian(raw: bytes) -> str:
    machst = raw[212:216]
    if machst[:1] == _MACHST_BE[:1]:
        return ">"
    return "<"


def read_mrc(path, kind: str | None = None) -> MrcFile:
    """Read a mode-2 MRC file.

    ``kind="volume"`` requires ``nx = ny = nz``; ``kind="stack"`` requires
    ``nx = ny`` and reads ``nz`` images.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_BYTES:
        raise MrcError(f"{path}: truncated header, file ends at byte {len(raw)} of {HEADER_BYTES}")
    end = _endian(raw)
    h = np.frombuffer(raw[:HEADER_BYTES], dtype=_header_dtype(end), count=1)[0]
    mode = int(h["mode"])
    if mode != MODE_FLOAT32:
        raise MrcError(f"{path}: unsupported MRC mode {mode}; only mode 2 (float32) is supported")
    nx, ny, nz = int(h["nx"]), int(h["ny"]), int(h["nz"])
    if min(nx, ny, nz) < 1:
        raise MrcError(f"{path}: invalid dimensions {(nx, ny, nz)}")
    if kind == "volume" and not (nx == ny == nz):
        raise MrcError(f"{path}: a volume needs nx = ny = nz, got {(nx, ny, nz)}")
    if kind == "stack" and nx != ny:
        raise MrcError(f"{path}: stack images must be square, got nx={nx}, ny={ny}")
    ext = int(h["nsymbt"])
    start = HEADER_BYTES + ext
    count = nx * ny * nz
    need = start + 4 * count
    if len(raw) < need:
        raise MrcError(f"{path}: truncated data, file ends at byte {len(raw)} but data needs {need} bytes")
    data = np.frombuffer(raw, dtype=end + "f4", count=count, offset=start).reshape(nz, ny, nx)
    data = data.astype("<f4") if end == ">" else data.copy()
    cell = float(h["cella"][0])
    voxel = cell / nx if cell > 0 else 1.0
    return MrcFile(data, voxel, raw[:HEADER_BYTES], raw[HEADER_BYTES:start])


def write_mrc(path, data: np.ndarray, voxel_size: float = 1.0, header: bytes | None = None, label: str = "cryojoint", stack: bool = False, extended: bytes = b"") -> None:
    """Write ``data`` (3D) as little-endian mode 2.

    If ``header`` (from :func:`read_mrc`) is given, every word not derived from
    the data is kept.  Writes are byte-for-byte deterministic.
    """
    arr = np.asarray(data)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise MrcError(f"expected a 2D or 3D array, got {arr.ndim} dimensions")
    if not np.all(np.isfinite(arr)):
        raise MrcError("refusing to write non-finite values")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    nz, ny, nx = arr.shape
    dt = _header_dtype("<")
    if header is not None:
        if len(header) != HEADER_BYTES:
            raise MrcError("header must be exactly 1024 bytes")
        src = np.frombuffer(header, dtype=_header_dtype(_endian(header)), count=1)[0]
        h = np.zeros(1, dtype=dt)[0]
        for name in dt.names:
            h[name] = src[name]
    else:
        h = np.zeros(1, dtype=dt)[0]
        h["cellb"] = (90.0, 90.0, 90.0)
        h["mapc"], h["mapr"], h["maps"] = 1, 2, 3
        h["exttyp"] = b"\x00" * 4
        h["nversion"] = 20140
        h["nlabl"] = 1
        lab = np.zeros(10, dtype="S80")
        lab[0] = label.encode("ascii")[:80]
        h["label"] = lab
    h["nx"], h["ny"], h["nz"] = nx, ny, nz
    h["mode"] = MODE_FLOAT32
    h["mx"], h["my"], h["mz"] = nx, ny, nz
    h["cella"] = (nx * voxel_size, ny * voxel_size, nz * voxel_size)
    h["ispg"] = 0 if stack else 1
    h["nsymbt"] = len(extended)
    if header is None:
        # origin so that index n // 2 sits at the physical origin
        h["origin"] = (-(nx // 2) * voxel_size, -(ny // 2) * voxel_size, 0.0 if stack else -(nz // 2) * voxel_size)
    h["map"] = b"MAP "
    h["machst"] = np.frombuffer(_MACHST_LE, dtype="V4")[0]
    a64 = arr.astype(np.float64)
    h["dmin"], h["dmax"], h["dmean"] = a64.min(), a64.max(), a64.mean()
    h["rms"] = a64.std()
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(h.tobytes())
        fh.write(extended)
        fh.write(arr.tobytes())
    os.replace(tmp, path)


def read_volume(path) -> tuple[np.ndarray, float]:
    f = read_mrc(path, kind="volume")
    return f.data.astype(np.float64), f.voxel_size


def write_volume(path, volume: np.ndarray, voxel_size: float = 1.0, label: str = "cryojoint volume") -> None:
    write_mrc(path, volume, voxel_size, label=label)


# ----------------------------------------------------------------------------- pose tables

POSE_COLUMNS = ["index", "theta1_rad", "theta2_rad", "theta3_rad", "t1_px", "t2_px"]
TRUE_COLUMNS = [c + "_true" for c in POSE_COLUMNS[1:]]


@dataclass
class PoseTable:
    poses: np.ndarray  # (P, 5)
    true_poses: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.poses)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_pose_table(path, poses: np.ndarray, true_poses: np.ndarray | None = None) -> None:
    poses = np.asarray(poses, dtype=float).reshape(-1, 5)
    header = list(POSE_COLUMNS)
    if true_poses is not None:
        true_poses = np.asarray(true_poses, dtype=float).reshape(-1, 5)
        if len(true_poses) != len(poses):
            raise PoseTableError(f"{len(poses)} poses but {len(true_poses)} truth rows")
        header += TRUE_COLUMNS
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for p, row in enumerate(poses):
            out = [str(p)] + [_fmt(v) for v in row]
            if true_poses is not None:
                out += [_fmt(v) for v in true_poses[p]]
            w.writerow(out)


def _check_angles(row: int, vals: np.ndarray, where: str) -> np.ndarray:
    t1, t2, t3 = vals[:3]
    canon = canonicalize(t1, t2, t3)
    in_range = 0 <= t1 < 2 * math.pi and 0 <= t2 <= math.pi and 0 <= t3 < 2 * math.pi
    if not in_range:
        warnings.warn(f"row {row}: {where} angles {tuple(vals[:3])} outside the canonical ranges; canonicalized", RuntimeWarning, stacklevel=3)
    return np.array([*canon, vals[3], vals[4]])


def read_pose_table(path) -> PoseTable:
    """Parse a pose table; rows may come in any order but indices must be ``0..P-1``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PoseTableError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if header[: len(POSE_COLUMNS)] != POSE_COLUMNS:
            missing = [c for c in POSE_COLUMNS if c not in header]
            detail = f"missing column(s) {missing}" if missing else f"columns out of order: {header}"
            raise PoseTableError(f"{path}: header must start with {POSE_COLUMNS}; {detail}")
        extra = header[len(POSE_COLUMNS):]
        has_true = bool(extra)
        if has_true and extra != TRUE_COLUMNS:
            raise PoseTableError(f"{path}: truth columns must be exactly {TRUE_COLUMNS}, got {extra}")
        width = len(header)
        rows = {}
        truth = {}
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != width:
                raise PoseTableError(f"{path}: row {lineno}: expected {width} fields, got {len(rec)}")
            try:
                idx = int(rec[0])
                vals = np.array([float(v) for v in rec[1:]])
            except ValueError as exc:
                raise PoseTableError(f"{path}: row {lineno}: {exc}") from None
            if not np.all(np.isfinite(vals)):
                raise PoseTableError(f"{path}: row {lineno}: non-finite value")
            if idx in rows:
                raise PoseTableError(f"{path}: row {lineno}: duplicate index {idx}")
            rows[idx] = _check_angles(lineno, vals[:5], "pose")
            if has_true:
                truth[idx] = _check_angles(lineno, vals[5:10], "truth")
    P = len(rows)
    if sorted(rows) != list(range(P)):
        raise PoseTableError(f"{path}: indices must be dense and 0-based")
    poses = np.array([rows[i] for i in range(P)]).reshape(P, 5)
    true = np.array([truth[i] for i in range(P)]).reshape(P, 5) if has_true else None
    return PoseTable(poses, true)


# ----------------------------------------------------------------------------- metadata and stacks


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


STACK_FILES = {"images": "stack.mrc", "poses": "poses.csv", "meta": "stack.json"}


@dataclass
class Stack:
    images: np.ndarray
    poses: np.ndarray
    true_poses: np.ndarray | None
    meta: dict


def write_stack(directory, images: np.ndarray, poses: np.ndarray, meta: dict, true_poses: np.ndarray | None = None) -> None:
    images = np.asarray(images)
    if len(images) != len(poses):
        raise ValueError(f"{len(images)} images but {len(poses)} poses")
    os.makedirs(directory, exist_ok=True)
    write_mrc(os.path.join(directory, STACK_FILES["images"]), images, float(meta.get("pixel_size", 1.0)), label="cryojoint stack", stack=True)
    write_pose_table(os.path.join(directory, STACK_FILES["poses"]), poses, true_poses)
    write_json(os.path.join(directory, STACK_FILES["meta"]), dict(meta, n_images=int(len(images))))


def read_stack(directory, poses_path=None) -> Stack:
    f = read_mrc(os.path.join(directory, STACK_FILES["images"]), kind="stack")
    table = read_pose_table(poses_path or os.path.join(directory, STACK_FILES["poses"]))
    meta_path = os.path.join(directory, STACK_FILES["meta"])
    meta = read_json(meta_path) if os.path.exists(meta_path) else {}
    P = f.data.shape[0]
    if len(table) != P:
        raise ValueError(f"stack holds {P} images but the pose table has {len(table)} rows")
    if "n_images" in meta and meta["n_images"] != P:
        raise ValueError(f"metadata records {meta['n_images']} images, stack holds {P}")
    return Stack(f.data.astype(np.float64), table.poses, table.true_poses, meta)
