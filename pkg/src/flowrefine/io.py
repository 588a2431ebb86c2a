"""File formats: ASCII point clouds (PLY), binary flow fields (.sfl), and
plain-text region labels.

Format errors raise InputFileError with a message naming the offending line
or field; missing files surface as the usual OSError subclasses.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import InputFileError
from .geometry import NormalField, PointCloud, as_flow

SFL_MAGIC = b"SFL1"

_PLY_FLOAT_TYPES = {"float", "float32", "double", "float64"}


def _fmt(values) -> str:
    # repr() keeps the shortest decimal that round-trips the float64 exactly.
    return " ".join(repr(float(v)) for v in values)


def save_ply(path, cloud: PointCloud, normals: NormalField | np.ndarray | None = None) -> None:
    """Write an ASCII PLY file with x y z, optional nx ny nz, optional
    feature_0..feature_{m-1} columns. Values round-trip exactly."""
    pts = cloud.points
    columns = [pts]
    names = ["x", "y", "z"]
    if normals is not None:
        nrm = normals.normals if isinstance(normals, NormalField) else np.asarray(normals, dtype=np.float64)
        if nrm.shape != pts.shape:
            raise ValueError("normals must align with points")
        columns.append(nrm)
        names += ["nx", "ny", "nz"]
    if cloud.features is not None:
        columns.append(cloud.features)
        names += [f"feature_{i}" for i in range(cloud.features.shape[1])]
    data = np.hstack(columns)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("ply\n")
        fh.write("format ascii 1.0\n")
        fh.write(f"element vertex {len(cloud)}\n")
        for name in names:
            fh.write(f"property float {name}\n")
        fh.write("end_header\n")
        for row in data:
            fh.write(_fmt(row) + "\n")


def load_ply(path) -> tuple[PointCloud, NormalField | None]:
    """Read an ASCII PLY written by save_ply (or compatible).

    Returns the cloud (with features if feature_* columns are present) and a
    NormalField when nx/ny/nz columns are present, else None. Loaded normals
    are marked valid everywhere.
    """
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        line = fh.readline().strip()
        if line != "ply":
            raise InputFileError(f"{path}: not a PLY file (missing 'ply' magic)")
        count = None
        names: list[str] = []
        lineno = 1
        while True:
            raw = fh.readline()
            if not raw:
                raise InputFileError(f"{path}: truncated header")
            lineno += 1
            line = raw.strip()
            if not line or line.startswith("comment"):
                continue
            if line == "end_header":
                break
            parts = line.split()
            if parts[0] == "format":
                if parts[1:] != ["ascii", "1.0"]:
                    raise InputFileError(f"{path}: line {lineno}: only 'format ascii 1.0' is supported")
            elif parts[0] == "element":
                if parts[1] != "vertex":
                    raise InputFileError(f"{path}: line {lineno}: unsupported element '{parts[1]}'")
                try:
                    count = int(parts[2])
                except (IndexError, ValueError):
                    raise InputFileError(f"{path}: line {lineno}: bad vertex count") from None
            elif parts[0] == "property":
                if len(parts) != 3 or parts[1] not in _PLY_FLOAT_TYPES:
                    raise InputFileError(f"{path}: line {lineno}: unsupported property '{line}'")
                names.append(parts[2])
            else:
                raise InputFileError(f"{path}: line {lineno}: unexpected header line '{line}'")
        if count is None:
            raise InputFileError(f"{path}: header missing 'element vertex'")
        if names[:3] != ["x", "y", "z"]:
            raise InputFileError(f"{path}: first three properties must be x, y, z")
        rest = names[3:]
        has_normals = rest[:3] == ["nx", "ny", "nz"]
        feature_names = rest[3:] if has_normals else rest
        expected = [f"feature_{i}" for i in range(len(feature_names))]
        if feature_names != expected:
            raise InputFileError(f"{path}: unsupported property layout {rest}")

        rows = np.zeros((count, len(names)), dtype=np.float64)
        for i in range(count):
            raw = fh.readline()
            if not raw:
                raise InputFileError(f"{path}: expected {count} vertex rows, got {i}")
            lineno += 1
            parts = raw.split()
            if len(parts) != len(names):
                raise InputFileError(
                    f"{path}: line {lineno}: expected {len(names)} values, got {len(parts)}")
            try:
                rows[i] = [float(p) for p in parts]
            except ValueError:
                raise InputFileError(f"{path}: line {lineno}: non-numeric value") from None
    if not np.isfinite(rows).all():
        raise InputFileError(f"{path}: non-finite vertex data")
    pts = rows[:, :3]
    col = 3
    normals = None
    if has_normals:
        normals = NormalField(normals=rows[:, 3:6], valid=np.ones(count, dtype=bool))
        col = 6
    features = rows[:, col:] if len(names) > col else None
    try:
        cloud = PointCloud(points=pts, features=features)
    except ValueError as exc:
        raise InputFileError(f"{path}: {exc}") from None
    return cloud, normals


def save_sfl(path, flow) -> None:
    """Write a flow field as 'SFL1' + uint32 little-endian count + n*3
    float32 little-endian values."""
    f = as_flow(flow)
    data = np.ascontiguousarray(f, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(SFL_MAGIC)
        fh.write(struct.pack("<I", f.shape[0]))
        fh.write(data.tobytes())


def load_sfl(path) -> np.ndarray:
    """Read a .sfl flow field; returns (n, 3) float64."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != SFL_MAGIC:
        raise InputFileError(f"{path}: bad magic, expected {SFL_MAGIC!r}")
    if len(blob) < 8:
        raise InputFileError(f"{path}: truncated header")
    (count,) = struct.unpack("<I", blob[4:8])
    body = blob[8:]
    expected = count * 3 * 4
    if len(body) != expected:
        raise InputFileError(
            f"{path}: expected {expected} payload bytes for {count} vectors, got {len(body)}")
    flow = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(count, 3)
    if not np.isfinite(flow).all():
        raise InputFileError(f"{path}: non-finite flow values")
    return flow


def save_labels(path, labels) -> None:
    """Write region labels, one integer per line."""
    lab = np.asarray(labels)
    if lab.ndim != 1:
        raise ValueError("labels must be a 1-d integer array")
    with open(path, "w", encoding="ascii") as fh:
        for v in lab:
            fh.write(f"{int(v)}\n")


def load_labels(path) -> np.ndarray:
    """Read one non-negative integer label per line."""
    out = []
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                value = int(line)
            except ValueError:
                raise InputFileError(f"{path}: line {lineno}: not an integer") from None
            if value < 0:
                raise InputFileError(f"{path}: line {lineno}: negative label")
            out.append(value)
    if not out:
        raise InputFileError(f"{path}: no labels found")
    return np.asarray(out, dtype=np.int64)
