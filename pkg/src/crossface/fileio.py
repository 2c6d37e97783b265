"""File formats: FDM1 depth grids, landmark JSON, versioned models, manifests.

All writers emit deterministic bytes (sorted JSON keys, fixed float codec) so
re-running a command on unchanged inputs reproduces files byte for byte.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

import numpy as np

from .core import N_LANDMARKS, CrossfaceError, LandmarkSet

MODEL_FORMAT_VERSION = 1

_FDM1_HEADER = re.compile(rb"^FDM1 (\d+) (\d+)\n")
_FDC1_HEADER = re.compile(rb"^FDC1 (\d+) (\d+) ([A-Za-z0-9_-]+) (-?\d+)\n")


class FormatError(CrossfaceError):
    """Malformed file content."""


class VersionError(FormatError):
    """Model file carries an unsupported format_version."""


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")


# ---------------------------------------------------------------- FDM1 depth

def write_depth_fdm1(path, z) -> None:
    """Write a depth grid: ASCII 'FDM1 <w> <h>' header then row-major
    little-endian float32 millimeters, NaN marking holes."""
    arr = np.asarray(z, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"depth grid must be nonempty 2-D, got {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"FDM1 {w} {h}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_depth_fdm1(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    m = _FDM1_HEADER.match(blob)
    if not m:
        raise FormatError(f"{path}: not an FDM1 file (bad header line)")
    w, h = int(m.group(1)), int(m.group(2))
    body = blob[m.end():]
    if len(body) != 4 * w * h:
        raise FormatError(
            f"{path}: expected {4 * w * h} payload bytes for {w}x{h}, got {len(body)}")
    return np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(h, w)


# ------------------------------------------------------------ landmark JSON

@dataclass(frozen=True)
class LandmarkRecord:
    """One landmark file: annotation plus source-image bookkeeping."""

    landmarks: LandmarkSet
    image: str = ""
    yaw_deg: float = None
    box: tuple = None  # (x0, y0, x1, y1) face box, optional


def write_landmarks(path, rec: LandmarkRecord) -> None:
    pts = []
    for i in range(N_LANDMARKS):
        if rec.landmarks.visible[i]:
            x, y = rec.landmarks.points[i]
            pts.append([float(x), float(y)])
        else:
            pts.append(None)
    doc = {"image": rec.image, "points": pts}
    if rec.yaw_deg is not None:
        doc["yaw_deg"] = float(rec.yaw_deg)
    if rec.box is not None:
        doc["box"] = [float(v) for v in rec.box]
    with open(path, "wb") as fh:
        fh.write(_json_bytes(doc))


def read_landmarks(path) -> LandmarkRecord:
    try:
        with open(path, "rb") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from e
    if not isinstance(doc, dict) or "points" not in doc:
        raise FormatError(f"{path}: missing 'points' field")
    raw = doc["points"]
    if not isinstance(raw, list) or len(raw) != N_LANDMARKS:
        raise FormatError(f"{path}: 'points' must list {N_LANDMARKS} entries")
    pts = np.full((N_LANDMARKS, 2), np.nan)
    vis = np.zeros(N_LANDMARKS, dtype=bool)
    for i, entry in enumerate(raw):
        if entry is None:
            continue
        if (not isinstance(entry, (list, tuple)) or len(entry) != 2
                or not all(isinstance(v, (int, float)) for v in entry)):
            raise FormatError(f"{path}: points[{i}] must be [x, y] or null")
        pts[i] = entry
        vis[i] = True
    yaw = doc.get("yaw_deg")
    if yaw is not None and not isinstance(yaw, (int, float)):
        raise FormatError(f"{path}: yaw_deg must be a number")
    box = doc.get("box")
    if box is not None:
        if not isinstance(box, list) or len(box) != 4:
            raise FormatError(f"{path}: box must be [x0, y0, x1, y1]")
        box = tuple(float(v) for v in box)
    return LandmarkRecord(LandmarkSet(pts, vis), str(doc.get("image", "")),
                          None if yaw is None else float(yaw), box)


# ---------------------------------------------------------- versioned models

def encode_array(a) -> list:
    return np.asarray(a, dtype=np.float64).tolist()


def decode_array(obj) -> np.ndarray:
    return np.asarray(obj, dtype=np.float64)


def write_model_json(path, kind: str, payload: dict) -> None:
    doc = {"kind": kind, "format_version": MODEL_FORMAT_VERSION}
    doc.update(payload)
    with open(path, "wb") as fh:
        fh.write(_json_bytes(doc))


def read_model_json(path, kind: str) -> dict:
    try:
        with open(path, "rb") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from e
    if not isinstance(doc, dict) or doc.get("kind") != kind:
        raise FormatError(f"{path}: expected a '{kind}' model file")
    ver = doc.get("format_version")
    if ver != MODEL_FORMAT_VERSION:
        raise VersionError(
            f"{path}: format_version {ver!r} unsupported (need {MODEL_FORMAT_VERSION})")
    return doc


# ------------------------------------------------------- JSON-lines manifest

def write_manifest(path, records) -> None:
    with open(path, "wb") as fh:
        for rec in records:
            fh.write((json.dumps(rec, sort_keys=True) + "\n").encode("utf-8"))


def read_manifest(path) -> list:
    out = []
    with open(path, "rb") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({e.msg})") from e
            if not isinstance(rec, dict):
                raise FormatError(f"{path}:{lineno}: record must be an object")
            out.append(rec)
    return out


# ------------------------------------------------------ dictionary cache

def write_dictionary_cache(path, matrix, feature_kind: str, pose_deg: int,
                           labels) -> None:
    """Binary dictionary cache: 'FDC1 <rows> <cols> <feature> <pose>' header,
    column-major little-endian float32 matrix, JSON label table to EOF."""
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"matrix must be nonempty 2-D, got {a.shape}")
    labels = [int(v) for v in labels]
    if len(labels) != a.shape[1]:
        raise ValueError("one label per matrix column required")
    if not re.fullmatch(r"[A-Za-z0-9_-]+", feature_kind):
        raise ValueError(f"bad feature kind token {feature_kind!r}")
    with open(path, "wb") as fh:
        fh.write(f"FDC1 {a.shape[0]} {a.shape[1]} {feature_kind} {int(pose_deg)}\n"
                 .encode("ascii"))
        fh.write(np.asfortranarray(a, dtype="<f4").tobytes(order="F"))
        fh.write(_json_bytes({"labels": labels}))


def read_dictionary_cache(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    m = _FDC1_HEADER.match(blob)
    if not m:
        raise FormatError(f"{path}: not an FDC1 dictionary cache (bad header)")
    rows, cols = int(m.group(1)), int(m.group(2))
    feature_kind = m.group(3).decode("ascii")
    pose_deg = int(m.group(4))
    nbytes = 4 * rows * cols
    body = blob[m.end():m.end() + nbytes]
    if len(body) != nbytes:
        raise FormatError(f"{path}: truncated matrix payload")
    a = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(
        (rows, cols), order="F")
    try:
        tail = json.loads(blob[m.end() + nbytes:])
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid label table ({e.msg})") from e
    labels = tail.get("labels")
    if not isinstance(labels, list) or len(labels) != cols:
        raise FormatError(f"{path}: label table must list {cols} labels")
    return a, feature_kind, pose_deg, [int(v) for v in labels]
