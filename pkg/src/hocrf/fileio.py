"""On-disk formats: CRFU tensors, detection JSON, PGM label maps with JSON
sidecars, PPM color renderings, and evaluation manifests.

Unary tensor files store energies (negative log-potentials), not
probabilities: CNN logits map in as psi^U = -logit.  All formats round-trip
bitwise.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .core import Detection, PixelGrid

TENSOR_MAGIC = b"CRFU"
TENSOR_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
MAX_INSTANCE_LABELS = 65535  # 16-bit PGM, value 0 reserved for background


class FileFormatError(ValueError):
    """Malformed input file; message names the byte offset or JSON path."""


def write_tensor(path, array: np.ndarray):
    """CRFU container: magic, version u32, dtype u8, ndim u8, 2 reserved
    bytes, u64 dims, little-endian row-major payload."""
    arr = np.ascontiguousarray(array)
    if arr.dtype not in _DTYPE_CODES:
        arr = arr.astype(np.float64)
    code = _DTYPE_CODES[arr.dtype]
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<IBBxx", TENSOR_VERSION, code, arr.ndim))
        fh.write(struct.pack("<%dQ" % arr.ndim, *arr.shape))
        fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def read_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FileFormatError("%s: truncated header at byte %d" % (path, len(data)))
    if data[:4] != TENSOR_MAGIC:
        raise FileFormatError("%s: bad magic at byte 0" % path)
    version, code, ndim = struct.unpack("<IBB", data[4:10])
    if version != TENSOR_VERSION:
        raise FileFormatError("%s: unsupported version %d at byte 4" % (path, version))
    if code not in _DTYPES:
        raise FileFormatError("%s: unknown dtype code %d at byte 8" % (path, code))
    if data[10:12] != b"\x00\x00":
        raise FileFormatError("%s: nonzero reserved bytes at byte 10" % path)
    offset = 12 + 8 * ndim
    if len(data) < offset:
        raise FileFormatError("%s: truncated dims at byte %d" % (path, len(data)))
    dims = struct.unpack("<%dQ" % ndim, data[12:offset])
    dtype = _DTYPES[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(data) - offset != expected:
        raise FileFormatError(
            "%s: payload length %d != expected %d at byte %d"
            % (path, len(data) - offset, expected, offset)
        )
    return np.frombuffer(data[offset:], dtype=dtype).reshape(dims).copy()


def write_detections(path, dets: list[Detection], include_y: bool = False,
                     mask_paths: list[str | None] | None = None):
    """JSON array of {label, score, box, mask?, y_marginal?}."""
    rows = []
    for k, det in enumerate(dets):
        row = {
            "label": int(det.class_label),
            "score": float(det.score),
            "box": [int(v) for v in det.box],
        }
        if mask_paths and mask_paths[k]:
            row["mask"] = mask_paths[k]
        if include_y:
            row["y_marginal"] = float(det.y_marginal)
        rows.append(row)
    Path(path).write_text(json.dumps(rows, indent=2) + "\n")


def read_detections(path, grid: PixelGrid, num_classes: int,
                    foreground_fn=None) -> list[Detection]:
    """Parse a detection file.  Foregrounds come from the optional mask path,
    else from ``foreground_fn(entry_dict, box_pixels)``, else the full box."""
    try:
        rows = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FileFormatError("%s: invalid JSON: %s" % (path, exc)) from exc
    if not isinstance(rows, list):
        raise FileFormatError("%s: $ must be an array" % path)
    dets = []
    base = Path(path).parent
    for k, row in enumerate(rows):
        where = "%s: $[%d]" % (path, k)
        try:
            label = int(row["label"])
            score = float(row["score"])
            box = tuple(int(v) for v in row["box"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FileFormatError("%s: %s" % (where, exc)) from exc
        if not 0.0 < score < 1.0:
            raise FileFormatError("%s.score must lie in (0, 1)" % where)
        if len(box) != 4 or box[0] >= box[2] or box[1] >= box[3]:
            raise FileFormatError("%s.box must be [x0,y0,x1,y1) with x0<x1, y0<y1" % where)
        if not 1 <= label < num_classes:
            raise FileFormatError("%s.label must lie in [1, %d]" % (where, num_classes - 1))
        box_px = grid.box_indices(box)
        if box_px.size == 0:
            raise FileFormatError("%s.box lies outside the grid" % where)
        if row.get("mask"):
            mask = read_pgm(base / row["mask"])
            fg = np.flatnonzero(mask.ravel())
            fg = fg[np.isin(fg, box_px)]
            if fg.size == 0:
                raise FileFormatError("%s.mask selects no pixels inside the box" % where)
        elif foreground_fn is not None:
            fg = foreground_fn(row, box_px)
        else:
            fg = box_px
        dets.append(Detection(label, score, box, fg,
                              y_marginal=float(row.get("y_marginal", -1.0))))
    return dets


def write_pgm(path, values: np.ndarray):
    """Binary PGM (P5): 8-bit when values fit, else 16-bit big-endian with
    maxval 65535."""
    arr = np.asarray(values)
    if arr.ndim != 2 or arr.min(initial=0) < 0:
        raise ValueError("PGM needs a non-negative 2-d array")
    if arr.max(initial=0) > MAX_INSTANCE_LABELS:
        raise ValueError("label index exceeds the 16-bit PGM limit of %d"
                         % MAX_INSTANCE_LABELS)
    wide = arr.max(initial=0) > 255
    maxval = 65535 if wide else 255
    header = b"P5\n%d %d\n%d\n" % (arr.shape[1], arr.shape[0], maxval)
    payload = arr.astype(">u2" if wide else "u1").tobytes()
    Path(path).write_bytes(header + payload)


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, offset = [], 0
    while len(fields) < 4:
        while offset < len(data) and data[offset : offset + 1].isspace():
            offset += 1
        if offset < len(data) and data[offset : offset + 1] == b"#":
            while offset < len(data) and data[offset] != 0x0A:
                offset += 1
            continue
        start = offset
        while offset < len(data) and not data[offset : offset + 1].isspace():
            offset += 1
        if start == offset:
            raise FileFormatError("%s: truncated PGM header at byte %d" % (path, offset))
        fields.append(data[start:offset])
    if fields[0] != b"P5":
        raise FileFormatError("%s: not a binary PGM (bad magic at byte 0)" % path)
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise FileFormatError("%s: non-numeric PGM header field" % path) from exc
    offset += 1  # single whitespace after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * dtype.itemsize
    if len(data) - offset != expected:
        raise FileFormatError(
            "%s: payload length %d != expected %d at byte %d"
            % (path, len(data) - offset, expected, offset)
        )
    arr = np.frombuffer(data[offset:], dtype=dtype).reshape(height, width)
    return arr.astype(np.int64)


def write_instance_sidecar(path, space, y_scores=None):
    """JSON sidecar mapping instance index -> source detection, class, score."""
    entries = {}
    for k, det in enumerate(space.detections, start=1):
        entries[str(k)] = {
            "detection": k - 1,
            "class": int(det.class_label),
            "score": float(det.y_marginal),
        }
    Path(path).write_text(json.dumps({"instances": entries}, indent=2) + "\n")


def read_instance_sidecar(path) -> dict[int, dict]:
    try:
        doc = json.loads(Path(path).read_text())
        return {int(k): v for k, v in doc["instances"].items()}
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise FileFormatError("%s: invalid sidecar: %s" % (path, exc)) from exc


def color_palette(n: int) -> np.ndarray:
    """Fixed palette: bit-reversal color map (VOC convention), index 0 black."""
    palette = np.zeros((n, 3), dtype=np.uint8)
    for idx in range(n):
        r = g = b = 0
        value = idx
        for shift in range(8):
            r |= ((value >> 0) & 1) << (7 - shift)
            g |= ((value >> 1) & 1) << (7 - shift)
            b |= ((value >> 2) & 1) << (7 - shift)
            value >>= 3
        palette[idx] = (r, g, b)
    return palette


def write_ppm(path, label_map: np.ndarray):
    """Color rendering of a label map for human inspection."""
    palette = color_palette(int(label_map.max(initial=0)) + 1)
    rgb = palette[label_map]
    header = b"P6\n%d %d\n255\n" % (label_map.shape[1], label_map.shape[0])
    Path(path).write_bytes(header + rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, offset = [], 0
    while len(fields) < 4:
        while offset < len(data) and data[offset : offset + 1].isspace():
            offset += 1
        if offset < len(data) and data[offset : offset + 1] == b"#":
            while offset < len(data) and data[offset] != 0x0A:
                offset += 1
            continue
        start = offset
        while offset < len(data) and not data[offset : offset + 1].isspace():
            offset += 1
        fields.append(data[start:offset])
    if fields[0] != b"P6":
        raise FileFormatError("%s: not a binary PPM (bad magic at byte 0)" % path)
    width, height, maxval = (int(f) for f in fields[1:])
    offset += 1
    if maxval != 255:
        raise FileFormatError("%s: only 8-bit PPM supported" % path)
    expected = width * height * 3
    if len(data) - offset != expected:
        raise FileFormatError("%s: payload length mismatch at byte %d" % (path, offset))
    return (
        np.frombuffer(data[offset:], dtype=np.uint8)
        .reshape(height, width, 3)
        .astype(np.float64)
    )


def read_manifest(path) -> list[dict]:
    """JSON list of per-image {"map": ..., "sidecar": ...} path pairs,
    relative to the manifest location."""
    try:
        rows = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FileFormatError("%s: invalid JSON: %s" % (path, exc)) from exc
    if not isinstance(rows, list) or not rows:
        raise FileFormatError("%s: manifest must be a non-empty array" % path)
    base = Path(path).parent
    out = []
    for k, row in enumerate(rows):
        if "map" not in row or "sidecar" not in row:
            raise FileFormatError("%s: $[%d] needs 'map' and 'sidecar'" % (path, k))
        out.append({"map": base / row["map"], "sidecar": base / row["sidecar"]})
    return out


def load_instances_from_files(map_path, sidecar_path, with_scores: bool):
    """Instance map + sidecar -> list of (class, mask[, score]) tuples."""
    label_map = read_pgm(map_path)
    sidecar = read_instance_sidecar(sidecar_path)
    out = []
    for idx in sorted(sidecar):
        mask = label_map == idx
        if not mask.any():
            continue
        meta = sidecar[idx]
        if with_scores:
            out.append((int(meta["class"]), mask, float(meta["score"])))
        else:
            out.append((int(meta["class"]), mask))
    return out
