"""Readers and writers: OFF meshes, ASCII PLY and XYZ point clouds, pose JSON."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ParseError, UnsupportedFormat
from .geometry import PointCloud, Pose, rotation_error_deg
from .shapes import MeshShape, normalize_transform

FORMATS = {".off": "off", ".ply": "ply-ascii", ".xyz": "xyz", ".txt": "xyz"}


def detect_format(path) -> str:
    try:
        return FORMATS[Path(path).suffix.lower()]
    except KeyError:
        raise UnsupportedFormat(f"{path}: unknown extension (expected one of {sorted(FORMATS)})") from None


def _numbers(tokens: list[str], line: int, what: str, count: int | None = None) -> list[float]:
    if count is not None and len(tokens) < count:
        raise ParseError(f"expected {count} values for {what}, got {len(tokens)}", line)
    try:
        return [float(t) for t in (tokens if count is None else tokens[:count])]
    except ValueError:
        raise ParseError(f"non-numeric {what}: {' '.join(tokens)!r}", line) from None


def _content_lines(text: str):
    """(1-based line number, tokens) for non-blank lines, '#' comments stripped."""
    for i, raw in enumerate(text.splitlines(), start=1):
        tokens = raw.split("#", 1)[0].split()
        if tokens:
            yield i, tokens


def read_off(path) -> MeshShape:
    lines = list(_content_lines(Path(path).read_text()))
    if not lines:
        raise ParseError("empty file", 1)
    ln, head = lines[0]
    if not head[0].upper().endswith("OFF"):
        raise ParseError(f"missing OFF header, found {head[0]!r}", ln)
    rest = head[1:]
    body = lines[1:]
    if not rest:
        if not body:
            raise ParseError("missing element counts", ln)
        ln, rest = body[0]
        body = body[1:]
    counts = _numbers(rest, ln, "element counts", 2)
    nv, nf = int(counts[0]), int(counts[1])
    if nv < 0 or nf < 0 or counts[0] != nv or counts[1] != nf:
        raise ParseError("element counts must be non-negative integers", ln)
    if len(body) < nv + nf:
        last = body[-1][0] if body else ln
        raise ParseError(f"file ends early: expected {nv} vertices and {nf} faces", last)
    verts = np.array([_numbers(t, i, "vertex", 3) for i, t in body[:nv]]).reshape(-1, 3)
    tris = []
    for i, t in body[nv : nv + nf]:
        vals = _numbers(t, i, "face")
        n = int(vals[0])
        if n < 3 or len(vals) < n + 1:
            raise ParseError(f"face needs at least 3 indices, got {t!r}", i)
        idx = [int(v) for v in vals[1 : n + 1]]
        if min(idx) < 0 or max(idx) >= nv:
            raise ParseError(f"face index out of range 0..{nv - 1}", i)
        # fan-triangulate polygons
        tris.extend((idx[0], idx[j], idx[j + 1]) for j in range(1, n - 1))
    return MeshShape(verts, np.array(tris, dtype=np.int64).reshape(-1, 3)).cleaned()


def read_ply(path) -> PointCloud:
    """ASCII PLY vertices (x, y, z and an optional ``label`` property)."""
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", 1)
    n_vertex = None
    props: list[str] = []
    in_vertex = False
    end = None
    for i, raw in enumerate(lines[1:], start=2):
        t = raw.split()
        if not t:
            continue
        if t[0] == "format":
            if len(t) < 2 or t[1] != "ascii":
                raise ParseError(f"only ASCII PLY is supported, got {' '.join(t[1:2]) or 'nothing'}", i)
        elif t[0] == "element":
            if len(t) != 3:
                raise ParseError("malformed element line", i)
            in_vertex = t[1] == "vertex"
            if in_vertex:
                try:
                    n_vertex = int(t[2])
                except ValueError:
                    raise ParseError(f"bad vertex count {t[2]!r}", i) from None
        elif t[0] == "property":
            if in_vertex:
                props.append(t[-1])
        elif t[0] == "end_header":
            end = i
            break
        elif t[0] not in ("comment", "obj_info"):
            raise ParseError(f"unexpected header line {raw.strip()!r}", i)
    if end is None:
        raise ParseError("missing end_header", len(lines))
    if n_vertex is None:
        raise ParseError("no vertex element", end)
    try:
        cols = [props.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise ParseError("vertex element lacks x, y, z properties", end) from None
    label_col = props.index("label") if "label" in props else None
    pts, labels = [], []
    row = end
    for _ in range(n_vertex):
        while row < len(lines) and not lines[row].split():
            row += 1
        if row >= len(lines):
            raise ParseError(f"file ends early: expected {n_vertex} vertices", len(lines))
        vals = _numbers(lines[row].split(), row + 1, "vertex", len(props))
        pts.append([vals[c] for c in cols])
        labels.append(vals[label_col] if label_col is not None else 1.0)
        row += 1
    return PointCloud(np.array(pts).reshape(-1, 3), np.array(labels))


def read_xyz(path) -> PointCloud:
    """Whitespace or comma separated x y z [label] rows."""
    pts, labels = [], []
    for i, tokens in _content_lines(Path(path).read_text().replace(",", " ")):
        vals = _numbers(tokens, i, "point", 3)
        if len(tokens) > 4:
            raise ParseError(f"expected 3 or 4 values, got {len(tokens)}", i)
        pts.append(vals[:3])
        labels.append(float(tokens[3]) if len(tokens) == 4 else 1.0)
    return PointCloud(np.array(pts).reshape(-1, 3), np.array(labels))


def load_shape(path, fmt: str | None = None, normalize: bool = False):
    """MeshShape for OFF, PointCloud for PLY / XYZ."""
    fmt = fmt or detect_format(path)
    if fmt == "off":
        shape = read_off(path)
    elif fmt in ("ply", "ply-ascii"):
        shape = read_ply(path)
    elif fmt == "xyz":
        shape = read_xyz(path)
    else:
        raise UnsupportedFormat(f"unsupported format {fmt!r}")
    if normalize:
        shape = normalize_shape(shape)[0]
    return shape


def normalize_shape(shape):
    """Centre at the centroid and scale to unit bounding-box diagonal; returns (shape, centre, scale)."""
    pts = shape.vertices if isinstance(shape, MeshShape) else shape.points
    center, scale = normalize_transform(pts)
    moved = (pts - center) * scale
    if isinstance(shape, MeshShape):
        return MeshShape(moved, shape.triangles), center, scale
    return PointCloud(moved, shape.labels.copy()), center, scale


def save_ply(cloud: PointCloud, path, with_labels: bool = False) -> None:
    """ASCII PLY with coordinates written by repr, so a reload is bit-exact."""
    head = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}", "property double x", "property double y", "property double z"]
    if with_labels:
        head.append("property double label")
    head.append("end_header")
    rows = []
    for p, lab in zip(cloud.points, cloud.labels):
        vals = [repr(float(v)) for v in p]
        if with_labels:
            vals.append(repr(float(lab)))
        rows.append(" ".join(vals))
    Path(path).write_text("\n".join(head + rows) + "\n")


def pose_to_dict(pose: Pose, truth: Pose | None = None, **extra) -> dict:
    out = {"rotation": [float(v) for v in pose.rotation.ravel()], "translation": [float(v) for v in pose.translation]}
    if truth is not None:
        out["rot_err_deg"] = rotation_error_deg(pose, truth)
    out.update(extra)
    return out


def pose_from_dict(data: dict) -> Pose:
    try:
        R = np.asarray(data["rotation"], dtype=float).reshape(3, 3)
        t = np.asarray(data["translation"], dtype=float).reshape(3)
    except (KeyError, ValueError) as exc:
        raise ParseError(f"bad pose object: {exc}", 1) from None
    return Pose(R, t)


def save_pose(path, pose: Pose, truth: Pose | None = None, **extra) -> None:
    Path(path).write_text(json.dumps(pose_to_dict(pose, truth, **extra), indent=2) + "\n")


def load_pose(path) -> Pose:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno) from None
    return pose_from_dict(data)
