"""Point-cloud container types and file I/O (xyz and ASCII ply)."""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CloudFormatError",
    "EmptyCloudError",
    "PointCloud",
    "DatasetSplit",
    "load_cloud",
    "save_cloud",
]


class CloudFormatError(ValueError):
    """Raised when a cloud file cannot be parsed under its declared format."""


class EmptyCloudError(CloudFormatError):
    """Raised when a file contains no points, or an empty cloud is written."""


def _as_points(arr) -> np.ndarray:
    pts = np.asarray(arr, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
    return pts


@dataclass
class PointCloud:
    """An ordered set of 3D points (millimeters) with optional per-point data.

    Optional channels must match ``len(points)``: ``normals`` are unit
    3-vectors, ``curvatures`` are surface-variation values in [0, 1],
    ``labels`` are {0, 1} anomaly flags, and ``scores`` are arbitrary
    non-negative scalars (used when persisting anomaly scores).
    """

    points: np.ndarray
    normals: np.ndarray | None = None
    curvatures: np.ndarray | None = None
    labels: np.ndarray | None = None
    scores: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.points = _as_points(self.points)
        n = len(self.points)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            if self.normals.shape != (n, 3):
                raise ValueError(
                    f"normals shape {self.normals.shape} does not match {n} points"
                )
            norms = np.linalg.norm(self.normals, axis=1)
            if not np.all(np.abs(norms - 1.0) <= 1e-6):
                raise ValueError("normals must be unit vectors (|norm - 1| <= 1e-6)")
        if self.curvatures is not None:
            self.curvatures = np.asarray(self.curvatures, dtype=np.float64)
            if self.curvatures.shape != (n,):
                raise ValueError("curvatures must be a scalar per point")
            if np.any(self.curvatures < 0.0) or np.any(self.curvatures > 1.0):
                raise ValueError("curvatures must lie in [0, 1]")
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.shape != (n,):
                raise ValueError("labels must be a flag per point")
            if not np.all(np.isin(lab, (0, 1))):
                raise ValueError("labels must be 0 or 1")
            self.labels = lab.astype(np.uint8)
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=np.float64)
            if self.scores.shape != (n,):
                raise ValueError("scores must be a scalar per point")

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, indices: np.ndarray) -> "PointCloud":
        """New cloud holding only ``indices``, carrying every optional channel."""
        idx = np.asarray(indices)
        return PointCloud(
            points=self.points[idx],
            normals=None if self.normals is None else self.normals[idx],
            curvatures=None if self.curvatures is None else self.curvatures[idx],
            labels=None if self.labels is None else self.labels[idx],
            scores=None if self.scores is None else self.scores[idx],
        )

    def replace(self, **fields) -> "PointCloud":
        values = {
            "points": self.points,
            "normals": self.normals,
            "curvatures": self.curvatures,
            "labels": self.labels,
            "scores": self.scores,
        }
        values.update(fields)
        return PointCloud(**values)


@dataclass
class DatasetSplit:
    """Train/test partition: normal training clouds, plus labeled test halves.

    ``anomaly_rate`` is the abnormal fraction of the whole split.
    """

    train_normal: list[PointCloud]
    test_normal: list[PointCloud]
    test_abnormal: list[PointCloud]
    anomaly_rate: float = field(default=0.0)

    def __post_init__(self) -> None:
        if not 0.0 < self.anomaly_rate < 1.0:
            raise ValueError("anomaly_rate must lie in (0, 1)")
        for i, cloud in enumerate(self.test_abnormal):
            if cloud.labels is None or int(cloud.labels.sum()) < 1:
                raise ValueError(
                    f"test_abnormal[{i}] must carry labels with >= 1 positive"
                )


# ---------------------------------------------------------------------------
# readers / writers
# ---------------------------------------------------------------------------

_FLOAT_TYPES = {"float", "float32", "float64", "double"}
_INT_TYPES = {"uchar", "uint8", "char", "int8", "short", "ushort", "int", "uint",
              "int16", "uint16", "int32", "uint32"}


def _infer_format(path: str, format: str | None) -> str:
    if format is None:
        suffix = str(path).rsplit(".", 1)[-1].lower()
        format = suffix
    format = format.lower()
    if format not in ("xyz", "ply"):
        raise ValueError(f"unsupported cloud format {format!r} (expected xyz or ply)")
    return format


def _find_bad_line(path: str, lines: list[str], start_lineno: int, ncols: int) -> None:
    """Re-scan raw data lines to name the first malformed record."""
    for off, raw in enumerate(lines):
        s = raw.strip()
        if not s:
            continue
        parts = s.split()
        if len(parts) != ncols:
            raise CloudFormatError(
                f"{path}:{start_lineno + off}: expected {ncols} fields, got {len(parts)}"
            )
        for p in parts:
            try:
                float(p)
            except ValueError:
                raise CloudFormatError(
                    f"{path}:{start_lineno + off}: non-numeric field {p!r}"
                ) from None
    raise CloudFormatError(f"{path}: malformed data block")


def _load_xyz(path: str) -> PointCloud:
    with open(path, "r") as f:
        lines = f.readlines()
    data_lines = [l for l in lines if l.strip()]
    if not data_lines:
        raise EmptyCloudError(f"{path}: file contains no points")
    ncols = len(data_lines[0].split())
    if ncols not in (3, 4):
        raise CloudFormatError(
            f"{path}:1: expected 3 or 4 columns per record, got {ncols}"
        )
    try:
        data = np.loadtxt(io.StringIO("".join(data_lines)), ndmin=2)
    except ValueError:
        _find_bad_line(path, lines, 1, ncols)
        raise  # unreachable; _find_bad_line always raises
    if data.shape[1] != ncols:
        _find_bad_line(path, lines, 1, ncols)
    labels = None
    if ncols == 4:
        lab = data[:, 3]
        if not np.all(np.isin(lab, (0.0, 1.0))):
            raise CloudFormatError(f"{path}: label column must contain only 0 or 1")
        labels = lab.astype(np.uint8)
    return PointCloud(points=data[:, :3], labels=labels)


def _load_ply(path: str) -> PointCloud:
    with open(path, "r") as f:
        lines = f.readlines()
    if not lines or lines[0].strip() != "ply":
        raise CloudFormatError(f"{path}:1: missing 'ply' magic line")

    n_vertices = None
    properties: list[str] = []  # property names of the vertex element, in order
    in_vertex_element = False
    header_end = None
    for lineno, raw in enumerate(lines[1:], start=2):
        tokens = raw.split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if len(tokens) < 2 or tokens[1] != "ascii":
                raise CloudFormatError(f"{path}:{lineno}: only ASCII ply is supported")
        elif tokens[0] == "element":
            if len(tokens) != 3:
                raise CloudFormatError(f"{path}:{lineno}: malformed element line")
            in_vertex_element = tokens[1] == "vertex"
            if in_vertex_element:
                try:
                    n_vertices = int(tokens[2])
                except ValueError:
                    raise CloudFormatError(
                        f"{path}:{lineno}: bad vertex count {tokens[2]!r}"
                    ) from None
        elif tokens[0] == "property" and in_vertex_element:
            if len(tokens) != 3:
                raise CloudFormatError(f"{path}:{lineno}: malformed property line")
            ptype, pname = tokens[1], tokens[2]
            if ptype not in _FLOAT_TYPES | _INT_TYPES:
                raise CloudFormatError(
                    f"{path}:{lineno}: unsupported property type {ptype!r}"
                )
            properties.append(pname)
        elif tokens[0] == "end_header":
            header_end = lineno
            break
    if header_end is None:
        raise CloudFormatError(f"{path}: missing end_header")
    if n_vertices is None:
        raise CloudFormatError(f"{path}: no vertex element declared")
    if n_vertices == 0:
        raise EmptyCloudError(f"{path}: ply declares zero vertices")
    for coord in ("x", "y", "z"):
        if coord not in properties:
            raise CloudFormatError(f"{path}: vertex element lacks property {coord!r}")

    data_lines = lines[header_end:]
    body = [l for l in data_lines if l.strip()]
    if len(body) < n_vertices:
        raise CloudFormatError(
            f"{path}: expected {n_vertices} vertex records, found {len(body)}"
        )
    try:
        data = np.loadtxt(io.StringIO("".join(body[:n_vertices])), ndmin=2)
    except ValueError:
        _find_bad_line(path, data_lines, header_end + 1, len(properties))
        raise
    if data.shape[1] != len(properties):
        _find_bad_line(path, data_lines, header_end + 1, len(properties))

    cols = {name: data[:, i] for i, name in enumerate(properties)}
    labels = None
    if "anomaly" in cols:
        lab = cols["anomaly"]
        if not np.all(np.isin(lab, (0.0, 1.0))):
            raise CloudFormatError(f"{path}: anomaly channel must contain only 0 or 1")
        labels = lab.astype(np.uint8)
    scores = cols.get("score")
    points = np.column_stack([cols["x"], cols["y"], cols["z"]])
    return PointCloud(points=points, labels=labels, scores=scores)


def load_cloud(path: str, format: str | None = None) -> PointCloud:
    """Read a point cloud from ``path``.

    ``format`` is ``"xyz"`` or ``"ply"``; when omitted it is inferred from the
    file extension. An xyz file holds whitespace-separated ``x y z`` records
    with an optional fourth label column; a ply file is ASCII with vertex
    properties x/y/z plus optional ``anomaly`` and ``score`` channels.
    """
    fmt = _infer_format(path, format)
    if fmt == "xyz":
        return _load_xyz(path)
    return _load_ply(path)


def save_cloud(cloud: PointCloud, path: str, format: str | None = None) -> None:
    """Write ``cloud`` to ``path`` so that ``load_cloud`` reproduces it.

    Coordinates are written with 17 significant digits, which round-trips
    float64 exactly. The ply writer emits the ``anomaly`` channel when labels
    are present and the ``score`` channel when scores are present; the xyz
    writer emits the optional label column only.
    """
    if len(cloud) == 0:
        raise EmptyCloudError("refusing to write an empty cloud")
    fmt = _infer_format(path, format)
    if fmt == "xyz":
        columns = [cloud.points]
        fmts = ["%.17g", "%.17g", "%.17g"]
        if cloud.labels is not None:
            columns.append(cloud.labels[:, None].astype(np.float64))
            fmts.append("%d")
        with open(path, "w") as f:
            np.savetxt(f, np.hstack(columns), fmt=" ".join(fmts))
        return

    columns = [cloud.points]
    props = ["property double x", "property double y", "property double z"]
    fmts = ["%.17g"] * 3
    if cloud.labels is not None:
        columns.append(cloud.labels[:, None].astype(np.float64))
        props.append("property uchar anomaly")
        fmts.append("%d")
    if cloud.scores is not None:
        columns.append(cloud.scores[:, None])
        props.append("property double score")
        fmts.append("%.17g")
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(cloud)}\n")
        f.write("\n".join(props) + "\n")
        f.write("end_header\n")
        np.savetxt(f, np.hstack(columns), fmt=" ".join(fmts))
