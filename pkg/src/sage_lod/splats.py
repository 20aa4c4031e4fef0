"""Gaussian-splat point-cloud I/O, checkpoint catalogs, and memory accounting.

The on-disk convention is the standard 3DGS PLY vertex layout: positions,
zeroed normals, spherical-harmonic color coefficients (``f_dc_*`` for degree
0, ``f_rest_*`` channel-major for degrees 1..3), pre-activation opacity,
log-scales, and an unnormalized quaternion.  A degree-3 cloud carries 62
float32 properties per vertex, i.e. 248 bytes, which is the byte model used
for all occupancy accounting.
"""

from __future__ import annotations

import io
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CatalogError,
    ManifestError,
    PlyFormatError,
    PlySchemaError,
    PlyValidationError,
)

BYTES_PER_GAUSSIAN = 248  # 62 float32 properties in the canonical layout

_BASE_BEFORE_SH = ["x", "y", "z", "nx", "ny", "nz"]
_DC_PROPS = ["f_dc_0", "f_dc_1", "f_dc_2"]
_TAIL_PROPS = ["opacity", "scale_0", "scale_1", "scale_2",
               "rot_0", "rot_1", "rot_2", "rot_3"]

_REST_COUNT_TO_DEGREE = {0: 0, 9: 1, 24: 2, 45: 3}


def sh_rest_width(sh_degree: int) -> int:
    """Number of f_rest coefficients for a given SH degree (3 channels)."""
    return 3 * ((sh_degree + 1) ** 2 - 1)


def gaussian_property_names(sh_degree: int) -> list[str]:
    """Canonical per-vertex PLY property order for the given SH degree."""
    rest = [f"f_rest_{i}" for i in range(sh_rest_width(sh_degree))]
    return _BASE_BEFORE_SH + _DC_PROPS + rest + _TAIL_PROPS


@dataclass(frozen=True)
class Gaussian3D:
    """A single splat primitive, pre-activation (as stored on disk)."""

    position: np.ndarray      # (3,)
    sh_dc: np.ndarray         # (3,)
    sh_rest: np.ndarray       # (3 * ((deg+1)^2 - 1),), channel-major
    opacity_raw: float
    scale_raw: np.ndarray     # (3,) log-scales
    rotation_raw: np.ndarray  # (4,) quaternion (w, x, y, z)

    @property
    def opacity(self) -> float:
        return 1.0 / (1.0 + math.exp(-float(self.opacity_raw)))

    @property
    def scales(self) -> np.ndarray:
        return np.exp(np.asarray(self.scale_raw, dtype=np.float64))

    @property
    def rotation(self) -> np.ndarray:
        q = np.asarray(self.rotation_raw, dtype=np.float64)
        return q / np.linalg.norm(q)


class SplatCloud:
    """Ordered collection of Gaussian splats, stored column-wise as float32.

    All arrays keep the raw (pre-activation) file values so that a
    parse/write round trip is bit exact.
    """

    __slots__ = ("positions", "sh_dc", "sh_rest", "opacity_raw",
                 "scale_raw", "rotation_raw", "sh_degree")

    def __init__(self, positions, sh_dc, sh_rest, opacity_raw, scale_raw,
                 rotation_raw, sh_degree: int, validate: bool = True):
        self.positions = np.ascontiguousarray(positions, dtype=np.float32)
        self.sh_dc = np.ascontiguousarray(sh_dc, dtype=np.float32)
        self.sh_rest = np.ascontiguousarray(sh_rest, dtype=np.float32)
        self.opacity_raw = np.ascontiguousarray(opacity_raw, dtype=np.float32)
        self.scale_raw = np.ascontiguousarray(scale_raw, dtype=np.float32)
        self.rotation_raw = np.ascontiguousarray(rotation_raw, dtype=np.float32)
        self.sh_degree = int(sh_degree)
        if validate:
            self._validate()

    def _validate(self) -> None:
        n = len(self)
        if self.sh_degree not in (0, 1, 2, 3):
            raise PlyValidationError(f"unsupported SH degree {self.sh_degree}")
        expected = sh_rest_width(self.sh_degree)
        if self.sh_rest.shape != (n, expected):
            raise PlyValidationError(
                f"sh_rest has shape {self.sh_rest.shape}, expected ({n}, {expected}) "
                f"for degree {self.sh_degree}")
        for name, arr, shape in (
            ("positions", self.positions, (n, 3)),
            ("sh_dc", self.sh_dc, (n, 3)),
            ("opacity_raw", self.opacity_raw, (n,)),
            ("scale_raw", self.scale_raw, (n, 3)),
            ("rotation_raw", self.rotation_raw, (n, 4)),
        ):
            if arr.shape != shape:
                raise PlyValidationError(f"{name} has shape {arr.shape}, expected {shape}")
            if n:
                bad = np.flatnonzero(~np.isfinite(arr).reshape(n, -1).all(axis=1))
                if bad.size:
                    raise PlyValidationError(f"non-finite value in {name}", vertex=int(bad[0]))
        if n:
            norms = np.linalg.norm(self.rotation_raw.astype(np.float64), axis=1)
            zero = np.flatnonzero(norms < 1e-12)
            if zero.size:
                raise PlyValidationError("zero-norm rotation quaternion", vertex=int(zero[0]))

    def __len__(self) -> int:
        return self.positions.shape[0]

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            position=self.positions[i].copy(),
            sh_dc=self.sh_dc[i].copy(),
            sh_rest=self.sh_rest[i].copy(),
            opacity_raw=float(self.opacity_raw[i]),
            scale_raw=self.scale_raw[i].copy(),
            rotation_raw=self.rotation_raw[i].copy(),
        )

    def equals(self, other: "SplatCloud") -> bool:
        """Bitwise field-for-field equality."""
        return (
            self.sh_degree == other.sh_degree
            and len(self) == len(other)
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("positions", "sh_dc", "sh_rest", "opacity_raw",
                          "scale_raw", "rotation_raw")
            )
        )

    def take(self, indices) -> "SplatCloud":
        """Order-preserving selection of gaussians by index array."""
        idx = np.asarray(indices)
        return SplatCloud(
            self.positions[idx], self.sh_dc[idx], self.sh_rest[idx],
            self.opacity_raw[idx], self.scale_raw[idx], self.rotation_raw[idx],
            self.sh_degree, validate=False)

    @property
    def opacities(self) -> np.ndarray:
        """Activated opacities, sigmoid(opacity_raw), in (0, 1)."""
        x = self.opacity_raw.astype(np.float64)
        return 1.0 / (1.0 + np.exp(-x))

    @property
    def scales(self) -> np.ndarray:
        """Activated scales, exp(scale_raw)."""
        return np.exp(self.scale_raw.astype(np.float64))

    @property
    def rotations(self) -> np.ndarray:
        """Unit quaternions (w, x, y, z)."""
        q = self.rotation_raw.astype(np.float64)
        return q / np.linalg.norm(q, axis=1, keepdims=True)

    @staticmethod
    def empty(sh_degree: int = 3) -> "SplatCloud":
        w = sh_rest_width(sh_degree)
        z = np.zeros
        return SplatCloud(z((0, 3)), z((0, 3)), z((0, w)), z((0,)), z((0, 3)),
                          z((0, 4)), sh_degree, validate=False)


def concat_clouds(clouds: list[SplatCloud]) -> SplatCloud:
    """Merge clouds in order. Lower-degree clouds are zero-padded to the
    maximum SH degree (zero coefficients render identically)."""
    if not clouds:
        return SplatCloud.empty()
    degree = max(c.sh_degree for c in clouds)
    width = sh_rest_width(degree)

    def pad(c: SplatCloud) -> np.ndarray:
        if c.sh_rest.shape[1] == width:
            return c.sh_rest
        out = np.zeros((len(c), width), dtype=np.float32)
        per_old = c.sh_rest.shape[1] // 3
        per_new = width // 3
        for ch in range(3):
            out[:, ch * per_new:ch * per_new + per_old] = \
                c.sh_rest[:, ch * per_old:(ch + 1) * per_old]
        return out

    return SplatCloud(
        np.concatenate([c.positions for c in clouds]),
        np.concatenate([c.sh_dc for c in clouds]),
        np.concatenate([pad(c) for c in clouds]),
        np.concatenate([c.opacity_raw for c in clouds]),
        np.concatenate([c.scale_raw for c in clouds]),
        np.concatenate([c.rotation_raw for c in clouds]),
        degree, validate=False)


# ---------------------------------------------------------------------------
# PLY container
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "float": ("<f4", float), "float32": ("<f4", float),
    "double": ("<f8", float), "float64": ("<f8", float),
    "uchar": ("u1", int), "uint8": ("u1", int),
    "char": ("i1", int), "int8": ("i1", int),
    "ushort": ("<u2", int), "uint16": ("<u2", int),
    "short": ("<i2", int), "int16": ("<i2", int),
    "uint": ("<u4", int), "uint32": ("<u4", int),
    "int": ("<i4", int), "int32": ("<i4", int),
}


@dataclass
class _PlyHeader:
    fmt: str                      # "binary_little_endian" or "ascii"
    count: int
    properties: list[tuple[str, str]]  # (name, ply type)
    data_offset: int


def _parse_ply_header(data: bytes) -> _PlyHeader:
    end = data.find(b"end_header\n")
    if end < 0:
        raise PlyFormatError("missing end_header", offset=len(data))
    header_bytes = data[:end + len(b"end_header\n")]
    lines = header_bytes.decode("ascii", errors="replace").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PlyFormatError("not a PLY file (missing 'ply' magic)", offset=0)

    fmt = None
    count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    for line in lines[1:]:
        stripped = line.strip()
        pos = header_bytes.find(line.encode("ascii", errors="replace"))
        if stripped.startswith("comment") or not stripped:
            continue
        if stripped.startswith("format"):
            parts = stripped.split()
            if len(parts) != 3 or parts[1] not in ("binary_little_endian", "ascii"):
                raise PlyFormatError(f"unsupported PLY format line: {stripped!r}", offset=pos)
            fmt = parts[1]
        elif stripped.startswith("element"):
            parts = stripped.split()
            if len(parts) != 3:
                raise PlyFormatError(f"malformed element line: {stripped!r}", offset=pos)
            if parts[1] == "vertex":
                try:
                    count = int(parts[2])
                except ValueError:
                    raise PlyFormatError(f"bad vertex count: {parts[2]!r}", offset=pos)
                in_vertex = True
            else:
                in_vertex = False
        elif stripped.startswith("property"):
            parts = stripped.split()
            if parts[1] == "list":
                if in_vertex:
                    raise PlyFormatError("list properties unsupported for vertices", offset=pos)
                continue
            if len(parts) != 3:
                raise PlyFormatError(f"malformed property line: {stripped!r}", offset=pos)
            if parts[1] not in _PLY_TYPES:
                raise PlyFormatError(f"unsupported property type {parts[1]!r}", offset=pos)
            if in_vertex:
                props.append((parts[2], parts[1]))
        elif stripped == "end_header":
            break
        else:
            raise PlyFormatError(f"unrecognized header line: {stripped!r}", offset=pos)

    if fmt is None:
        raise PlyFormatError("missing format line", offset=0)
    if count is None:
        raise PlyFormatError("missing 'element vertex' line", offset=0)
    return _PlyHeader(fmt, count, props, len(header_bytes))


def _read_vertex_table(data: bytes, header: _PlyHeader) -> dict[str, np.ndarray]:
    """Decode the vertex element into per-property arrays (file dtypes)."""
    dtype = np.dtype([(name, _PLY_TYPES[t][0]) for name, t in header.properties])
    if header.fmt == "binary_little_endian":
        need = header.count * dtype.itemsize
        payload = data[header.data_offset:header.data_offset + need]
        if len(payload) < need:
            raise PlyFormatError(
                f"truncated payload: expected {need} bytes, got {len(payload)}",
                offset=header.data_offset + len(payload))
        table = np.frombuffer(payload, dtype=dtype, count=header.count)
    else:
        text = data[header.data_offset:].decode("ascii", errors="replace")
        rows = [ln for ln in text.splitlines() if ln.strip()]
        if len(rows) < header.count:
            raise PlyFormatError(
                f"ASCII payload has {len(rows)} rows, expected {header.count}",
                offset=header.data_offset)
        table = np.zeros(header.count, dtype=dtype)
        n_props = len(header.properties)
        for i in range(header.count):
            fields = rows[i].split()
            if len(fields) != n_props:
                raise PlyValidationError(
                    f"row has {len(fields)} fields, expected {n_props}", vertex=i)
            try:
                for (name, t), tok in zip(header.properties, fields):
                    table[name][i] = _PLY_TYPES[t][1](tok)
            except ValueError:
                raise PlyValidationError(f"unparseable numeric field in row", vertex=i)
    return {name: np.array(table[name]) for name, _ in header.properties}


def parse_splat_ply(data: bytes | io.BufferedIOBase | str | Path) -> SplatCloud:
    """Parse a 3DGS-convention PLY (binary little-endian or ASCII).

    Normals are parsed and discarded.  The SH degree is inferred from the
    number of ``f_rest_*`` properties present.
    """
    raw = _as_bytes(data)
    header = _parse_ply_header(raw)
    names = [n for n, _ in header.properties]

    rest_names = sorted(
        (n for n in names if re.fullmatch(r"f_rest_\d+", n)),
        key=lambda n: int(n.rsplit("_", 1)[1]))
    n_rest = len(rest_names)
    if n_rest not in _REST_COUNT_TO_DEGREE:
        raise PlySchemaError(
            f"f_rest property count {n_rest} does not match any SH degree "
            "(expected 0, 9, 24, or 45)")
    if rest_names and [int(n.rsplit("_", 1)[1]) for n in rest_names] != list(range(n_rest)):
        raise PlySchemaError("f_rest_* indices are not contiguous from 0")
    degree = _REST_COUNT_TO_DEGREE[n_rest]

    for required in _BASE_BEFORE_SH + _DC_PROPS + _TAIL_PROPS:
        if required not in names:
            raise PlySchemaError(f"missing vertex property {required!r}")

    cols = _read_vertex_table(raw, header)

    def stack(keys: list[str]) -> np.ndarray:
        out = np.empty((header.count, len(keys)), dtype=np.float32)
        for j, k in enumerate(keys):
            out[:, j] = cols[k]
        return out

    cloud = SplatCloud(
        positions=stack(["x", "y", "z"]),
        sh_dc=stack(_DC_PROPS),
        sh_rest=stack(rest_names) if rest_names else np.zeros((header.count, 0), np.float32),
        opacity_raw=cols["opacity"].astype(np.float32),
        scale_raw=stack(["scale_0", "scale_1", "scale_2"]),
        rotation_raw=stack(["rot_0", "rot_1", "rot_2", "rot_3"]),
        sh_degree=degree,
    )
    return cloud


def write_splat_ply(cloud: SplatCloud) -> bytes:
    """Serialize to binary little-endian PLY with zero-filled normals.

    A degree-3 cloud emits the canonical 62-property layout (248 bytes per
    vertex); lower degrees emit correspondingly fewer ``f_rest_*`` columns so
    that parse(write(c)) round-trips the degree.
    """
    names = gaussian_property_names(cloud.sh_degree)
    header_lines = ["ply", "format binary_little_endian 1.0",
                    f"element vertex {len(cloud)}"]
    header_lines += [f"property float {n}" for n in names]
    header_lines.append("end_header")
    header = ("\n".join(header_lines) + "\n").encode("ascii")

    n = len(cloud)
    table = np.empty((n, len(names)), dtype="<f4")
    table[:, 0:3] = cloud.positions
    table[:, 3:6] = 0.0  # normals, zero-filled by convention
    table[:, 6:9] = cloud.sh_dc
    w = sh_rest_width(cloud.sh_degree)
    table[:, 9:9 + w] = cloud.sh_rest
    table[:, 9 + w] = cloud.opacity_raw
    table[:, 10 + w:13 + w] = cloud.scale_raw
    table[:, 13 + w:17 + w] = cloud.rotation_raw
    return header + table.tobytes()


def read_points_ply(data: bytes | io.BufferedIOBase | str | Path) -> np.ndarray:
    """Read only x/y/z from any vertex PLY; returns (N, 3) float64."""
    raw = _as_bytes(data)
    header = _parse_ply_header(raw)
    names = [n for n, _ in header.properties]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise PlySchemaError(f"missing vertex property {axis!r}")
    cols = _read_vertex_table(raw, header)
    pts = np.stack([cols["x"], cols["y"], cols["z"]], axis=1).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(pts).all(axis=1))
    if bad.size:
        raise PlyValidationError("non-finite point coordinate", vertex=int(bad[0]))
    return pts


def write_points_ply(points: np.ndarray) -> bytes:
    """Serialize bare (N, 3) positions as a binary little-endian PLY."""
    pts = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    header = ("ply\n"
              "format binary_little_endian 1.0\n"
              f"element vertex {len(pts)}\n"
              "property float x\n"
              "property float y\n"
              "property float z\n"
              "end_header\n").encode("ascii")
    return header + np.ascontiguousarray(pts, dtype="<f4").tobytes()


def ply_vertex_count(path: str | Path) -> int:
    """Header-only vertex count (does not decode the payload)."""
    with open(path, "rb") as f:
        head = f.read(65536)
    return _parse_ply_header(head).count


def _as_bytes(data) -> bytes:
    if isinstance(data, (bytes, bytearray)):
        return bytes(data)
    if isinstance(data, (str, Path)):
        return Path(data).read_bytes()
    return data.read()


# ---------------------------------------------------------------------------
# Occupancy
# ---------------------------------------------------------------------------

def occupancy_bytes(count: int) -> int:
    """Memory footprint of `count` gaussians under the 62-float32 layout."""
    if count < 0:
        raise ValueError("count must be nonnegative")
    return count * BYTES_PER_GAUSSIAN


def format_bytes(n: int) -> str:
    """Human-readable decimal size (1 MB = 10^6 bytes), as used in reports."""
    if n >= 10 ** 9:
        return f"{n / 10 ** 9:.2f} GB"
    return f"{n / 10 ** 6:.1f} MB"


# ---------------------------------------------------------------------------
# Checkpoint catalog
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"
CHECKPOINT_FILE = "point_cloud.ply"


@dataclass
class CheckpointSet:
    """Catalog of per-(label, iteration) splat clouds, lazily loadable."""

    root: Path
    labels: dict[str, int]                       # name -> id
    iterations: list[int]                        # strictly increasing
    paths: dict[tuple[int, int], Path] = field(default_factory=dict)
    _counts: dict[tuple[int, int], int] = field(default_factory=dict)

    @property
    def label_ids(self) -> list[int]:
        return sorted(self.labels.values())

    def label_name(self, label_id: int) -> str:
        for name, lid in self.labels.items():
            if lid == label_id:
                return name
        raise KeyError(label_id)

    def path(self, label_id: int, iteration: int) -> Path:
        key = (int(label_id), int(iteration))
        if key not in self.paths:
            raise CatalogError(f"no checkpoint for label {label_id} at iteration {iteration}")
        return self.paths[key]

    def count(self, label_id: int, iteration: int) -> int:
        """Gaussian count N_l(i) from a header-only read."""
        key = (int(label_id), int(iteration))
        if key not in self._counts:
            self._counts[key] = ply_vertex_count(self.path(label_id, iteration))
        return self._counts[key]

    def cloud(self, label_id: int, iteration: int) -> SplatCloud:
        return parse_splat_ply(self.path(label_id, iteration))

    def __contains__(self, key: tuple[int, int]) -> bool:
        return (int(key[0]), int(key[1])) in self.paths


def load_checkpoint_catalog(root: str | Path) -> CheckpointSet:
    """Build a catalog from ``root/<label_name>/iteration_<i>/point_cloud.ply``.

    ``root/manifest.json`` maps label names to ids; an optional "iterations"
    list therein is validated against the directory tree.
    """
    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise ManifestError(f"missing manifest {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    labels = {str(k): int(v) for k, v in manifest.get("labels", {}).items()}
    if not labels:
        raise ManifestError("manifest has no labels")

    label_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not label_dirs:
        raise CatalogError(f"no label directories under {root}")

    per_label: dict[str, list[int]] = {}
    paths: dict[tuple[int, int], Path] = {}
    for d in label_dirs:
        if d.name not in labels:
            raise ManifestError(f"label directory {d.name!r} not in manifest")
        iters = []
        for sub in sorted(d.iterdir()):
            m = re.fullmatch(r"iteration_(\d+)", sub.name)
            if not m:
                continue
            it = int(m.group(1))
            ply = sub / CHECKPOINT_FILE
            if not ply.is_file():
                raise CatalogError(f"missing {ply}")
            iters.append(it)
            paths[(labels[d.name], it)] = ply
        per_label[d.name] = sorted(iters)

    grids = {tuple(v) for v in per_label.values()}
    if len(grids) != 1:
        reference = max(grids, key=len)
        offending = sorted(name for name, v in per_label.items()
                           if tuple(v) != reference)
        raise CatalogError(
            f"inconsistent iteration grids across labels: {offending}")
    iterations = sorted(next(iter(grids)))
    if not iterations:
        raise CatalogError(f"no iteration_<i> directories under {root}")

    declared = manifest.get("iterations")
    if declared is not None and sorted(int(i) for i in declared) != iterations:
        raise ManifestError(
            f"manifest iterations {declared} disagree with directory tree {iterations}")

    return CheckpointSet(root=root, labels=labels, iterations=iterations, paths=paths)


def write_checkpoint_manifest(root: str | Path, labels: dict[str, int],
                              iterations: list[int]) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    path = root / MANIFEST_NAME
    path.write_text(json.dumps(
        {"labels": labels, "iterations": list(iterations)}, indent=2))
    return path
