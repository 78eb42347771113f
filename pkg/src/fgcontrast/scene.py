"""Point-cloud containers, similarity transforms, voxelization, file I/O, and
a seeded synthetic-scene generator.

Conventions: z-up, meters, float64 geometry in memory. The native file format
stores float32 positions; the generator emits float32-representable positions
so the native round trip is the exact identity.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from fgcontrast.errors import ArgumentError, ContractError, DataError, FormatError
from fgcontrast.rng import rng_for

NATIVE_MAGIC = b"FACPC1"
_FLAG_COLORS = 0x01
_FLAG_LABELS = 0x02


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class PointCloud:
    """N points with positions (meters) and optional colors / integer labels.

    Immutable after construction; safe to share across threads.
    """

    positions: np.ndarray
    colors: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise DataError(f"positions must be (N>=1, 3), got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise DataError("positions contain non-finite coordinates")
        object.__setattr__(self, "positions", _readonly(pos))
        if self.colors is not None:
            col = np.asarray(self.colors, dtype=np.uint8)
            if col.shape != (pos.shape[0], 3):
                raise DataError(f"colors must be (N, 3), got {col.shape}")
            object.__setattr__(self, "colors", _readonly(col))
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.shape != (pos.shape[0],):
                raise DataError(f"labels must be (N,), got {lab.shape}")
            if np.any(lab < 0) or np.any(lab > 0xFFFF):
                raise DataError("labels must fit in uint16")
            object.__setattr__(self, "labels", _readonly(lab.astype(np.uint16)))

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def subset(self, indices: np.ndarray) -> "PointCloud":
        """New cloud containing the given points, in the given order."""
        idx = np.asarray(indices, dtype=np.int64)
        return PointCloud(
            self.positions[idx],
            None if self.colors is None else self.colors[idx],
            None if self.labels is None else self.labels[idx],
        )


@dataclass(frozen=True)
class SimilarityTransform:
    """p' = scale * F * R * p + translation, F the diagonal flip matrix."""

    rotation: np.ndarray
    scale: float = 1.0
    flip_x: bool = False
    flip_y: bool = False
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (3, 3):
            raise ContractError(f"rotation must be 3x3, got {r.shape}")
        if np.max(np.abs(r.T @ r - np.eye(3))) >= 1e-9 or np.linalg.det(r) < 0:
            raise ContractError("rotation is not orthonormal with det +1")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ContractError("scale must be positive and finite")
        object.__setattr__(self, "rotation", _readonly(r))
        t = np.asarray(self.translation, dtype=np.float64)
        if t.shape != (3,):
            raise ContractError(f"translation must be (3,), got {t.shape}")
        object.__setattr__(self, "translation", _readonly(t))

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(rotation=np.eye(3))

    @property
    def flip_matrix(self) -> np.ndarray:
        return np.diag(
            [-1.0 if self.flip_x else 1.0, -1.0 if self.flip_y else 1.0, 1.0]
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        m = self.scale * (self.flip_matrix @ self.rotation)
        return np.asarray(points, dtype=np.float64) @ m.T + self.translation

    def apply_inverse(self, points: np.ndarray) -> np.ndarray:
        y = (np.asarray(points, dtype=np.float64) - self.translation) / self.scale
        return y @ (self.flip_matrix @ self.rotation)


def rotation_about_axis(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation matrix about a (not necessarily unit) axis."""
    a = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(a)
    if norm == 0:
        raise ArgumentError("rotation axis must be nonzero")
    x, y, z = a / norm
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + math.sin(angle_rad) * k + (1.0 - math.cos(angle_rad)) * (k @ k)


def apply_transform(cloud: PointCloud, t: SimilarityTransform) -> PointCloud:
    """Transformed copy of the cloud; pairwise distances scale by t.scale."""
    return PointCloud(t.apply(cloud.positions), cloud.colors, cloud.labels)


@dataclass(frozen=True)
class VoxelGrid:
    """Partition of point indices into cubic cells of side voxel_size."""

    voxel_size: float
    cells: dict

    @property
    def n_points(self) -> int:
        return sum(len(v) for v in self.cells.values())


def voxel_indices(positions: np.ndarray, voxel_size: float) -> np.ndarray:
    """Elementwise floor(p / voxel_size) as int64, shape (N, 3)."""
    if voxel_size <= 0:
        raise ArgumentError("voxel_size must be > 0")
    return np.floor(np.asarray(positions, dtype=np.float64) / voxel_size).astype(
        np.int64
    )


def voxelize(cloud: PointCloud, voxel_size: float) -> VoxelGrid:
    """Assign every point to exactly one cell keyed by its integer 3-index."""
    idx = voxel_indices(cloud.positions, voxel_size)
    cells: dict = {}
    for p, key in enumerate(map(tuple, idx)):
        cells.setdefault(key, []).append(p)
    return VoxelGrid(voxel_size=voxel_size, cells=cells)


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for a synthetic room: floor + walls background, labeled objects."""

    extent: tuple = (4.0, 4.0, 2.5)
    n_points: int = 4096
    n_objects: int = 5
    background_fraction: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if self.n_points < 1:
            raise ArgumentError("n_points must be >= 1")
        if self.n_objects < 0:
            raise ArgumentError("n_objects must be >= 0")
        if not 0.0 < self.background_fraction < 1.0:
            raise ArgumentError("background_fraction must be in (0, 1)")
        if any(e <= 0 for e in self.extent):
            raise ArgumentError("extent must be positive")
        if self.background_fraction * self.n_points < self.n_objects:
            raise ArgumentError("infeasible spec: background too small for objects")
        n_bg = int(math.floor(self.background_fraction * self.n_points))
        if self.n_points - n_bg < self.n_objects:
            raise ArgumentError("infeasible spec: not enough points for objects")


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    """Integer split of `total` proportional to weights, deterministic ties."""
    shares = total * weights / weights.sum()
    counts = np.floor(shares).astype(np.int64)
    rem = int(total - counts.sum())
    if rem > 0:
        frac = shares - counts
        order = np.lexsort((np.arange(len(weights)), -frac))
        counts[order[:rem]] += 1
    return counts


def _sample_box(rng, n, half, center, spin):
    hx, hy, hz = half
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy]) * 4.0
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, size=n)
    v = rng.uniform(-1.0, 1.0, size=n)
    pts = np.empty((n, 3))
    for i in range(n):
        f = face[i]
        if f < 2:
            pts[i] = (hx if f == 0 else -hx, u[i] * hy, v[i] * hz)
        elif f < 4:
            pts[i] = (u[i] * hx, hy if f == 2 else -hy, v[i] * hz)
        else:
            pts[i] = (u[i] * hx, v[i] * hy, hz if f == 4 else -hz)
    rot = rotation_about_axis(np.array([0.0, 0.0, 1.0]), spin)
    return pts @ rot.T + center


def _sample_sphere(rng, n, radius, center):
    d = rng.normal(size=(n, 3))
    d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)
    return center + radius * d


def _sample_cylinder(rng, n, radius, half_h, center):
    side = 2.0 * math.pi * radius * (2.0 * half_h)
    caps = 2.0 * math.pi * radius**2
    on_side = rng.uniform(size=n) < side / (side + caps)
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    pts = np.empty((n, 3))
    for i in range(n):
        if on_side[i]:
            z = rng.uniform(-half_h, half_h)
            pts[i] = (radius * math.cos(theta[i]), radius * math.sin(theta[i]), z)
        else:
            r = radius * math.sqrt(rng.uniform())
            z = half_h if rng.uniform() < 0.5 else -half_h
            pts[i] = (r * math.cos(theta[i]), r * math.sin(theta[i]), z)
    return pts + center


def generate_scene(spec: SceneSpec) -> PointCloud:
    """Deterministic synthetic room: background label 0, objects 1..n_objects.

    Background points lie on the floor and four wall planes; objects are
    surface-sampled boxes/spheres/cylinders placed uniformly without
    penetrating the floor. Identical spec (incl. seed) gives bitwise
    identical output.
    """
    rng = rng_for(spec.seed, 0x5CE7E)
    ex, ey, ez = (float(e) for e in spec.extent)
    n_bg = int(math.floor(spec.background_fraction * spec.n_points))
    n_fg = spec.n_points - n_bg

    plane_areas = np.array([ex * ey, ey * ez, ey * ez, ex * ez, ex * ez])
    per_plane = _largest_remainder(n_bg, plane_areas)
    chunks = []
    u = rng.uniform(size=per_plane[0])
    v = rng.uniform(size=per_plane[0])
    chunks.append(np.column_stack([u * ex, v * ey, np.zeros(per_plane[0])]))
    for k, plane in enumerate(("x0", "x1", "y0", "y1")):
        m = per_plane[1 + k]
        u = rng.uniform(size=m)
        v = rng.uniform(size=m)
        if plane == "x0":
            chunks.append(np.column_stack([np.zeros(m), u * ey, v * ez]))
        elif plane == "x1":
            chunks.append(np.column_stack([np.full(m, ex), u * ey, v * ez]))
        elif plane == "y0":
            chunks.append(np.column_stack([u * ex, np.zeros(m), v * ez]))
        else:
            chunks.append(np.column_stack([u * ex, np.full(m, ey), v * ez]))
    labels = [np.zeros(n_bg, dtype=np.uint16)]

    if spec.n_objects > 0:
        per_obj = np.full(spec.n_objects, n_fg // spec.n_objects, dtype=np.int64)
        per_obj[: n_fg % spec.n_objects] += 1
        kinds = ("box", "sphere", "cylinder")
        for j in range(spec.n_objects):
            kind = kinds[j % 3]
            m = int(per_obj[j])
            if kind == "box":
                half = rng.uniform(0.1, 0.3, size=3)
                spin = rng.uniform(0.0, 2.0 * math.pi)
                margin = float(np.hypot(half[0], half[1]))
                cx = rng.uniform(margin, ex - margin)
                cy = rng.uniform(margin, ey - margin)
                cz = half[2] + rng.uniform(0.0, max(ez - 2.0 * half[2], 0.0) * 0.5)
                pts = _sample_box(rng, m, half, np.array([cx, cy, cz]), spin)
            elif kind == "sphere":
                r = rng.uniform(0.1, 0.3)
                cx = rng.uniform(r, ex - r)
                cy = rng.uniform(r, ey - r)
                cz = r + rng.uniform(0.0, max(ez - 2.0 * r, 0.0) * 0.5)
                pts = _sample_sphere(rng, m, r, np.array([cx, cy, cz]))
            else:
                r = rng.uniform(0.08, 0.25)
                hh = rng.uniform(0.1, 0.3)
                cx = rng.uniform(r, ex - r)
                cy = rng.uniform(r, ey - r)
                cz = hh + rng.uniform(0.0, max(ez - 2.0 * hh, 0.0) * 0.5)
                pts = _sample_cylinder(rng, m, r, hh, np.array([cx, cy, cz]))
            chunks.append(pts)
            labels.append(np.full(m, j + 1, dtype=np.uint16))

    positions = np.vstack(chunks)
    # f32 grid so the native round trip is exact
    positions = positions.astype(np.float32).astype(np.float64)
    return PointCloud(positions, labels=np.concatenate(labels))


# ---------------------------------------------------------------------------
# File I/O


def write_cloud(cloud: PointCloud, path, format: str = "native") -> None:
    """Write a cloud; read_cloud(path, format) inverts it per the format's
    precision contract (native: exact on f32-representable positions)."""
    if format == "native":
        _write_native(cloud, path)
    elif format == "xyz":
        _write_xyz(cloud, path)
    elif format == "ply":
        _write_ply(cloud, path)
    else:
        raise ArgumentError(f"unknown format {format!r}")


def read_cloud(path, format: str = "native") -> PointCloud:
    if format == "native":
        return _read_native(path)
    if format == "xyz":
        return _read_xyz(path)
    if format == "ply":
        return _read_ply(path)
    raise ArgumentError(f"unknown format {format!r}")


def _write_native(cloud: PointCloud, path) -> None:
    flags = 0
    if cloud.colors is not None:
        flags |= _FLAG_COLORS
    if cloud.labels is not None:
        flags |= _FLAG_LABELS
    with open(path, "wb") as f:
        f.write(NATIVE_MAGIC)
        f.write(struct.pack("<BBQ", flags, 0, cloud.n))
        f.write(cloud.positions.astype("<f4").tobytes())
        if cloud.colors is not None:
            f.write(cloud.colors.astype(np.uint8).tobytes())
        if cloud.labels is not None:
            f.write(cloud.labels.astype("<u2").tobytes())


def _read_native(path) -> PointCloud:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16 or blob[:6] != NATIVE_MAGIC:
        raise FormatError("bad native header (magic)")
    flags, reserved, n = struct.unpack("<BBQ", blob[6:16])
    if reserved != 0 or flags & ~(_FLAG_COLORS | _FLAG_LABELS):
        raise FormatError("bad native header (flags/reserved)")
    if n == 0:
        raise DataError("empty cloud")
    off = 16
    need = 12 * n
    if len(blob) < off + need:
        raise DataError("truncated native payload")
    pos = np.frombuffer(blob, dtype="<f4", count=3 * n, offset=off).reshape(n, 3)
    off += need
    colors = None
    if flags & _FLAG_COLORS:
        if len(blob) < off + 3 * n:
            raise DataError("truncated native colors")
        colors = np.frombuffer(blob, dtype=np.uint8, count=3 * n, offset=off).reshape(
            n, 3
        )
        off += 3 * n
    labels = None
    if flags & _FLAG_LABELS:
        if len(blob) < off + 2 * n:
            raise DataError("truncated native labels")
        labels = np.frombuffer(blob, dtype="<u2", count=n, offset=off)
    if not np.all(np.isfinite(pos)):
        raise DataError("non-finite coordinates in native file")
    return PointCloud(pos.astype(np.float64), colors, labels)


def _write_xyz(cloud: PointCloud, path) -> None:
    with open(path, "w") as f:
        for i in range(cloud.n):
            x, y, z = cloud.positions[i]
            line = f"{x:.9g} {y:.9g} {z:.9g}"
            if cloud.colors is not None:
                r, g, b = cloud.colors[i]
                line += f" {r} {g} {b}"
            f.write(line + "\n")


def _read_xyz(path) -> PointCloud:
    pos, colors = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) not in (3, 6):
                raise FormatError(f"xyz line {lineno}: expected 3 or 6 fields")
            try:
                xyz = [float(p) for p in parts[:3]]
            except ValueError as e:
                raise FormatError(f"xyz line {lineno}: {e}") from e
            if not all(math.isfinite(c) for c in xyz):
                raise DataError(f"xyz line {lineno}: non-finite coordinate")
            pos.append(xyz)
            if len(parts) == 6:
                try:
                    colors.append([int(p) for p in parts[3:]])
                except ValueError as e:
                    raise FormatError(f"xyz line {lineno}: {e}") from e
    if not pos:
        raise DataError("empty cloud")
    if colors and len(colors) != len(pos):
        raise FormatError("xyz: colors present on only some lines")
    return PointCloud(np.array(pos), np.array(colors) if colors else None)


def _write_ply(cloud: PointCloud, path) -> None:
    has_col = cloud.colors is not None
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {cloud.n}"]
    header += ["property float x", "property float y", "property float z"]
    if has_col:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    dtype = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if has_col:
        dtype += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    rec = np.empty(cloud.n, dtype=dtype)
    rec["x"], rec["y"], rec["z"] = (cloud.positions[:, i].astype("<f4") for i in range(3))
    if has_col:
        rec["red"], rec["green"], rec["blue"] = (cloud.colors[:, i] for i in range(3))
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


_PLY_PROPS = {
    ("float", "x"): ("x", "<f4"),
    ("float", "y"): ("y", "<f4"),
    ("float", "z"): ("z", "<f4"),
    ("uchar", "red"): ("red", "u1"),
    ("uchar", "green"): ("green", "u1"),
    ("uchar", "blue"): ("blue", "u1"),
}


def _read_ply(path) -> PointCloud:
    with open(path, "rb") as f:
        blob = f.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply\n") or end < 0:
        raise FormatError("not a ply file")
    lines = blob[:end].decode("ascii", errors="replace").splitlines()
    n = None
    props = []
    fmt_ok = False
    for line in lines[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            if parts[1:] != ["binary_little_endian", "1.0"]:
                raise FormatError("only binary_little_endian 1.0 ply is supported")
            fmt_ok = True
        elif parts[0] == "element":
            if parts[1] != "vertex" or n is not None:
                raise FormatError("only a single vertex element is supported")
            n = int(parts[2])
        elif parts[0] == "property":
            key = (parts[1], parts[2]) if len(parts) == 3 else None
            if key not in _PLY_PROPS:
                raise FormatError(f"unsupported ply property: {line!r}")
            props.append(_PLY_PROPS[key])
    if not fmt_ok or n is None:
        raise FormatError("ply header missing format or vertex element")
    names = [p[0] for p in props]
    if names not in (["x", "y", "z"], ["x", "y", "z", "red", "green", "blue"]):
        raise FormatError("ply must declare x,y,z and optionally red,green,blue")
    if n == 0:
        raise DataError("empty cloud")
    dtype = np.dtype(props)
    payload = blob[end + len(b"end_header\n") :]
    if len(payload) < n * dtype.itemsize:
        raise DataError("truncated ply payload")
    rec = np.frombuffer(payload, dtype=dtype, count=n)
    pos = np.column_stack([rec["x"], rec["y"], rec["z"]]).astype(np.float64)
    if not np.all(np.isfinite(pos)):
        raise DataError("non-finite coordinates in ply file")
    colors = None
    if "red" in names:
        colors = np.column_stack([rec["red"], rec["green"], rec["blue"]])
    return PointCloud(pos, colors)
