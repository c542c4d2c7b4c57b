"""Point cloud containers, file I/O, and synthetic data generation.

File formats: XYZ is the canonical interchange format (one "x y z" per
line); OFF and PLY are parsed for their ASCII vertex blocks only, faces are
ignored.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import rotation_from_quaternion, rotation_z

_TWO_PI = 2.0 * np.pi


class CloudParseError(ValueError):
    """Raised for malformed cloud files; carries path and 1-based line number."""

    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


@dataclass
class PointCloud:
    """An ordered set of 3D points with an optional class label and origin tag."""

    points: np.ndarray
    label: int | None = None
    source: str | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (n, 3), got shape {pts.shape}")
        if len(pts) < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.isfinite(pts).all():
            raise ValueError("point coordinates must be finite")
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)


class RotationMode(enum.Enum):
    NONE = "none"
    AROUND_Z = "z"
    SO3 = "so3"


class ShapeKind(enum.Enum):
    SPHERE = "sphere"
    BOX = "box"
    CYLINDER = "cylinder"
    TORUS = "torus"
    CONE = "cone"


CLASS_NAMES = tuple(kind.value for kind in ShapeKind)


def sample_rotation(mode: RotationMode, rng: np.random.Generator) -> np.ndarray:
    """Draw one rotation matrix for the given protocol.

    NONE returns the identity without consuming randomness; AROUND_Z draws a
    uniform angle about +z; SO3 draws a uniform rotation via a uniform unit
    quaternion (two angles and a radius split across the 3-sphere).
    """
    if mode is RotationMode.NONE:
        return np.eye(3)
    if mode is RotationMode.AROUND_Z:
        return rotation_z(rng.uniform(0.0, _TWO_PI))
    u1, u2, u3 = rng.uniform(size=3)
    a, b = np.sqrt(1.0 - u1), np.sqrt(u1)
    quat = (
        a * np.sin(_TWO_PI * u2),
        a * np.cos(_TWO_PI * u2),
        b * np.sin(_TWO_PI * u3),
        b * np.cos(_TWO_PI * u3),
    )
    return rotation_from_quaternion(quat)


# ---------------------------------------------------------------------------
# File I/O


def load_cloud(path, fmt: str | None = None) -> PointCloud:
    """Load a cloud from an .xyz, .off, or .ply file.

    fmt overrides extension-based detection ("xyz", "off", "ply").
    """
    path = Path(path)
    kind = (fmt or path.suffix.lstrip(".")).lower()
    text = path.read_text()
    if kind == "xyz":
        pts = _parse_xyz(path, text)
    elif kind == "off":
        pts = _parse_off(path, text)
    elif kind == "ply":
        pts = _parse_ply(path, text)
    else:
        raise CloudParseError(path, 0, f"unsupported format {kind!r}")
    return PointCloud(pts, source=str(path))


def save_cloud(cloud: PointCloud, path, fmt: str | None = None) -> None:
    """Write a cloud as .xyz, .off, or .ply (ASCII, vertices only)."""
    path = Path(path)
    kind = (fmt or path.suffix.lstrip(".")).lower()
    rows = [" ".join(repr(float(c)) for c in p) for p in cloud.points]
    if kind == "xyz":
        body = "\n".join(rows) + "\n"
    elif kind == "off":
        body = f"OFF\n{len(rows)} 0 0\n" + "\n".join(rows) + "\n"
    elif kind == "ply":
        header = (
            "ply\nformat ascii 1.0\n"
            f"element vertex {len(rows)}\n"
            "property double x\nproperty double y\nproperty double z\n"
            "end_header\n"
        )
        body = header + "\n".join(rows) + "\n"
    else:
        raise ValueError(f"unsupported format {kind!r}")
    path.write_text(body)


def _parse_floats(path, lineno: int, fields: list[str], count: int) -> list[float]:
    vals = []
    for f in fields[:count]:
        try:
            vals.append(float(f))
        except ValueError:
            raise CloudParseError(path, lineno, f"expected a number, got {f!r}") from None
    if not all(np.isfinite(vals)):
        raise CloudParseError(path, lineno, "non-finite coordinate")
    return vals


def _parse_xyz(path, text: str) -> np.ndarray:
    pts = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 3:
            raise CloudParseError(path, lineno, f"expected 3 fields, got {len(fields)}")
        pts.append(_parse_floats(path, lineno, fields, 3))
    if not pts:
        raise CloudParseError(path, 0, "file contains no points")
    return np.array(pts)


def _content_lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line and not line.startswith("#"):
            yield lineno, line


def _parse_off(path, text: str) -> np.ndarray:
    lines = _content_lines(text)
    try:
        lineno, header = next(lines)
    except StopIteration:
        raise CloudParseError(path, 0, "empty OFF file") from None
    if not header.startswith("OFF"):
        raise CloudParseError(path, lineno, "missing OFF header")
    rest = header[3:].split()
    if not rest:
        try:
            lineno, counts_line = next(lines)
        except StopIteration:
            raise CloudParseError(path, lineno, "missing OFF count line") from None
        rest = counts_line.split()
    if len(rest) < 1:
        raise CloudParseError(path, lineno, "malformed OFF count line")
    try:
        n_vertices = int(rest[0])
    except ValueError:
        raise CloudParseError(path, lineno, f"bad vertex count {rest[0]!r}") from None
    if n_vertices < 1:
        raise CloudParseError(path, lineno, "OFF file declares no vertices")
    pts = np.empty((n_vertices, 3))
    for i in range(n_vertices):
        try:
            lineno, line = next(lines)
        except StopIteration:
            raise CloudParseError(
                path, lineno, f"expected {n_vertices} vertices, found {i}"
            ) from None
        fields = line.split()
        if len(fields) < 3:
            raise CloudParseError(path, lineno, "vertex line needs 3 coordinates")
        pts[i] = _parse_floats(path, lineno, fields, 3)
    return pts


def _parse_ply(path, text: str) -> np.ndarray:
    lines = _content_lines(text)
    try:
        lineno, magic = next(lines)
    except StopIteration:
        raise CloudParseError(path, 0, "empty PLY file") from None
    if magic != "ply":
        raise CloudParseError(path, lineno, "missing ply magic line")
    n_vertices = None
    for lineno, line in lines:
        fields = line.split()
        if fields[0] == "format":
            if len(fields) < 2 or fields[1] != "ascii":
                raise CloudParseError(path, lineno, "only ascii PLY is supported")
        elif fields[0] == "element" and len(fields) >= 3 and fields[1] == "vertex":
            try:
                n_vertices = int(fields[2])
            except ValueError:
                raise CloudParseError(path, lineno, f"bad vertex count {fields[2]!r}") from None
        elif fields[0] == "end_header":
            break
    else:
        raise CloudParseError(path, lineno, "missing end_header")
    if n_vertices is None:
        raise CloudParseError(path, lineno, "header declares no vertex element")
    if n_vertices < 1:
        raise CloudParseError(path, lineno, "PLY file declares no vertices")
    pts = np.empty((n_vertices, 3))
    for i in range(n_vertices):
        try:
            lineno, line = next(lines)
        except StopIteration:
            raise CloudParseError(
                path, lineno, f"expected {n_vertices} vertices, found {i}"
            ) from None
        fields = line.split()
        if len(fields) < 3:
            raise CloudParseError(path, lineno, "vertex line needs 3 coordinates")
        pts[i] = _parse_floats(path, lineno, fields, 3)
    return pts


# ---------------------------------------------------------------------------
# Synthetic shapes

# Canonical surfaces inscribed in [-1, 1]^3; no data-dependent rescaling.
_CYLINDER_RADIUS = 0.6
_TORUS_RING = 0.7
_TORUS_TUBE = 0.3


def _sample_sphere(rng, n):
    v = rng.normal(size=(n, 3))
    norms = np.linalg.norm(v, axis=1)
    while np.any(norms == 0.0):
        bad = norms == 0.0
        v[bad] = rng.normal(size=(int(bad.sum()), 3))
        norms = np.linalg.norm(v, axis=1)
    return v / norms[:, None]


def _sample_box(rng, n):
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for a in range(3):
        m = axis == a
        o1, o2 = [i for i in range(3) if i != a]
        pts[m, a] = sign[m]
        pts[m, o1] = uv[m, 0]
        pts[m, o2] = uv[m, 1]
    return pts


def _sample_cylinder(rng, n):
    r = _CYLINDER_RADIUS
    side_area = _TWO_PI * r * 2.0
    cap_area = np.pi * r * r
    u = rng.uniform(0.0, side_area + 2.0 * cap_area, size=n)
    theta = rng.uniform(0.0, _TWO_PI, size=n)
    t = rng.uniform(size=n)
    pts = np.empty((n, 3))
    on_side = u < side_area
    on_top = (~on_side) & (u < side_area + cap_area)
    radius = np.where(on_side, r, r * np.sqrt(t))
    pts[:, 0] = radius * np.cos(theta)
    pts[:, 1] = radius * np.sin(theta)
    pts[:, 2] = np.where(on_side, 2.0 * t - 1.0, np.where(on_top, 1.0, -1.0))
    return pts


def _sample_torus(rng, n):
    ring, tube = _TORUS_RING, _TORUS_TUBE
    u = rng.uniform(0.0, _TWO_PI, size=n)
    # Tube angle needs density proportional to (ring + tube cos v); rejection
    # sample it so the surface is uniform by area.
    v = np.empty(n)
    have = 0
    while have < n:
        cand = rng.uniform(0.0, _TWO_PI, size=n - have)
        accept = rng.uniform(size=n - have) <= (ring + tube * np.cos(cand)) / (ring + tube)
        took = cand[accept]
        v[have : have + len(took)] = took
        have += len(took)
    pts = np.empty((n, 3))
    arm = ring + tube * np.cos(v)
    pts[:, 0] = arm * np.cos(u)
    pts[:, 1] = arm * np.sin(u)
    pts[:, 2] = tube * np.sin(v)
    return pts


def _sample_cone(rng, n):
    # Apex (0, 0, 1), base disk of radius 1 at z = -1.
    lateral_area = np.pi * np.sqrt(5.0)
    base_area = np.pi
    u = rng.uniform(0.0, lateral_area + base_area, size=n)
    theta = rng.uniform(0.0, _TWO_PI, size=n)
    t = rng.uniform(size=n)
    s = np.sqrt(t)
    on_side = u < lateral_area
    pts = np.empty((n, 3))
    pts[:, 0] = s * np.cos(theta)
    pts[:, 1] = s * np.sin(theta)
    pts[:, 2] = np.where(on_side, 1.0 - 2.0 * s, -1.0)
    return pts


_SAMPLERS = {
    ShapeKind.SPHERE: _sample_sphere,
    ShapeKind.BOX: _sample_box,
    ShapeKind.CYLINDER: _sample_cylinder,
    ShapeKind.TORUS: _sample_torus,
    ShapeKind.CONE: _sample_cone,
}


def generate_shape(kind: ShapeKind, n: int, jitter: float, seed: int) -> PointCloud:
    """Sample n points uniformly by area from one canonical surface.

    The surface is inscribed in the unit cube; Gaussian jitter of the given
    sigma is added afterwards. Identical arguments give byte-identical output.

    Args:
        kind: which surface.
        n: number of points, at least 8.
        jitter: Gaussian noise sigma, >= 0.
        seed: RNG seed.
    """
    if n < 8:
        raise ValueError(f"need at least 8 points, got {n}")
    if jitter < 0.0:
        raise ValueError(f"jitter must be >= 0, got {jitter}")
    rng = np.random.default_rng(seed)
    pts = _SAMPLERS[kind](rng, n)
    if jitter > 0.0:
        pts = pts + rng.normal(0.0, jitter, size=pts.shape)
    label = list(ShapeKind).index(kind)
    return PointCloud(pts, label=label, source=kind.value)


def generate_bumpy_cloud(
    n: int,
    seed: int,
    axes=(1.0, 0.8, 0.6),
    n_bumps: int = 6,
    bump_amp: float = 0.15,
    bump_sigma: float = 0.5,
) -> PointCloud:
    """Asymmetric test surface: an ellipsoid with Gaussian radial bumps.

    Unlike the canonical shapes this has no symmetry axis, so covariance
    spectra stay simple (non-repeated) and frames are well defined everywhere.
    Used by the frame repeatability benchmark.
    """
    rng = np.random.default_rng(seed)
    dirs = _sample_sphere(rng, n)
    centers = _sample_sphere(rng, n_bumps)
    d2 = ((dirs[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    radii = 1.0 + bump_amp * np.exp(-d2 / (2.0 * bump_sigma**2)).sum(axis=1)
    pts = dirs * radii[:, None] * np.asarray(axes, dtype=np.float64)
    return PointCloud(pts, source=f"bumpy-{seed}")


# ---------------------------------------------------------------------------
# Datasets


@dataclass
class ToyDataset:
    """Labeled train/test clouds over the five canonical shape classes."""

    train: list = field(default_factory=list)
    test: list = field(default_factory=list)
    class_names: tuple = CLASS_NAMES


def make_toy_dataset(
    train_per_class: int,
    test_per_class: int,
    n_points: int = 256,
    jitter: float = 0.01,
    seed: int = 0,
) -> ToyDataset:
    """Generate the in-memory shape classification suite deterministically."""
    rng = np.random.default_rng(seed)
    ds = ToyDataset()
    for split, count in (("train", train_per_class), ("test", test_per_class)):
        clouds = getattr(ds, split)
        for kind in ShapeKind:
            for _ in range(count):
                child = int(rng.integers(0, 2**62))
                clouds.append(generate_shape(kind, n_points, jitter, child))
    return ds


@dataclass
class ManifestEntry:
    path: str
    label: int


@dataclass
class DatasetManifest:
    seed: int
    classes: list
    entries: list


def save_manifest(manifest: DatasetManifest, path) -> None:
    payload = {
        "seed": manifest.seed,
        "classes": list(manifest.classes),
        "entries": [{"path": e.path, "label": e.label} for e in manifest.entries],
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    payload = json.loads(path.read_text())
    classes = list(payload["classes"])
    entries = [ManifestEntry(e["path"], int(e["label"])) for e in payload["entries"]]
    for e in entries:
        if not 0 <= e.label < len(classes):
            raise ValueError(f"label {e.label} outside [0, {len(classes)}) in {path}")
        if not (path.parent / e.path).exists():
            raise FileNotFoundError(path.parent / e.path)
    return DatasetManifest(int(payload["seed"]), classes, entries)


def load_manifest_clouds(path) -> list:
    """Load every entry of a manifest as a labeled PointCloud."""
    path = Path(path)
    manifest = load_manifest(path)
    clouds = []
    for e in manifest.entries:
        cloud = load_cloud(path.parent / e.path)
        cloud.label = e.label
        clouds.append(cloud)
    return clouds
