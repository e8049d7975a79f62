"""Triangle meshes: loading, normalization, area-weighted sampling, synthetic shapes."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .core import Rng
from .errors import DegenerateInputError, EmptyInputError, ParameterError, ParseError


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ParseError("face index out of range")

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        t = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)


@dataclass(frozen=True)
class NormalizationStats:
    centroid: np.ndarray
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (points - self.centroid) / self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return points * self.scale + self.centroid


# ---------------------------------------------------------------------------
# file readers


def _fan(poly, path, lineno):
    if len(poly) < 3:
        raise ParseError(f"polygon with {len(poly)} vertices", path, lineno)
    return [(poly[0], poly[k], poly[k + 1]) for k in range(1, len(poly) - 1)]


def _read_off(lines, path):
    body = []
    for lineno, raw in enumerate(lines, 1):
        text = raw.split("#", 1)[0].strip()
        if text:
            body.append((lineno, text))
    if not body:
        raise EmptyInputError(f"{path}: empty OFF file")
    lineno, head = body[0]
    if not head.startswith("OFF"):
        raise ParseError("missing OFF header", path, lineno)
    rest = head[3:].split()
    body = body[1:]
    if not rest:
        if not body:
            raise ParseError("missing element counts", path, lineno)
        lineno, counts = body[0]
        rest = counts.split()
        body = body[1:]
    try:
        nv, nf = int(rest[0]), int(rest[1])
    except (ValueError, IndexError):
        raise ParseError("bad element counts", path, lineno) from None
    if len(body) < nv + nf:
        raise ParseError(f"expected {nv} vertices and {nf} faces", path, lineno)
    verts = []
    for lineno, text in body[:nv]:
        parts = text.split()
        try:
            verts.append([float(p) for p in parts[:3]])
        except ValueError:
            raise ParseError("bad vertex", path, lineno) from None
        if len(verts[-1]) != 3:
            raise ParseError("vertex needs 3 coordinates", path, lineno)
    faces = []
    for lineno, text in body[nv:nv + nf]:
        parts = text.split()
        try:
            k = int(parts[0])
            idx = [int(p) for p in parts[1:1 + k]]
        except (ValueError, IndexError):
            raise ParseError("bad face", path, lineno) from None
        if len(idx) != k:
            raise ParseError("face is missing indices", path, lineno)
        if any(i < 0 or i >= nv for i in idx):
            raise ParseError("face index out of range", path, lineno)
        faces.extend(_fan(idx, path, lineno))
    return verts, faces


def _read_obj(lines, path):
    verts, faces = [], []
    pending = []
    for lineno, raw in enumerate(lines, 1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        parts = text.split()
        if parts[0] == "v":
            try:
                verts.append([float(p) for p in parts[1:4]])
            except ValueError:
                raise ParseError("bad vertex", path, lineno) from None
            if len(verts[-1]) != 3:
                raise ParseError("vertex needs 3 coordinates", path, lineno)
        elif parts[0] == "f":
            try:
                idx = [int(p.split("/")[0]) for p in parts[1:]]
            except ValueError:
                raise ParseError("bad face", path, lineno) from None
            pending.append((lineno, idx, len(verts)))
    for lineno, idx, seen in pending:
        # negative indices are relative to the vertices defined so far
        resolved = [i - 1 if i > 0 else seen + i for i in idx]
        if any(i < 0 or i >= len(verts) for i in resolved):
            raise ParseError("face index out of range", path, lineno)
        faces.extend(_fan(resolved, path, lineno))
    return verts, faces


def load_mesh(path, fmt: str | None = None) -> Mesh:
    """Read an ASCII OFF or OBJ file; polygons are fan-triangulated."""
    path = os.fspath(path)
    fmt = (fmt or os.path.splitext(path)[1].lstrip(".")).lower()
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if fmt == "off":
        verts, faces = _read_off(lines, path)
    elif fmt == "obj":
        verts, faces = _read_obj(lines, path)
    else:
        raise ParseError(f"unsupported mesh format {fmt!r}", path)
    if not verts or not faces:
        raise EmptyInputError(f"{path}: mesh has no vertices or faces")
    return Mesh(np.array(verts), np.array(faces))


def save_off(mesh: Mesh, path) -> None:
    lines = ["OFF", f"{len(mesh.vertices)} {len(mesh.faces)} 0"]
    lines += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.faces]
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# normalization


def surface_centroid(mesh: Mesh) -> np.ndarray:
    areas = mesh.face_areas()
    tot = areas.sum()
    if not tot > 0:
        raise DegenerateInputError("mesh has zero total area")
    return (mesh.triangles().mean(axis=1) * areas[:, None]).sum(axis=0) / tot


def diameter(points: np.ndarray, chunk: int = 2048) -> float:
    """Exact max pairwise distance (quadratic, chunked)."""
    best = 0.0
    for s in range(0, len(points), chunk):
        blk = points[s:s + chunk]
        d2 = ((blk[:, None, :] - points[None, :, :]) ** 2).sum(-1)
        best = max(best, float(d2.max()))
    return math.sqrt(best)


def normalize_mesh(mesh: Mesh, centroid: np.ndarray | None = None,
                   rescale: bool = True) -> tuple[Mesh, NormalizationStats]:
    """Translate the area-weighted centroid to 0 and scale to unit vertex diameter.

    ``centroid`` overrides the per-shape centroid (global normalization across a
    dataset); ``rescale=False`` keeps the original scale.
    """
    if len(mesh.faces) == 0:
        raise EmptyInputError("cannot normalize an empty mesh")
    c = surface_centroid(mesh) if centroid is None else np.asarray(centroid, dtype=float)
    s = diameter(mesh.vertices) if rescale else 1.0
    if not s > 0:
        raise DegenerateInputError("mesh has zero diameter")
    stats = NormalizationStats(c, s)
    out = Mesh(stats.apply(mesh.vertices), mesh.faces.copy(), dict(mesh.meta))
    return out, stats


def aggregate_centroid(meshes) -> np.ndarray:
    """Surface-weighted centroid over the union of all meshes."""
    num = np.zeros(3)
    den = 0.0
    for m in meshes:
        a = m.face_areas()
        num += (m.triangles().mean(axis=1) * a[:, None]).sum(axis=0)
        den += a.sum()
    if not den > 0:
        raise DegenerateInputError("dataset has zero total area")
    return num / den


# ---------------------------------------------------------------------------
# sampling


def sample_surface(mesh: Mesh, n: int, rng: Rng) -> np.ndarray:
    """Area-weighted uniform surface sample of ``n`` points."""
    if n < 1:
        raise ParameterError("need at least one sample")
    areas = mesh.face_areas()
    cum = np.cumsum(areas)
    tot = cum[-1] if len(cum) else 0.0
    if not tot > 0:
        raise DegenerateInputError("mesh has zero total area")
    pick = rng.uniform(n) * tot
    face = np.searchsorted(cum, pick, side="right")
    # zero-area faces have empty [cum[i-1], cum[i]) intervals and are never chosen
    face = np.minimum(face, len(cum) - 1)
    tri = mesh.triangles()[face]
    u = rng.uniform(n)
    v = rng.uniform(n)
    flip = u + v > 1.0
    u = np.where(flip, 1.0 - u, u)
    v = np.where(flip, 1.0 - v, v)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


# ---------------------------------------------------------------------------
# parametric shapes


def _grid_faces(rows: int, cols: int, wrap_cols: bool, wrap_rows: bool = False) -> np.ndarray:
    """Two triangles per quad of a (rows x cols) vertex grid."""
    faces = []
    nr = rows if wrap_rows else rows - 1
    nc = cols if wrap_cols else cols - 1
    for i in range(nr):
        i2 = (i + 1) % rows
        for j in range(nc):
            j2 = (j + 1) % cols
            a, b, c, d = i * cols + j, i * cols + j2, i2 * cols + j2, i2 * cols + j
            faces.append((a, b, c))
            faces.append((a, c, d))
    return np.array(faces, dtype=np.int64)


def _spow(x, e):
    return np.sign(x) * np.abs(x) ** e


def _uv_surface(res, fn):
    # latitude rows include both poles (duplicated pole vertices, zero-area caps)
    eta = np.linspace(-math.pi / 2, math.pi / 2, res + 1)
    omega = np.linspace(-math.pi, math.pi, res, endpoint=False)
    E, W = np.meshgrid(eta, omega, indexing="ij")
    verts = fn(E.ravel(), W.ravel())
    return verts, _grid_faces(res + 1, res, wrap_cols=True)


SHAPE_PARAMS = {
    "sphere": ("radius",),
    "torus": ("major", "minor"),
    "box": ("sx", "sy", "sz"),
    "superquadric": ("a1", "a2", "a3", "e1", "e2"),
}

DEFAULT_RANGES = {
    "sphere": {"radius": (0.5, 1.5)},
    "torus": {"major": (0.8, 1.2), "minor": (0.15, 0.45)},
    "box": {"sx": (0.5, 1.5), "sy": (0.5, 1.5), "sz": (0.5, 1.5)},
    "superquadric": {"a1": (0.5, 1.0), "a2": (0.5, 1.0), "a3": (0.5, 1.0),
                     "e1": (0.3, 1.5), "e2": (0.3, 1.5)},
}


def synth_shape(family: str, params: dict, resolution: int = 32) -> Mesh:
    """Triangulated mesh of a parametric surface centred at the origin.

    sphere(radius), torus(major, minor) with minor < major, box(sx, sy, sz) edge
    lengths, superquadric(a1, a2, a3, e1, e2) with exponents in (0, 4).
    """
    if family not in SHAPE_PARAMS:
        raise ParameterError(f"unknown shape family {family!r}")
    missing = [k for k in SHAPE_PARAMS[family] if k not in params]
    if missing:
        raise ParameterError(f"{family} needs parameters {missing}")
    p = {k: float(params[k]) for k in SHAPE_PARAMS[family]}
    if resolution < 3:
        raise ParameterError("resolution must be >= 3")
    res = int(resolution)

    if family == "sphere":
        r = p["radius"]
        if not r > 0:
            raise ParameterError("sphere radius must be positive")

        def fn(e, w):
            return np.stack([r * np.cos(e) * np.cos(w), r * np.cos(e) * np.sin(w), r * np.sin(e)], 1)

        verts, faces = _uv_surface(res, fn)
    elif family == "superquadric":
        a1, a2, a3, e1, e2 = (p[k] for k in SHAPE_PARAMS[family])
        if min(a1, a2, a3) <= 0 or not (0 < e1 < 4 and 0 < e2 < 4):
            raise ParameterError("superquadric needs positive axes and exponents in (0, 4)")

        def fn(e, w):
            ce, se = _spow(np.cos(e), e1), _spow(np.sin(e), e1)
            return np.stack([a1 * ce * _spow(np.cos(w), e2), a2 * ce * _spow(np.sin(w), e2), a3 * se], 1)

        verts, faces = _uv_surface(res, fn)
    elif family == "torus":
        big, small = p["major"], p["minor"]
        if not (0 < small < big):
            raise ParameterError("torus needs 0 < minor < major")
        u = np.linspace(0, 2 * math.pi, res, endpoint=False)
        U, V = np.meshgrid(u, u, indexing="ij")
        U, V = U.ravel(), V.ravel()
        ring = big + small * np.cos(V)
        verts = np.stack([ring * np.cos(U), ring * np.sin(U), small * np.sin(V)], 1)
        faces = _grid_faces(res, res, wrap_cols=True, wrap_rows=True)
    else:
        size = np.array([p["sx"], p["sy"], p["sz"]])
        if np.any(size <= 0):
            raise ParameterError("box edge lengths must be positive")
        verts, faces = _box(size / 2.0, res)
    return Mesh(verts, faces, {"family": family, **p})


def _box(half, res):
    t = np.linspace(-1.0, 1.0, res + 1)
    A, B = np.meshgrid(t, t, indexing="ij")
    A, B = A.ravel(), B.ravel()
    verts, faces = [], []
    base = _grid_faces(res + 1, res + 1, wrap_cols=False)
    offset = 0
    for axis in range(3):
        for sign in (-1.0, 1.0):
            o1, o2 = [k for k in range(3) if k != axis]
            pts = np.empty((len(A), 3))
            pts[:, axis] = sign
            pts[:, o1] = A
            pts[:, o2] = B
            verts.append(pts * half)
            f = base + offset
            # keep outward orientation consistent
            faces.append(f if sign > 0 else f[:, ::-1])
            offset += len(pts)
    return np.concatenate(verts), np.concatenate(faces)


def synth_params(family: str, count: int, param_ranges: dict | None, seed: int) -> list[dict]:
    if family not in SHAPE_PARAMS:
        raise ParameterError(f"unknown shape family {family!r}")
    if count < 1:
        raise ParameterError("count must be >= 1")
    ranges = dict(DEFAULT_RANGES[family])
    ranges.update(param_ranges or {})
    rng = Rng(seed)
    out = [dict() for _ in range(count)]
    for name in SHAPE_PARAMS[family]:
        if name not in ranges:
            raise ParameterError(f"no range for {family} parameter {name!r}")
        lo, hi = map(float, ranges[name])
        if hi < lo:
            raise ParameterError(f"empty range for {name}: [{lo}, {hi}]")
        draws = rng.uniform(count, lo, hi) if hi > lo else np.full(count, lo)
        for d, val in zip(out, draws):
            d[name] = float(val)
    return out


def synth_dataset(family: str, count: int, param_ranges: dict | None = None, seed: int = 0,
                  resolution: int = 32, normalize: bool = True) -> list[Mesh]:
    """``count`` shapes with parameters drawn uniformly from ``param_ranges``."""
    meshes = []
    for p in synth_params(family, count, param_ranges, seed):
        m = synth_shape(family, p, resolution)
        if normalize:
            m, _ = normalize_mesh(m)
        meshes.append(m)
    return meshes
