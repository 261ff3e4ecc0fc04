"""Triangle meshes: container, OFF/OBJ I/O and combinatorial quantities."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import (
    BoundaryError,
    DegenerateFaceError,
    IndexOutOfRange,
    IoError,
    NonManifoldError,
    NonTriangleError,
    ParseError,
)

DEGENERATE_AREA_FACTOR = 1e-12


@dataclass(frozen=True, eq=False)
class Mesh:
    """Vertex positions (n, 3) and counter-clockwise triangles (m, 3), 0-based.

    Arrays are stored read-only; derived quantities are cached on first use.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64)
        f = np.array(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"vertices must have shape (n, 3), got {v.shape}")
        f = f.reshape(-1, 3) if f.size else np.zeros((0, 3), dtype=np.int64)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            bad = int(np.flatnonzero((f < 0).any(1) | (f >= len(v)).any(1))[0])
            raise IndexOutOfRange(f"face {bad} references a vertex outside [0, {len(v)})")
        repeated = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if repeated.any():
            raise DegenerateFaceError(f"face {int(np.flatnonzero(repeated)[0])} repeats a vertex index")
        v.flags.writeable = False
        f.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices) -> Mesh:
        """Same connectivity, new positions."""
        return Mesh(vertices, self.faces)

    @cached_property
    def edges(self) -> EdgeList:
        return build_edges(self)

    @cached_property
    def areas(self) -> np.ndarray:
        return triangle_areas(self)

    @cached_property
    def rings(self) -> list[np.ndarray]:
        return one_rings(self)

    def is_closed(self) -> bool:
        return bool(self.edges.is_closed)

    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self.edges.edges) + self.n_faces

    def bbox_diagonal(self) -> float:
        if not len(self.vertices):
            return 0.0
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    def content_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.faces, dtype="<i8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class EdgeList:
    """Unique undirected edges with their opposite angles and incident faces.

    ``angles[e]`` holds the (up to two) angles, in radians, opposite edge
    ``e``; ``faces[e]`` the matching incident faces. A boundary edge has a
    single entry, the second slot being NaN / -1.
    """

    edges: np.ndarray   # (E, 2), i < j
    angles: np.ndarray  # (E, 2)
    faces: np.ndarray   # (E, 2)
    cotangents: np.ndarray  # (E, 2), 0 where absent

    @property
    def is_boundary(self) -> np.ndarray:
        return self.faces[:, 1] < 0

    @property
    def is_closed(self) -> bool:
        return not self.is_boundary.any()

    def __len__(self):
        return len(self.edges)


def _corner_geometry(vertices, faces):
    """Per-face, per-corner angle and cotangent; corner c is opposite edge (c+1, c+2)."""
    angles = np.empty(faces.shape)
    cots = np.empty(faces.shape)
    for c in range(3):
        p = vertices[faces[:, c]]
        u = vertices[faces[:, (c + 1) % 3]] - p
        w = vertices[faces[:, (c + 2) % 3]] - p
        dot = np.einsum("ij,ij->i", u, w)
        cross = np.linalg.norm(np.cross(u, w), axis=1)
        angles[:, c] = np.arctan2(cross, dot)
        with np.errstate(divide="ignore", invalid="ignore"):
            cots[:, c] = dot / cross
    return angles, cots


def build_edges(mesh: Mesh, require_closed: bool = False) -> EdgeList:
    faces = mesh.faces
    m = len(faces)
    # half-edge (a, b) of corner c is opposite corner c
    a = np.concatenate([faces[:, 1], faces[:, 2], faces[:, 0]])
    b = np.concatenate([faces[:, 2], faces[:, 0], faces[:, 1]])
    corner = np.repeat(np.arange(3), m)
    face_id = np.tile(np.arange(m), 3)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    order = np.lexsort((face_id, hi, lo))
    keys = np.stack([lo[order], hi[order]], axis=1)
    uniq, start, counts = np.unique(keys, axis=0, return_index=True, return_counts=True)
    if (counts > 2).any():
        e = uniq[np.argmax(counts > 2)]
        raise NonManifoldError(f"edge ({e[0]}, {e[1]}) belongs to {counts.max()} faces")
    if require_closed and (counts == 1).any():
        e = uniq[np.argmax(counts == 1)]
        raise BoundaryError(f"edge ({e[0]}, {e[1]}) is a boundary edge; a closed mesh is required")

    all_angles, all_cots = _corner_geometry(mesh.vertices, faces)
    he_angle = all_angles[face_id, corner][order]
    he_cot = all_cots[face_id, corner][order]
    he_face = face_id[order]

    E = len(uniq)
    angles = np.full((E, 2), np.nan)
    cots = np.zeros((E, 2))
    efaces = np.full((E, 2), -1, dtype=np.int64)
    angles[:, 0] = he_angle[start]
    cots[:, 0] = he_cot[start]
    efaces[:, 0] = he_face[start]
    two = counts == 2
    angles[two, 1] = he_angle[start[two] + 1]
    cots[two, 1] = he_cot[start[two] + 1]
    efaces[two, 1] = he_face[start[two] + 1]
    for arr in (uniq, angles, efaces, cots):
        arr.flags.writeable = False
    return EdgeList(edges=uniq.astype(np.int64), angles=angles, faces=efaces, cotangents=cots)


def triangle_areas(mesh: Mesh) -> np.ndarray:
    v, f = mesh.vertices, mesh.faces
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    threshold = DEGENERATE_AREA_FACTOR * mesh.bbox_diagonal() ** 2
    bad = areas <= threshold
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DegenerateFaceError(f"face {i} has area {areas[i]:.3g} (threshold {threshold:.3g})")
    return areas


def one_rings(mesh: Mesh) -> list[np.ndarray]:
    """Sorted one-ring neighbour indices of every vertex."""
    e = mesh.edges.edges
    n = mesh.n_vertices
    src = np.concatenate([e[:, 0], e[:, 1]])
    dst = np.concatenate([e[:, 1], e[:, 0]])
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    bounds = np.searchsorted(src, np.arange(n + 1))
    return [dst[bounds[i]:bounds[i + 1]] for i in range(n)]


# --------------------------------------------------------------------------
# file I/O

def _infer_format(path: Path, format: str | None) -> str:
    fmt = (format or path.suffix.lstrip(".")).upper()
    if fmt not in ("OFF", "OBJ"):
        raise ValueError(f"unsupported mesh format {fmt!r}; use OFF or OBJ")
    return fmt


def _fan(poly: list[int], lineno: int) -> list[tuple[int, int, int]]:
    if len(poly) < 3:
        raise NonTriangleError(f"line {lineno}: face with {len(poly)} vertices cannot be triangulated")
    return [(poly[0], poly[i], poly[i + 1]) for i in range(1, len(poly) - 1)]


def _parse_off(lines: list[str]) -> tuple[np.ndarray, np.ndarray]:
    content = []
    for lineno, raw in enumerate(lines, 1):
        text = raw.split("#", 1)[0].strip()
        if text:
            content.append((lineno, text))
    if not content:
        raise ParseError("empty file", 1)
    lineno, header = content[0]
    tokens = header.split()
    if tokens[0] != "OFF":
        raise ParseError(f"expected 'OFF' header, got {tokens[0]!r}", lineno)
    rest = content[1:]
    if len(tokens) > 1:  # counts on the header line
        rest = [(lineno, " ".join(tokens[1:]))] + rest
    if not rest:
        raise ParseError("missing counts line", lineno)
    lineno, counts = rest[0]
    try:
        n, m = (int(t) for t in counts.split()[:2])
    except ValueError:
        raise ParseError(f"malformed counts line {counts!r}", lineno) from None
    body = rest[1:]
    if len(body) < n + m:
        last = body[-1][0] if body else lineno
        raise ParseError(f"expected {n} vertices and {m} faces, file ends early", last)
    verts = np.empty((n, 3))
    for i in range(n):
        lineno, text = body[i]
        try:
            verts[i] = [float(t) for t in text.split()[:3]]
        except ValueError:
            raise ParseError(f"malformed vertex line {text!r}", lineno) from None
    faces = []
    for lineno, text in body[n:n + m]:
        try:
            vals = [int(t) for t in text.split()]
            count, poly = vals[0], vals[1:vals[0] + 1]
        except (ValueError, IndexError):
            raise ParseError(f"malformed face line {text!r}", lineno) from None
        if len(poly) != count:
            raise ParseError(f"face declares {count} vertices but lists {len(poly)}", lineno)
        for tri in _fan(poly, lineno):
            if max(tri) >= n or min(tri) < 0:
                raise IndexOutOfRange(f"line {lineno}: vertex index out of range [0, {n})")
            faces.append(tri)
    return verts, np.array(faces, dtype=np.int64).reshape(-1, 3)


def _parse_obj(lines: list[str]) -> tuple[np.ndarray, np.ndarray]:
    verts, polys = [], []
    for lineno, raw in enumerate(lines, 1):
        tokens = raw.split("#", 1)[0].split()
        if not tokens:
            continue
        if tokens[0] == "v":
            try:
                verts.append([float(t) for t in tokens[1:4]])
            except ValueError:
                raise ParseError(f"malformed vertex line {raw.strip()!r}", lineno) from None
            if len(verts[-1]) != 3:
                raise ParseError("vertex needs three coordinates", lineno)
        elif tokens[0] == "f":
            try:
                idx = [int(t.split("/")[0]) for t in tokens[1:]]
            except ValueError:
                raise ParseError(f"malformed face line {raw.strip()!r}", lineno) from None
            polys.append((lineno, idx, len(verts)))
    n = len(verts)
    faces = []
    for lineno, idx, seen in polys:
        # negative indices are relative to the vertices defined so far
        zero = [i - 1 if i > 0 else seen + i for i in idx]
        if any(i < 0 or i >= n for i in zero) or 0 in idx:
            raise IndexOutOfRange(f"line {lineno}: vertex index out of range [1, {n}]")
        faces.extend(_fan(zero, lineno))
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def load_mesh(path, format: str | None = None) -> Mesh:
    """Read an OFF or OBJ file. Polygons are fan-triangulated."""
    path = Path(path)
    fmt = _infer_format(path, format)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    verts, faces = _parse_off(lines) if fmt == "OFF" else _parse_obj(lines)
    return Mesh(verts, faces)


def save_mesh(mesh: Mesh, path, format: str | None = None) -> None:
    path = Path(path)
    fmt = _infer_format(path, format)
    out = []
    if fmt == "OFF":
        out.append("OFF")
        out.append(f"{mesh.n_vertices} {mesh.n_faces} 0")
        out.extend("%.17g %.17g %.17g" % tuple(v) for v in mesh.vertices)
        out.extend("3 %d %d %d" % tuple(f) for f in mesh.faces)
    else:
        out.extend("v %.17g %.17g %.17g" % tuple(v) for v in mesh.vertices)
        out.extend("f %d %d %d" % tuple(f + 1) for f in mesh.faces)
    try:
        path.write_text("\n".join(out) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# --------------------------------------------------------------------------
# reference shapes

def tetrahedron(side: float = 1.0) -> Mesh:
    """Regular tetrahedron with the given edge length, outward-oriented faces."""
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64)
    v *= side / (2 * np.sqrt(2))
    f = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return Mesh(v, f)


def icosahedron(radius: float = 1.0) -> Mesh:
    t = (1 + np.sqrt(5)) / 2
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    v *= radius / np.linalg.norm(v[0])
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    return Mesh(v, f)


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> Mesh:
    """Loop-style midpoint subdivision of the icosahedron projected to the sphere.

    ``subdivisions=3`` gives 642 vertices and 1280 faces.
    """
    base = icosahedron(1.0)
    verts = [tuple(p) for p in base.vertices]
    faces = base.faces.tolist()
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in cache:
                p = (np.array(verts[i]) + np.array(verts[j])) / 2
                verts.append(tuple(p / np.linalg.norm(p)))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new
    return Mesh(np.array(verts) * radius, np.array(faces))


def grid(nx: int, ny: int, spacing: float = 1.0, diagonal: str = "alternate") -> Mesh:
    """Flat (open) triangulated grid of ``nx`` by ``ny`` vertices in the z=0 plane."""
    xs, ys = np.meshgrid(np.arange(nx) * spacing, np.arange(ny) * spacing, indexing="xy")
    v = np.stack([xs.ravel(), ys.ravel(), np.zeros(nx * ny)], axis=1)
    faces = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            b, c, d = a + 1, a + nx, a + nx + 1
            if diagonal == "alternate" and (i + j) % 2:
                faces += [[a, b, c], [b, d, c]]
            else:
                faces += [[a, b, d], [a, d, c]]
    return Mesh(v, np.array(faces))
