"""Mesh and camera geometry.

Meshes are loaded from OBJ or PLY, carry per-edge and per-vertex adjacency and
are treated as immutable once built. Cameras follow the OpenCV convention:
x right, y down, z forward, pixel centers at integer coordinates.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

EPS_AREA = 1e-12
EPS_BARY = 1e-9
# out-of-plane tolerance, relative to the triangle's longest edge
EPS_PLANE = 1e-6


class MeshError(ValueError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray = field(init=False)
    areas: np.ndarray = field(init=False)
    degenerate: np.ndarray = field(init=False)
    edge_adjacency: dict = field(init=False)
    vertex_adjacency: dict = field(init=False)
    ignored_edges: dict = field(init=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        nv = len(self.vertices)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= nv):
            raise MeshError(f"triangle index out of range for {nv} vertices")
        p = self.vertices[self.triangles]
        cross = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        norm = np.linalg.norm(cross, axis=1)
        self.areas = 0.5 * norm
        self.degenerate = self.areas <= EPS_AREA
        safe = np.where(norm > 0, norm, 1.0)
        self.normals = cross / safe[:, None]
        self.normals[self.degenerate] = 0.0
        self._build_adjacency()

    def _build_adjacency(self):
        edges: dict[tuple[int, int], list[int]] = {}
        verts: dict[int, set] = {}
        for t, tri in enumerate(self.triangles.tolist()):
            for k in range(3):
                a, b = tri[k], tri[(k + 1) % 3]
                edges.setdefault((min(a, b), max(a, b)), []).append(t)
                verts.setdefault(tri[k], set()).add(t)
        self.edge_adjacency = {}
        self.ignored_edges = {}
        for key, tris in edges.items():
            tris = sorted(set(tris))
            # non-manifold: keep the two lowest triangle ids
            if len(tris) > 2:
                self.ignored_edges[key] = tris[2:]
            self.edge_adjacency[key] = (tris[0], tris[1] if len(tris) > 1 else None)
        self.vertex_adjacency = verts
        if self.ignored_edges:
            log.warning("%d non-manifold edges; extra incident triangles ignored", len(self.ignored_edges))

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def edge_neighbor(self, tri: int, a: int, b: int):
        """Triangle across edge (a, b) of ``tri``, or None on a boundary."""
        t0, t1 = self.edge_adjacency[(min(a, b), max(a, b))]
        if t0 == tri:
            return t1
        return t0 if t1 == tri else None

    def vertex_neighbors(self, tri: int, v: int) -> list[int]:
        return sorted(t for t in self.vertex_adjacency.get(v, ()) if t != tri)

    @cached_property
    def edge_neighbor_table(self) -> np.ndarray:
        """(F, 3) triangle across edge (v_k, v_k+1) of each triangle, -1 on boundaries."""
        out = np.full((self.n_triangles, 3), -1, np.int64)
        for t, tri in enumerate(self.triangles.tolist()):
            for k in range(3):
                nb = self.edge_neighbor(t, tri[k], tri[(k + 1) % 3])
                out[t, k] = -1 if nb is None else nb
        return out

    @cached_property
    def vertex_neighbor_table(self) -> list:
        """Per triangle, per corner k: sorted other triangles sharing vertex k."""
        return [[self.vertex_neighbors(t, v) for v in tri] for t, tri in enumerate(self.triangles.tolist())]


@dataclass(frozen=True)
class TriangleFrame:
    tri: int
    base_start: int
    base_end: int
    apex: int
    origin: np.ndarray  # position of base_start
    foot: np.ndarray
    base_length: float
    height_length: float
    base_dir: np.ndarray
    height_dir: np.ndarray


def triangle_frame(mesh: TriangleMesh, tri: int) -> TriangleFrame:
    """Frame spanned by the longest edge (base) and the altitude onto it.

    Ties on the longest edge go to the smallest ``(min vid, max vid)`` key.
    ``base_start`` is the lower vertex id of the base edge.
    """
    if mesh.degenerate[tri]:
        raise MeshError(f"triangle {tri} is degenerate")
    ids = [int(i) for i in mesh.triangles[tri]]
    cands = []
    for k in range(3):
        a, b = ids[k], ids[(k + 1) % 3]
        key = (min(a, b), max(a, b))
        length = float(np.linalg.norm(mesh.vertices[a] - mesh.vertices[b]))
        cands.append((-length, key))
    _, (a, b) = min(cands)
    apex = next(i for i in ids if i not in (a, b))
    pa, pb, pc = mesh.vertices[a], mesh.vertices[b], mesh.vertices[apex]
    base = pb - pa
    base_length = float(np.linalg.norm(base))
    base_dir = base / base_length
    foot = pa + np.dot(pc - pa, base_dir) * base_dir
    h = pc - foot
    height_length = float(np.linalg.norm(h))
    return TriangleFrame(tri, a, b, apex, pa.copy(), foot, base_length, height_length,
                         base_dir, h / height_length)


def barycentric_batch(mesh: TriangleMesh, tri: int, pts) -> np.ndarray:
    """Barycentric coordinates of the in-plane projection of (N, 3) points."""
    a, b, c = mesh.vertices[mesh.triangles[tri]]
    v0, v1 = b - a, c - a
    v2 = np.asarray(pts, dtype=np.float64).reshape(-1, 3) - a
    d00, d01, d11 = v0 @ v0, v0 @ v1, v1 @ v1
    d20, d21 = v2 @ v0, v2 @ v1
    den = d00 * d11 - d01 * d01
    w1 = (d11 * d20 - d01 * d21) / den
    w2 = (d00 * d21 - d01 * d20) / den
    return np.stack([1.0 - w1 - w2, w1, w2], axis=-1)


def barycentric(mesh: TriangleMesh, tri: int, p) -> np.ndarray:
    return barycentric_batch(mesh, tri, p)[0]


def points_in_triangle(mesh: TriangleMesh, tri: int, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if mesh.degenerate[tri]:
        return np.zeros(len(pts), dtype=bool)
    a, b, c = mesh.vertices[mesh.triangles[tri]]
    scale = max(np.linalg.norm(b - a), np.linalg.norm(c - b), np.linalg.norm(a - c))
    in_plane = np.abs((pts - a) @ mesh.normals[tri]) <= EPS_PLANE * scale
    return in_plane & np.all(barycentric_batch(mesh, tri, pts) >= -EPS_BARY, axis=1)


def point_in_triangle(mesh: TriangleMesh, tri: int, p) -> bool:
    """Boundary-inclusive membership test; points off the plane are outside."""
    return bool(points_in_triangle(mesh, tri, p)[0])


@dataclass
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    T_wc: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.T_wc = np.asarray(self.T_wc, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        R = self.T_wc[:3, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")

    @property
    def R(self) -> np.ndarray:
        return self.T_wc[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.T_wc[:3, 3]

    def world_to_camera(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return (p - self.center) @ self.R

    def pixel_rays(self, xs, ys) -> np.ndarray:
        """Camera-frame ray directions with unit z for pixel coordinates."""
        xs, ys = np.broadcast_arrays(np.asarray(xs, float), np.asarray(ys, float))
        return np.stack([(xs - self.cx) / self.fx, (ys - self.cy) / self.fy, np.ones_like(xs)], -1)

    def to_json(self) -> dict:
        return {"width": self.width, "height": self.height, "fx": self.fx, "fy": self.fy,
                "cx": self.cx, "cy": self.cy, "T_wc": self.T_wc.reshape(-1).tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        try:
            return cls(int(d["width"]), int(d["height"]), float(d["fx"]), float(d["fy"]),
                       float(d["cx"]), float(d["cy"]), np.array(d["T_wc"], dtype=np.float64))
        except KeyError as e:
            raise ValueError(f"camera entry missing key {e}") from None


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-from-camera pose looking from ``eye`` at ``target`` (OpenCV axes)."""
    eye = np.asarray(eye, float)
    z = np.asarray(target, float) - eye
    z /= np.linalg.norm(z)
    up = np.asarray(up, float)
    if abs(np.dot(z, up)) > 0.999:
        up = np.array([0.0, 1.0, 0.0]) if abs(z[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    T = np.eye(4)
    T[:3, 0], T[:3, 1], T[:3, 2], T[:3, 3] = x, y, z, eye
    return T


def load_cameras(path) -> list[Camera]:
    with open(path) as f:
        data = json.load(f)
    if isinstance(data, dict):
        data = data.get("cameras", [data])
    return [Camera.from_json(d) for d in data]


def save_cameras(cams, path):
    with open(path, "w") as f:
        json.dump([c.to_json() for c in cams], f, indent=1)


def frustum_visible(mesh: TriangleMesh, cam: Camera, z_near: float = 1e-3) -> set[int]:
    """Conservative set of triangles that may cover at least one pixel.

    Triangles are clipped against the near plane before their projected
    bounding box is tested against the image rectangle.
    """
    pc = cam.world_to_camera(mesh.vertices)
    xmin, xmax = -0.5, cam.width - 0.5
    ymin, ymax = -0.5, cam.height - 0.5
    out = set()
    for t, tri in enumerate(mesh.triangles):
        if mesh.degenerate[t]:
            continue
        poly = _clip_near(pc[tri], z_near)
        if not poly:
            continue
        poly = np.array(poly)
        x = cam.fx * poly[:, 0] / poly[:, 2] + cam.cx
        y = cam.fy * poly[:, 1] / poly[:, 2] + cam.cy
        if x.max() >= xmin and x.min() <= xmax and y.max() >= ymin and y.min() <= ymax:
            out.add(t)
    return out


def _clip_near(pts, z_near):
    out = []
    n = len(pts)
    for i in range(n):
        p, q = pts[i], pts[(i + 1) % n]
        pin, qin = p[2] > z_near, q[2] > z_near
        if pin:
            out.append(p)
        if pin != qin:
            s = (z_near - p[2]) / (q[2] - p[2])
            out.append(p + s * (q - p))
    return out


# ---------------------------------------------------------------- mesh files

def load_mesh(path) -> TriangleMesh:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        v, f = _read_obj(path)
    elif suffix == ".ply":
        v, f = _read_ply(path)
    else:
        raise MeshError(f"unsupported mesh format: {suffix}")
    return TriangleMesh(v, f)


def _read_obj(path):
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                    if len(idx) != 3:
                        raise MeshError(f"{path}:{lineno}: non-triangular face")
                    faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
            except ValueError as e:
                if isinstance(e, MeshError):
                    raise
                raise MeshError(f"{path}:{lineno}: cannot parse {line.strip()!r}") from None
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


_PLY_TYPES = {"char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1", "short": "i2", "int16": "i2",
              "ushort": "u2", "uint16": "u2", "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
              "float": "f4", "float32": "f4", "double": "f8", "float64": "f8"}


def _read_ply(path):
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise MeshError(f"{path}: not a PLY file")
        fmt = None
        elements = []
        while True:
            line = fh.readline()
            if not line:
                raise MeshError(f"{path}: truncated header")
            tok = line.decode("ascii", "replace").split()
            if not tok or tok[0] in ("comment", "obj_info"):
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                elements.append((tok[1], int(tok[2]), []))
            elif tok[0] == "property":
                if tok[1] == "list":
                    elements[-1][2].append((tok[4], _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
                else:
                    elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]], None))
            elif tok[0] == "end_header":
                break
        if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
            raise MeshError(f"{path}: unsupported PLY format {fmt}")
        if fmt == "ascii":
            words = fh.read().split()
            return _ply_ascii(path, elements, words)
        end = "<" if fmt == "binary_little_endian" else ">"
        return _ply_binary(path, elements, fh.read(), end)


def _ply_ascii(path, elements, words):
    pos = 0
    verts = faces = None
    try:
        for name, count, props in elements:
            rows = []
            for _ in range(count):
                row = {}
                for pname, t, lt in props:
                    if lt is None:
                        row[pname] = float(words[pos])
                        pos += 1
                    else:
                        n = int(words[pos])
                        row[pname] = [int(w) for w in words[pos + 1:pos + 1 + n]]
                        pos += 1 + n
                rows.append(row)
            if name == "vertex":
                verts = [[r["x"], r["y"], r["z"]] for r in rows]
            elif name == "face":
                key = "vertex_indices" if props and any(p[0] == "vertex_indices" for p in props) else props[0][0]
                faces = [r[key] for r in rows]
    except (IndexError, ValueError, KeyError):
        raise MeshError(f"{path}: malformed PLY body") from None
    return _ply_finish(path, verts, faces)


def _ply_binary(path, elements, buf, end):
    pos = 0
    verts = faces = None
    try:
        for name, count, props in elements:
            if all(lt is None for _, _, lt in props):
                dt = np.dtype([(p, end + t) for p, t, _ in props])
                arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos)
                pos += dt.itemsize * count
                if name == "vertex":
                    verts = np.stack([arr["x"], arr["y"], arr["z"]], 1).astype(np.float64)
                continue
            rows = []
            for _ in range(count):
                row = {}
                for pname, t, lt in props:
                    if lt is None:
                        dt = np.dtype(end + t)
                        row[pname] = np.frombuffer(buf, dt, 1, pos)[0]
                        pos += dt.itemsize
                    else:
                        ct, it = np.dtype(end + t), np.dtype(end + lt)
                        n = int(np.frombuffer(buf, ct, 1, pos)[0])
                        pos += ct.itemsize
                        row[pname] = np.frombuffer(buf, it, n, pos).tolist()
                        pos += it.itemsize * n
                rows.append(row)
            if name == "face":
                key = "vertex_indices" if any(p[0] == "vertex_indices" for p in props) else props[0][0]
                faces = [r[key] for r in rows]
    except (ValueError, KeyError):
        raise MeshError(f"{path}: malformed PLY body") from None
    return _ply_finish(path, verts, faces)


def _ply_finish(path, verts, faces):
    if verts is None:
        raise MeshError(f"{path}: no vertex element")
    faces = faces or []
    if any(len(f) != 3 for f in faces):
        raise MeshError(f"{path}: non-triangular face")
    return np.asarray(verts, dtype=np.float64).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3)


def save_obj(mesh: TriangleMesh, path):
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write("v " + " ".join(repr(float(x)) for x in v) + "\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
