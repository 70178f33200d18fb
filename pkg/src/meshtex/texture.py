"""Per-triangle SH textures laid out on the triangle's base/height frame.

Each texture is a ``height x width`` grid of texels whose centers sit at
``origin + col * density * base_dir + row * density * height_dir`` where
``origin = p_a + V_h / 2 + V_v / 2``. Texels whose centers fall outside the
triangle are invalid and hold frozen zero coefficients.
"""

from __future__ import annotations

import enum
import itertools
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .core import TriangleFrame, TriangleMesh, points_in_triangle, triangle_frame
from .sh import C0, num_coeffs

log = logging.getLogger(__name__)

INIT_DC = 0.5 / C0
_versions = itertools.count(1)


class Region(enum.IntEnum):
    INSIDE = 0
    EDGE = 1
    CORNER = 2
    INVALID = 3


@dataclass(eq=False)
class SHTexture:
    tri: int
    density: float
    width: int
    height: int
    origin: np.ndarray
    base_dir: np.ndarray
    height_dir: np.ndarray
    valid: np.ndarray          # (H, W) bool
    coeffs: np.ndarray         # (H, W, 3, K)
    forced: bool = False       # single centroid texel for slivers
    positions: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rows, cols = np.mgrid[0:self.height, 0:self.width]
        step_h = self.base_dir * self.density
        step_v = self.height_dir * self.density
        self.positions = (self.origin + cols[..., None] * step_h + rows[..., None] * step_v)

    @property
    def degree(self) -> int:
        return int(round(math.sqrt(self.coeffs.shape[-1]))) - 1

    @property
    def valid_count(self) -> int:
        return int(self.valid.sum())

    @property
    def n_texels(self) -> int:
        return self.width * self.height

    @cached_property
    def valid_rc(self) -> np.ndarray:
        return np.argwhere(self.valid)

    @cached_property
    def valid_flat(self) -> np.ndarray:
        return np.flatnonzero(self.valid.ravel())

    @cached_property
    def valid_pos(self) -> np.ndarray:
        return self.positions.reshape(-1, 3)[self.valid_flat]

    @cached_property
    def extremes(self) -> tuple[float, float, float, float]:
        """(top row, bottom row, leftmost col of bottom row, rightmost col of bottom row)."""
        rc = self.valid_rc
        bottom = rc[:, 0].min()
        cols = rc[rc[:, 0] == bottom, 1]
        return float(rc[:, 0].max()), float(bottom), float(cols.min()), float(cols.max())

    def world_to_uv(self, p) -> np.ndarray:
        d = np.asarray(p, dtype=np.float64) - self.origin
        return np.stack([d @ self.base_dir, d @ self.height_dir], -1) / self.density

    def copy(self) -> "SHTexture":
        return SHTexture(self.tri, self.density, self.width, self.height, self.origin.copy(),
                         self.base_dir.copy(), self.height_dir.copy(), self.valid.copy(),
                         self.coeffs.copy(), self.forced)

    def color(self, row: int, col: int, basis) -> np.ndarray:
        return self.coeffs[row, col] @ basis


def allocate_texture(mesh: TriangleMesh, frame: TriangleFrame | int, density: float,
                     degree: int = 2) -> SHTexture:
    if isinstance(frame, (int, np.integer)):
        frame = triangle_frame(mesh, int(frame))
    if not density > 0:
        raise ValueError(f"density must be positive, got {density}")
    width = max(1, int(math.floor(frame.base_length / density)))
    height = max(1, int(math.floor(frame.height_length / density)))
    step_h = frame.base_dir * density
    step_v = frame.height_dir * density
    origin = frame.origin + step_h / 2 + step_v / 2
    tex = SHTexture(frame.tri, float(density), width, height, origin, frame.base_dir.copy(),
                    frame.height_dir.copy(), np.zeros((height, width), bool),
                    np.zeros((height, width, 3, num_coeffs(degree))))
    tex.valid[:] = points_in_triangle(mesh, frame.tri, tex.positions.reshape(-1, 3)).reshape(height, width)
    if not tex.valid.any():
        centroid = mesh.vertices[mesh.triangles[frame.tri]].mean(axis=0)
        tex = SHTexture(frame.tri, float(density), 1, 1, centroid, frame.base_dir.copy(),
                        frame.height_dir.copy(), np.ones((1, 1), bool),
                        np.zeros((1, 1, 3, num_coeffs(degree))), forced=True)
    tex.coeffs[tex.valid, :, 0] = INIT_DC
    return tex


def classify_region(tex: SHTexture, mesh: TriangleMesh, p) -> Region:
    if not points_in_triangle(mesh, tex.tri, p)[0]:
        return Region.INVALID
    u, v = tex.world_to_uv(p)
    return Region(int(classify_uv(tex, np.array([u]), np.array([v]))[0]))


def classify_uv(tex: SHTexture, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Region codes for in-triangle samples given in texel coordinates."""
    i0 = np.floor(u).astype(np.int64)
    j0 = np.floor(v).astype(np.int64)
    inside = (i0 >= 0) & (j0 >= 0) & (i0 + 1 < tex.width) & (j0 + 1 < tex.height)
    if inside.any():
        ii, jj = i0[inside], j0[inside]
        val = tex.valid
        inside[inside] = val[jj, ii] & val[jj, ii + 1] & val[jj + 1, ii] & val[jj + 1, ii + 1]
    top, bottom, left, right = tex.extremes
    corner = (v > top) | ((v < bottom) & ((u < left) | (u > right)))
    return np.where(inside, Region.INSIDE, np.where(corner, Region.CORNER, Region.EDGE)).astype(np.int8)


def nearest_valid_texel(tex: SHTexture, p) -> tuple[int, int, float]:
    """Globally nearest valid texel; ties go to the lowest (row, col)."""
    if tex.valid_count == 0:
        raise ValueError(f"texture of triangle {tex.tri} has no valid texels")
    d = np.linalg.norm(tex.valid_pos - np.asarray(p, dtype=np.float64), axis=1)
    k = int(np.argmin(d))
    r, c = tex.valid_rc[k]
    return int(r), int(c), float(d[k])


class TextureSet:
    """All textures of a mesh plus a flat texel indexing used by training."""

    def __init__(self, mesh: TriangleMesh, textures: list, degree: int):
        self.mesh = mesh
        self.degree = degree
        self.textures = textures
        self._reindex()

    @classmethod
    def allocate(cls, mesh: TriangleMesh, density, degree: int = 2) -> "TextureSet":
        dens = np.broadcast_to(np.asarray(density, dtype=np.float64), (mesh.n_triangles,))
        texs = [None if mesh.degenerate[t] else allocate_texture(mesh, t, float(dens[t]), degree)
                for t in range(mesh.n_triangles)]
        return cls(mesh, texs, degree)

    def _reindex(self):
        self.version = next(_versions)
        sizes = [0 if t is None else t.n_texels for t in self.textures]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.n_texels = int(self.offsets[-1])

    def __getitem__(self, tri: int) -> SHTexture | None:
        return self.textures[tri]

    def __len__(self):
        return len(self.textures)

    def replace(self, tri: int, tex: SHTexture):
        self.replace_many({tri: tex})

    def replace_many(self, new: dict):
        """Swap in several textures at once; the flat layout is rebuilt once."""
        for tri, tex in new.items():
            self.textures[tri] = tex
        if new:
            self._reindex()

    def texel_index(self, tri, row, col):
        tex = self.textures[tri]
        return self.offsets[tri] + row * tex.width + col

    def unravel(self, index: int) -> tuple[int, int, int]:
        tri = int(np.searchsorted(self.offsets, index, side="right") - 1)
        r, c = divmod(int(index - self.offsets[tri]), self.textures[tri].width)
        return tri, r, c

    @property
    def densities(self) -> np.ndarray:
        return np.array([np.nan if t is None else t.density for t in self.textures])

    def flat_coeffs(self) -> np.ndarray:
        k = num_coeffs(self.degree)
        parts = [t.coeffs.reshape(-1, 3, k) for t in self.textures if t is not None]
        return np.concatenate(parts) if parts else np.zeros((0, 3, k))

    def flat_valid(self) -> np.ndarray:
        parts = [t.valid.ravel() for t in self.textures if t is not None]
        return np.concatenate(parts) if parts else np.zeros(0, bool)

    def set_flat_coeffs(self, flat: np.ndarray):
        for t, tex in enumerate(self.textures):
            if tex is not None:
                a, b = self.offsets[t], self.offsets[t + 1]
                tex.coeffs[...] = flat[a:b].reshape(tex.coeffs.shape)

    def copy(self) -> "TextureSet":
        return TextureSet(self.mesh, [None if t is None else t.copy() for t in self.textures], self.degree)


def resample_texture(old: SHTexture, new_density: float, mesh: TriangleMesh,
                     texset: TextureSet | None = None, idw_power: float = 0.9) -> SHTexture:
    """Reallocate ``old`` at ``new_density``, filling texels by hybrid interpolation.

    With ``texset`` given, neighbor textures take part in edge and corner
    interpolation exactly as during rendering; otherwise only ``old`` is used.
    """
    from .shade import interpolate_point

    new = allocate_texture(mesh, old.tri, new_density, old.degree)
    new.coeffs[:] = 0.0
    # both grids share the base corner and axes, so old-grid coordinates follow
    # from the indices directly (exact integers when the spacing is unchanged)
    scale = new.density / old.density
    for r, c in new.valid_rc:
        uv = None if (old.forced or new.forced) else ((c + 0.5) * scale - 0.5, (r + 0.5) * scale - 0.5)
        entries = interpolate_point(mesh, old, texset, new.positions[r, c], idw_power, uv)
        for tex, rr, cc, w in entries:
            new.coeffs[r, c] += w * tex.coeffs[rr, cc]
    return new
