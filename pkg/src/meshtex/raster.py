"""Deferred software rasterization into a per-pixel G-buffer.

Coverage uses homogeneous edge functions: for a pixel ray ``d`` and camera-space
vertices ``P0, P1, P2`` the barycentric weights of the ray/plane hit are
proportional to ``d . (P1 x P2)``, ``d . (P2 x P0)``, ``d . (P0 x P1)``. These are
linear in screen coordinates and already perspective correct, so triangles
crossing the near plane need no polygon clipping; the hit depth is tested per
pixel instead.

Texture coordinates are computed analytically from the hit point rather than
read from a bound texture, so no placeholder textures are needed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Camera, TriangleMesh

BACKGROUND = -1


@dataclass
class GBuffer:
    tri_id: np.ndarray     # (H, W) int, BACKGROUND where uncovered
    bary: np.ndarray       # (H, W, 3)
    world_pos: np.ndarray  # (H, W, 3)
    view_dir: np.ndarray   # (H, W, 3) unit, from surface point toward the camera
    depth: np.ndarray      # (H, W) camera z
    uv: np.ndarray         # (H, W, 2) texel units, integers at texel centers
    duv_dx: np.ndarray     # (H, W, 2)
    duv_dy: np.ndarray     # (H, W, 2)
    lod: np.ndarray        # (H, W)

    @property
    def covered(self) -> np.ndarray:
        return self.tri_id != BACKGROUND

    @property
    def shape(self):
        return self.tri_id.shape


def project(cam: Camera, p_world) -> tuple[float, float, float]:
    """Pinhole projection; returns NaN pixel coordinates for points not in front."""
    X, Y, Z = cam.world_to_camera(p_world)
    if Z <= 0:
        return float("nan"), float("nan"), float(Z)
    return cam.fx * X / Z + cam.cx, cam.fy * Y / Z + cam.cy, float(Z)


def _accept(e, a, b):
    # top-left rule: zero-valued edge functions accepted only for one edge orientation
    return (e > 0) | ((e == 0) & ((a > 0) | ((a == 0) & (b > 0))))


def rasterize(mesh: TriangleMesh, cam: Camera, visible=None, textures=None,
              z_near: float = 1e-3) -> GBuffer:
    """Z-buffered rasterization of ``visible`` triangles (default: all).

    With ``textures`` (a TextureSet) the G-buffer also carries texel-space uv,
    their analytic screen derivatives and the LOD.
    """
    H, W = cam.height, cam.width
    tri_id = np.full((H, W), BACKGROUND, dtype=np.int64)
    zbuf = np.full((H, W), np.inf)
    bary = np.full((H, W, 3), np.nan)
    tris = range(mesh.n_triangles) if visible is None else sorted(visible)
    pc = cam.world_to_camera(mesh.vertices)
    for t in tris:
        if mesh.degenerate[t]:
            continue
        P = pc[mesh.triangles[t]]
        V = float(np.dot(P[0], np.cross(P[1], P[2])))
        if V == 0.0:
            continue  # plane passes through the camera center
        sgn = 1.0 if V > 0 else -1.0
        if np.all(P[:, 2] > z_near):
            px = cam.fx * P[:, 0] / P[:, 2] + cam.cx
            py = cam.fy * P[:, 1] / P[:, 2] + cam.cy
            x0, x1 = max(0, int(np.ceil(px.min()))), min(W - 1, int(np.floor(px.max())))
            y0, y1 = max(0, int(np.ceil(py.min()))), min(H - 1, int(np.floor(py.max())))
        elif np.all(P[:, 2] <= z_near):
            continue
        else:
            x0, x1, y0, y1 = 0, W - 1, 0, H - 1
        if x0 > x1 or y0 > y1:
            continue
        ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        d = cam.pixel_rays(xs, ys)
        n = sgn * np.stack([np.cross(P[1], P[2]), np.cross(P[2], P[0]), np.cross(P[0], P[1])])
        e = d @ n.T
        # edge function e_i = n_i . d, coefficients of x and y
        ok = np.ones(xs.shape, bool)
        for i in range(3):
            ok &= _accept(e[..., i], n[i, 0] / cam.fx, n[i, 1] / cam.fy)
        E = e.sum(-1)
        ok &= E > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            depth = abs(V) / E
        ok &= depth > z_near
        ok &= depth < zbuf[y0:y1 + 1, x0:x1 + 1]
        if not ok.any():
            continue
        yy, xx = ys[ok], xs[ok]
        zbuf[yy, xx] = depth[ok]
        tri_id[yy, xx] = t
        bary[yy, xx] = e[ok] / E[ok][:, None]
    gb = GBuffer(tri_id, bary, np.full((H, W, 3), np.nan), np.full((H, W, 3), np.nan),
                 np.where(tri_id >= 0, zbuf, np.nan), np.full((H, W, 2), np.nan),
                 np.full((H, W, 2), np.nan), np.full((H, W, 2), np.nan), np.full((H, W), np.nan))
    cov = tri_id >= 0
    ids = tri_id[cov]
    verts = mesh.vertices[mesh.triangles[ids]]
    wp = np.einsum("pi,pij->pj", bary[cov], verts)
    gb.world_pos[cov] = wp
    vd = cam.center - wp
    gb.view_dir[cov] = vd / np.linalg.norm(vd, axis=1, keepdims=True)
    if textures is not None:
        _fill_uv(gb, mesh, cam, textures)
    return gb


def _fill_uv(gb: GBuffer, mesh, cam, textures):
    ys, xs = np.nonzero(gb.covered)
    ids = gb.tri_id[ys, xs]
    r = cam.pixel_rays(xs, ys) @ cam.R.T
    r_x = cam.R[:, 0] / cam.fx
    r_y = cam.R[:, 1] / cam.fy
    o = cam.center
    for t in np.unique(ids):
        tex = textures[t]
        sel = ids == t
        yy, xx = ys[sel], xs[sel]
        gb.uv[yy, xx] = tex.world_to_uv(gb.world_pos[yy, xx])
        n = mesh.normals[t]
        h = np.dot(n, mesh.vertices[mesh.triangles[t, 0]] - o)
        rr = r[sel]
        nr = rr @ n
        for dr, out in ((r_x, gb.duv_dx), (r_y, gb.duv_dy)):
            dX = h * (dr[None, :] * nr[:, None] - rr * np.dot(n, dr)) / (nr ** 2)[:, None]
            out[yy, xx] = np.stack([dX @ tex.base_dir, dX @ tex.height_dir], -1) / tex.density
    cov = gb.covered
    m = np.maximum(np.linalg.norm(gb.duv_dx[cov], axis=1), np.linalg.norm(gb.duv_dy[cov], axis=1))
    with np.errstate(divide="ignore"):
        gb.lod[cov] = np.log2(m)


def uv_derivatives(gbuf: GBuffer, x: int, y: int) -> tuple[np.ndarray, np.ndarray]:
    if gbuf.tri_id[y, x] == BACKGROUND:
        raise ValueError(f"pixel ({x}, {y}) is not covered")
    return gbuf.duv_dx[y, x].copy(), gbuf.duv_dy[y, x].copy()


def lod(duv_dx, duv_dy) -> float:
    return float(np.log2(max(np.linalg.norm(duv_dx), np.linalg.norm(duv_dy))))


def save_gbuffer_debug(gbuf: GBuffer, out_dir, prefix: str = "gbuf"):
    """Write tri-id (hashed colors), depth and LOD channels as PNG images."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cov = gbuf.covered
    ids = gbuf.tri_id.astype(np.uint64)
    h = (ids * np.uint64(2654435761)) & np.uint64(0xFFFFFF)
    rgb = np.stack([(h >> np.uint64(s)) & np.uint64(255) for s in (16, 8, 0)], -1).astype(np.uint8)
    rgb[~cov] = 0
    Image.fromarray(rgb).save(out / f"{prefix}_tri.png")
    for name, ch in (("depth", gbuf.depth), ("lod", gbuf.lod)):
        img = np.zeros(ch.shape, np.uint8)
        if cov.any():
            v = ch[cov]
            lo, hi = float(v.min()), float(v.max())
            img[cov] = np.round(255 * (v - lo) / (hi - lo if hi > lo else 1.0)).astype(np.uint8)
        Image.fromarray(img).save(out / f"{prefix}_{name}.png")
