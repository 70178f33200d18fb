"""Per-pixel color synthesis from SH textures.

Every covered pixel resolves to a short list of ``(texel, weight)``
contributions that sum to one, plus the SH basis evaluated at the pixel's
view direction. The pixel color is ``sum_i w_i * coeffs_i @ basis``, so the
image is a linear function of the texel coefficients once geometry is fixed;
:class:`ShadingPlan` stores that linear map for a view so the training loop can
render and back-propagate with array operations only.

Near views use hybrid interpolation (bilinear in the Inside region, inverse
distance weighting with texels of adjacent textures on Edge/Corner regions).
Pixels whose LOD exceeds ``lod_threshold`` use an elliptical weighted average
evaluated in world space, which may also pull texels from adjacent textures.
"""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import Camera, TriangleMesh, frustum_visible
from .raster import GBuffer, rasterize
from .sh import sh_basis_batch
from .texture import Region, SHTexture, TextureSet, classify_uv, nearest_valid_texel

log = logging.getLogger(__name__)

HYBRID, EWA = 0, 1
_plan_ids = itertools.count(1)


@dataclass
class ShadeConfig:
    lod_threshold: float = 1.0
    idw_power: float = 0.9
    ewa: bool = True
    max_radius: float = 16.0     # texels
    ewa_alpha: float = 2.0       # Gaussian falloff, weight exp(-alpha * Q / F)
    normal_gate_deg: float = 15.0
    background: tuple = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class Contribution:
    tri: int
    row: int
    col: int
    weight: float
    basis: np.ndarray


@dataclass(frozen=True)
class WorldEllipse:
    center: np.ndarray
    A: float
    B: float
    C: float
    F: float
    density: float

    def q(self, du, dv):
        return self.A * du * du + self.B * du * dv + self.C * dv * dv

    def uv_halfwidths(self) -> tuple[float, float]:
        det = 4 * self.A * self.C - self.B ** 2
        return math.sqrt(4 * self.C * self.F / det), math.sqrt(4 * self.A * self.F / det)


def ellipse_from_derivatives(center, duv_dx, duv_dy, density: float,
                             max_radius: float = 16.0) -> WorldEllipse:
    """Heckbert's conic for the back-projected unit pixel circle, in texel units.

    A unit variance reconstruction term is added to A and C, which keeps the
    conic positive definite even for degenerate derivatives.
    """
    J = np.array([[duv_dx[0], duv_dy[0]], [duv_dx[1], duv_dy[1]]], dtype=np.float64)
    major = float(np.linalg.svd(J, compute_uv=False)[0])
    if major > max_radius:
        J *= max_radius / major
    (ux, uy), (vx, vy) = J
    A = vx * vx + vy * vy + 1.0
    B = -2.0 * (ux * vx + uy * vy)
    C = ux * ux + uy * uy + 1.0
    F = A * C - B * B / 4.0
    return WorldEllipse(np.asarray(center, dtype=np.float64), A, B, C, F, density)


# ---------------------------------------------------------------- neighbors

def _seg_dist(p, a, b):
    ab = b - a
    s = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0.0, 1.0)
    return float(np.linalg.norm(p - (a + s * ab)))


def select_neighbors(mesh: TriangleMesh, tri: int, region, p) -> list[int]:
    """Adjacent triangles consulted for a sample in the Edge or Corner region.

    Edge: the triangle across the edge nearest to ``p`` (none on a boundary).
    Corner: every other triangle sharing the vertex nearest to ``p``.
    """
    p = np.asarray(p, dtype=np.float64)
    ids = [int(i) for i in mesh.triangles[tri]]
    pts = mesh.vertices[ids]
    if region == Region.EDGE:
        d = [_seg_dist(p, pts[k], pts[(k + 1) % 3]) for k in range(3)]
        k = int(np.argmin(d))
        nb = mesh.edge_neighbor(tri, ids[k], ids[(k + 1) % 3])
        return [] if nb is None else [nb]
    if region == Region.CORNER:
        k = int(np.argmin(np.linalg.norm(pts - p, axis=1)))
        return mesh.vertex_neighbors(tri, ids[k])
    return []


# ---------------------------------------------------------------- hybrid

def _enclosing_valid(tex: SHTexture, u: float, v: float) -> list[tuple[int, int]]:
    i0, j0 = math.floor(u), math.floor(v)
    out = []
    for r, c in ((j0, i0), (j0, i0 + 1), (j0 + 1, i0), (j0 + 1, i0 + 1)):
        if 0 <= r < tex.height and 0 <= c < tex.width and tex.valid[r, c]:
            out.append((r, c))
    return out


def bilinear_entries(tex: SHTexture, u: float, v: float) -> list:
    i0, j0 = math.floor(u), math.floor(v)
    fu, fv = u - i0, v - j0
    cand = (((j0, i0), (1 - fu) * (1 - fv)), ((j0, i0 + 1), fu * (1 - fv)),
            ((j0 + 1, i0), (1 - fu) * fv), ((j0 + 1, i0 + 1), fu * fv))
    return [(tex, r, c, w) for (r, c), w in cand if w != 0.0]


def idw_entries(p, texels: list, power: float = 0.9, zero_tol: float = 0.0) -> list:
    """Inverse distance weights ``d ** -power`` over ``(tex, row, col)`` texels.

    A texel at distance ``<= zero_tol`` takes the whole weight.
    """
    p = np.asarray(p, dtype=np.float64)
    d = np.array([np.linalg.norm(tex.positions[r, c] - p) for tex, r, c in texels])
    hit = np.flatnonzero(d <= zero_tol)
    if len(hit):
        tex, r, c = texels[hit[0]]
        return [(tex, r, c, 1.0)]
    w = d ** -power
    w /= w.sum()
    return [(tex, r, c, float(wi)) for (tex, r, c), wi in zip(texels, w)]


def hybrid_entries(tex: SHTexture, uv, p, region, neighbor_texs, power: float = 0.9) -> list:
    """Hybrid interpolation at world point ``p`` with texel coordinates ``uv``."""
    u, v = float(uv[0]), float(uv[1])
    if region == Region.INSIDE:
        return bilinear_entries(tex, u, v)
    sel = [(tex, r, c) for r, c in _enclosing_valid(tex, u, v)]
    if not sel:
        r, c, _ = nearest_valid_texel(tex, p)
        sel.append((tex, r, c))
    for nt in neighbor_texs:
        if nt is not None and nt.valid_count:
            r, c, _ = nearest_valid_texel(nt, p)
            sel.append((nt, r, c))
    return idw_entries(p, sel, power, zero_tol=1e-12 * tex.density)


def hybrid_interpolate(tex: SHTexture, uv, world_pos, view_dir, region, neighbor_texs,
                       power: float = 0.9):
    """RGB (pre-clamp) and contributions of the hybrid interpolator at one sample."""
    basis = sh_basis_batch(np.asarray(view_dir)[None], tex.degree)[0]
    entries = hybrid_entries(tex, uv, world_pos, region, neighbor_texs, power)
    return _entries_rgb(entries, basis)


def _entries_rgb(entries, basis):
    rgb = np.zeros(3)
    contribs = []
    for t, r, c, w in entries:
        rgb += w * (t.coeffs[r, c] @ basis)
        contribs.append(Contribution(t.tri, int(r), int(c), float(w), basis))
    return rgb, contribs


def interpolate_point(mesh: TriangleMesh, tex: SHTexture, texset: TextureSet | None, p,
                      power: float = 0.9, uv=None) -> list:
    """Hybrid interpolation entries at an arbitrary in-triangle world point."""
    u, v = tex.world_to_uv(p) if uv is None else uv
    region = Region(int(classify_uv(tex, np.array([u]), np.array([v]))[0]))
    nbrs = []
    if texset is not None and region != Region.INSIDE:
        nbrs = [texset[t] for t in select_neighbors(mesh, tex.tri, region, p)]
    return hybrid_entries(tex, (u, v), p, region, nbrs, power)


# ---------------------------------------------------------------- EWA

def ewa_entries(tex: SHTexture, ellipse: WorldEllipse, uv, neighbor_texs, normals=None,
                self_normal=None, gate_deg: float = 15.0, alpha: float = 2.0):
    """Elliptical weighted average over self and (gated) neighbor texels.

    Neighbor texels are expressed in the self texture's 2D frame, which treats
    adjacent triangles as coplanar; neighbors tilted more than ``gate_deg``
    are skipped. Returns None when no texel falls inside the ellipse.
    """
    u, v = float(uv[0]), float(uv[1])
    hu, hv = ellipse.uv_halfwidths()
    c0, c1 = max(0, math.ceil(u - hu)), min(tex.width - 1, math.floor(u + hu))
    r0, r1 = max(0, math.ceil(v - hv)), min(tex.height - 1, math.floor(v + hv))
    cand = []
    qs = []
    if c0 <= c1 and r0 <= r1:
        rr, cc = np.mgrid[r0:r1 + 1, c0:c1 + 1]
        ok = tex.valid[rr, cc]
        rr, cc = rr[ok], cc[ok]
        q = ellipse.q(cc - u, rr - v)
        keep = q <= ellipse.F
        cand += [(tex, int(r), int(c)) for r, c in zip(rr[keep], cc[keep])]
        qs.append(q[keep])
    cos_gate = math.cos(math.radians(gate_deg))
    for nt in neighbor_texs:
        if nt is None or not nt.valid_count:
            continue
        if normals is not None and np.dot(normals[nt.tri], self_normal) < cos_gate:
            continue
        d = (nt.valid_pos - ellipse.center)
        du = d @ tex.base_dir / tex.density
        dv = d @ tex.height_dir / tex.density
        q = ellipse.q(du, dv)
        keep = q <= ellipse.F
        cand += [(nt, int(r), int(c)) for r, c in nt.valid_rc[keep]]
        qs.append(q[keep])
    if not cand:
        return None
    q = np.concatenate(qs)
    w = np.exp(-alpha * q / ellipse.F)
    w /= w.sum()
    return [(t, r, c, float(wi)) for (t, r, c), wi in zip(cand, w)]


def ewa_filter(tex: SHTexture, ellipse: WorldEllipse, uv, view_dir, region, neighbor_texs,
               mesh: TriangleMesh, cfg: ShadeConfig | None = None):
    cfg = cfg or ShadeConfig()
    basis = sh_basis_batch(np.asarray(view_dir)[None], tex.degree)[0]
    entries = ewa_entries(tex, ellipse, uv, neighbor_texs, mesh.normals, mesh.normals[tex.tri],
                          cfg.normal_gate_deg, cfg.ewa_alpha)
    if entries is None:
        entries = hybrid_entries(tex, uv, ellipse.center, region, neighbor_texs, cfg.idw_power)
    return _entries_rgb(entries, basis)


# ---------------------------------------------------------------- per pixel

def pixel_entries(mesh: TriangleMesh, texset: TextureSet, gbuf: GBuffer, y: int, x: int,
                  region, cfg: ShadeConfig, active=None) -> tuple[list, int]:
    """Contributions and shading path for one covered pixel.

    ``active`` (bool per triangle) restricts neighbor textures to the view's
    working set; textures outside it are treated like a mesh boundary.
    """
    tri = int(gbuf.tri_id[y, x])
    tex = texset[tri]
    p = gbuf.world_pos[y, x]
    uv = gbuf.uv[y, x]
    nbrs = []
    if region != Region.INSIDE:
        nbrs = [texset[t] for t in select_neighbors(mesh, tri, region, p)
                if active is None or active[t]]
    if cfg.ewa and gbuf.lod[y, x] > cfg.lod_threshold:
        ell = ellipse_from_derivatives(p, gbuf.duv_dx[y, x], gbuf.duv_dy[y, x], tex.density,
                                       cfg.max_radius)
        entries = ewa_entries(tex, ell, uv, nbrs, mesh.normals, mesh.normals[tri],
                              cfg.normal_gate_deg, cfg.ewa_alpha)
        if entries is not None:
            return entries, EWA
    return hybrid_entries(tex, uv, p, region, nbrs, cfg.idw_power), HYBRID


def shade_pixel(gbuf: GBuffer, x: int, y: int, texset: TextureSet, mesh: TriangleMesh,
                cfg: ShadeConfig | None = None, active=None):
    """Pre-clamp RGB and contribution list for one covered pixel."""
    cfg = cfg or ShadeConfig()
    tri = int(gbuf.tri_id[y, x])
    if tri < 0:
        raise ValueError(f"pixel ({x}, {y}) is not covered")
    tex = texset[tri]
    if tex is None:
        raise RuntimeError(f"no texture for triangle {tri}")
    u, v = gbuf.uv[y, x]
    region = Region(int(classify_uv(tex, np.array([u]), np.array([v]))[0]))
    entries, _ = pixel_entries(mesh, texset, gbuf, y, x, region, cfg, active)
    basis = sh_basis_batch(gbuf.view_dir[y, x][None], texset.degree)[0]
    return _entries_rgb(entries, basis)


# ---------------------------------------------------------------- batched hybrid

def _nearest_features(mesh: TriangleMesh, tri: np.ndarray, p: np.ndarray):
    """Index of the nearest edge (v_k, v_k+1) and nearest corner for each sample."""
    v = mesh.vertices[mesh.triangles[tri]]                 # (P, 3, 3)
    a, b = v, np.roll(v, -1, axis=1)
    ab = b - a
    s = np.einsum("pkj,pkj->pk", p[:, None] - a, ab) / np.einsum("pkj,pkj->pk", ab, ab)
    closest = a + np.clip(s, 0.0, 1.0)[..., None] * ab
    de = np.linalg.norm(p[:, None] - closest, axis=2)
    dv = np.linalg.norm(p[:, None] - v, axis=2)
    return np.argmin(de, axis=1), np.argmin(dv, axis=1)


def _nearest_in(tex: SHTexture, pts: np.ndarray):
    d = np.linalg.norm(pts[:, None, :] - tex.valid_pos[None], axis=2)
    k = np.argmin(d, axis=1)
    return tex.valid_flat[k], d[np.arange(len(pts)), k]


def hybrid_batch(mesh: TriangleMesh, texset: TextureSet, tri, uv, p, region,
                 power: float = 0.9, active=None):
    """Vectorized :func:`hybrid_entries` for Edge/Corner samples.

    Returns flat ``(sample, texel, weight)`` arrays with texel indices into
    the texture set's flat layout. ``active`` is as in :func:`pixel_entries`.
    """
    n = len(tri)
    if n == 0:
        z = np.zeros(0, np.int64)
        return z, z, np.zeros(0)
    valid = texset.flat_valid()
    widths = np.array([0 if t is None else t.width for t in texset.textures])
    heights = np.array([0 if t is None else t.height for t in texset.textures])
    dens = np.nan_to_num(texset.densities)
    off = texset.offsets[tri]
    w_, h_ = widths[tri], heights[tri]
    i0 = np.floor(uv[:, 0]).astype(np.int64)
    j0 = np.floor(uv[:, 1]).astype(np.int64)
    ids, idx, seq = [], [], []
    slot = 0
    have_self = np.zeros(n, bool)
    for dr, dc in ((0, 0), (0, 1), (1, 0), (1, 1)):
        r, c = j0 + dr, i0 + dc
        ok = (r >= 0) & (r < h_) & (c >= 0) & (c < w_)
        k = off + np.where(ok, r * w_ + c, 0)
        ok &= valid[k]
        have_self |= ok
        ids.append(np.flatnonzero(ok)), idx.append(k[ok]), seq.append(np.full(ok.sum(), slot))
        slot += 1
    for t in np.unique(tri[~have_self]):
        sel = np.flatnonzero(~have_self & (tri == t))
        k, _ = _nearest_in(texset[t], p[sel])
        ids.append(sel), idx.append(texset.offsets[t] + k), seq.append(np.full(len(sel), slot))
    slot += 1
    ke, kv = _nearest_features(mesh, tri, p)
    edge_tab = mesh.edge_neighbor_table
    vert_tab = mesh.vertex_neighbor_table
    groups: dict = {}
    for s in range(n):
        if region[s] == Region.EDGE:
            nb = edge_tab[tri[s], ke[s]]
            nbs = () if nb < 0 else (int(nb),)
        else:
            nbs = tuple(vert_tab[tri[s]][kv[s]])
        if active is not None:
            nbs = tuple(t for t in nbs if active[t])
        if nbs:
            groups.setdefault(nbs, []).append(s)
    for nbs, members in groups.items():
        members = np.array(members)
        for j, nb in enumerate(nbs):
            nt = texset[nb]
            if nt is None or not nt.valid_count:
                continue
            k, _ = _nearest_in(nt, p[members])
            ids.append(members), idx.append(texset.offsets[nb] + k), seq.append(np.full(len(members), slot + j))
    ids = np.concatenate(ids)
    idx = np.concatenate(idx).astype(np.int64)
    seq = np.concatenate(seq)
    order = np.lexsort((seq, ids))
    ids, idx = ids[order], idx[order]
    pos = _flat_positions(texset)[idx]
    d = np.linalg.norm(pos - p[ids], axis=1)
    zero = d <= 1e-12 * dens[tri[ids]]
    w = np.zeros(len(d))
    nz = ~zero
    w[nz] = d[nz] ** -power
    if zero.any():
        # exact hit: first zero-distance texel of the sample takes all the weight
        zi = np.flatnonzero(zero)
        hit_samples, first = np.unique(ids[zi], return_index=True)
        w[np.isin(ids, hit_samples)] = 0.0
        w[zi[first]] = 1.0
    w /= np.bincount(ids, w, minlength=n)[ids]
    return ids, idx, w


def _flat_positions(texset: TextureSet) -> np.ndarray:
    cache = getattr(texset, "_flat_pos", None)
    if cache is None or cache[0] != texset.version:
        pos = np.concatenate([t.positions.reshape(-1, 3) for t in texset.textures if t is not None])
        texset._flat_pos = cache = (texset.version, pos)
    return cache[1]


# ---------------------------------------------------------------- plans

@dataclass
class ShadingPlan:
    """Linear map from flat texel coefficients to the covered pixels of one view."""

    shape: tuple
    pixels: np.ndarray        # (P,) flat indices of covered pixels
    tri_id: np.ndarray        # (P,)
    basis: np.ndarray         # (P, K)
    region: np.ndarray        # (P,) Region codes
    path: np.ndarray          # (P,) HYBRID / EWA
    entry_pixel: np.ndarray   # (E,) index into pixels
    entry_texel: np.ndarray   # (E,) flat texel index
    entry_weight: np.ndarray  # (E,)
    texset_version: int
    background: tuple = (0.0, 0.0, 0.0)
    plan_id: int = field(default_factory=lambda: next(_plan_ids))

    @property
    def n_pixels(self) -> int:
        return len(self.pixels)

    def contributions(self, k: int) -> list[tuple[int, float]]:
        sel = self.entry_pixel == k
        return list(zip(self.entry_texel[sel].tolist(), self.entry_weight[sel].tolist()))


def build_plan(mesh: TriangleMesh, texset: TextureSet, cam: Camera,
               cfg: ShadeConfig | None = None, gbuf: GBuffer | None = None) -> ShadingPlan:
    """Rasterize and shade one view into a :class:`ShadingPlan`.

    Only textures of frustum-visible triangles (the view's working set) are
    referenced, including as interpolation neighbors.
    """
    cfg = cfg or ShadeConfig()
    visible = frustum_visible(mesh, cam)
    active = np.zeros(mesh.n_triangles, bool)
    active[list(visible)] = True
    if gbuf is None:
        gbuf = rasterize(mesh, cam, visible, texset)
    H, W = gbuf.shape
    ys, xs = np.nonzero(gbuf.covered)
    tri = gbuf.tri_id[ys, xs]
    P = len(ys)
    region = np.zeros(P, np.int8)
    for t in np.unique(tri):
        sel = tri == t
        uv = gbuf.uv[ys[sel], xs[sel]]
        region[sel] = classify_uv(texset[t], uv[:, 0], uv[:, 1])
    lod = gbuf.lod[ys, xs]
    want_ewa = (lod > cfg.lod_threshold) if cfg.ewa else np.zeros(P, bool)
    path = np.zeros(P, np.int8)

    e_pix, e_tex, e_w = [], [], []
    # vectorized bilinear for the common Inside/near case
    fast = (region == Region.INSIDE) & ~want_ewa
    if fast.any():
        k = np.flatnonzero(fast)
        uv = gbuf.uv[ys[k], xs[k]]
        i0 = np.floor(uv[:, 0]).astype(np.int64)
        j0 = np.floor(uv[:, 1]).astype(np.int64)
        fu, fv = uv[:, 0] - i0, uv[:, 1] - j0
        widths = np.array([0 if t is None else t.width for t in texset.textures])
        base = texset.offsets[tri[k]]
        w_ = widths[tri[k]]
        for dr, dc, w in ((0, 0, (1 - fu) * (1 - fv)), (0, 1, fu * (1 - fv)),
                          (1, 0, (1 - fu) * fv), (1, 1, fu * fv)):
            nz = w != 0.0
            e_pix.append(k[nz])
            e_tex.append((base + (j0 + dr) * w_ + (i0 + dc))[nz])
            e_w.append(w[nz])
    near = ~fast & ~want_ewa
    if near.any():
        k = np.flatnonzero(near)
        s, ti, w = hybrid_batch(mesh, texset, tri[k], gbuf.uv[ys[k], xs[k]],
                                gbuf.world_pos[ys[k], xs[k]], region[k], cfg.idw_power, active)
        e_pix.append(k[s]), e_tex.append(ti), e_w.append(w)
    for k in np.flatnonzero(want_ewa):
        entries, path[k] = pixel_entries(mesh, texset, gbuf, ys[k], xs[k], region[k], cfg, active)
        e_pix.append(np.full(len(entries), k))
        e_tex.append(np.array([texset.offsets[t.tri] + r * t.width + c for t, r, c, _ in entries],
                              dtype=np.int64))
        e_w.append(np.array([w for *_, w in entries]))
    if e_pix:
        e_pix = np.concatenate(e_pix).astype(np.int64)
        e_tex = np.concatenate(e_tex).astype(np.int64)
        e_w = np.concatenate(e_w).astype(np.float64)
        order = np.lexsort((e_tex, e_pix))
        e_pix, e_tex, e_w = e_pix[order], e_tex[order], e_w[order]
    else:
        e_pix = e_tex = np.zeros(0, np.int64)
        e_w = np.zeros(0)
    basis = sh_basis_batch(gbuf.view_dir[ys, xs], texset.degree)
    return ShadingPlan((H, W), ys * W + xs, tri, basis, region, path, e_pix, e_tex, e_w,
                       texset.version, tuple(cfg.background))


def build_plans(mesh, texset, cams, cfg=None, threads: int | None = None) -> list[ShadingPlan]:
    """Plans for several views; results are identical for any thread count."""
    if threads is None or threads <= 1 or len(cams) <= 1:
        return [build_plan(mesh, texset, c, cfg) for c in cams]
    with ThreadPoolExecutor(threads) as ex:
        return list(ex.map(lambda c: build_plan(mesh, texset, c, cfg), cams))


def render_colors(plan: ShadingPlan, flat_coeffs: np.ndarray) -> np.ndarray:
    """Pre-clamp (P, 3) colors of the covered pixels."""
    vals = np.einsum("eck,ek->ec", flat_coeffs[plan.entry_texel], plan.basis[plan.entry_pixel])
    vals *= plan.entry_weight[:, None]
    out = np.empty((plan.n_pixels, 3))
    for c in range(3):
        out[:, c] = np.bincount(plan.entry_pixel, weights=vals[:, c], minlength=plan.n_pixels)
    return out


def compose_image(plan: ShadingPlan, colors: np.ndarray) -> np.ndarray:
    H, W = plan.shape
    img = np.empty((H * W, 3))
    img[:] = plan.background
    img[plan.pixels] = np.clip(colors, 0.0, 1.0)
    return img.reshape(H, W, 3)


def render_image(mesh, texset, cam, cfg=None) -> tuple[np.ndarray, ShadingPlan]:
    plan = build_plan(mesh, texset, cam, cfg)
    return compose_image(plan, render_colors(plan, texset.flat_coeffs())), plan


def coverage_mask(plan: ShadingPlan) -> np.ndarray:
    m = np.zeros(plan.shape[0] * plan.shape[1], bool)
    m[plan.pixels] = True
    return m.reshape(plan.shape)


def path_mask(plan: ShadingPlan) -> np.ndarray:
    """(H, W) uint8: 0 background, 1 hybrid, 2 EWA."""
    m = np.zeros(plan.shape[0] * plan.shape[1], np.uint8)
    m[plan.pixels] = 1 + plan.path
    return m.reshape(plan.shape)
