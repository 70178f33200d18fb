"""Synthetic scenes with known SH textures, for teacher-student checks."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import Camera, TriangleMesh, look_at, save_obj
from .io import save_checkpoint, quantize_coeffs, to_uint8, write_scene
from .sh import C0
from .shade import ShadeConfig, render_image
from .texture import TextureSet

KINDS = ("quad_grid", "icosphere", "two_plane")
MODES = ("constant", "ramp", "checkerboard", "random_sh")


@dataclass
class SynthSpec:
    kind: str = "quad_grid"
    grid: int = 4                 # quads per side (quad_grid, two_plane) or subdivisions (icosphere)
    size: float = 2.0             # meters
    gt_mode: str = "random_sh"
    gt_density: float = 0.1
    degree: int = 2
    constant: tuple = (0.5, 0.5, 0.5)
    order_amplitude: tuple = (0.0, 0.15, 0.08, 0.04)
    dc_range: tuple = (0.2, 0.8)
    checker_cell: float | None = None  # None: alternate per texel
    checker_values: tuple = (0.1, 0.9)
    n_views: int = 16
    radius: float = 2.5
    elevation: tuple = (35.0, 75.0)   # degrees above the z=0 plane
    jitter: float = 0.05
    target: tuple = (0.0, 0.0, 0.0)
    width: int = 64
    height: int = 64
    fov_deg: float = 60.0
    test_every: int = 8
    seed: int = 0
    shade: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}; expected one of {KINDS}")
        if self.gt_mode not in MODES:
            raise ValueError(f"unknown texture mode {self.gt_mode!r}; expected one of {MODES}")
        if self.gt_density <= 0 or self.n_views <= 0:
            raise ValueError("gt_density and n_views must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown synth keys: {sorted(unknown)}")
        for k, v in known.items():
            if isinstance(v, list):
                known[k] = tuple(v)
        return cls(**known)


def quad_grid(n: int, size: float, z: float = 0.0, center=(0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    xs = np.linspace(-size / 2, size / 2, n + 1)
    X, Y = np.meshgrid(xs + center[0], xs + center[1])
    v = np.stack([X.ravel(), Y.ravel(), np.full(X.size, z)], 1)
    f = []
    for j in range(n):
        for i in range(n):
            a = j * (n + 1) + i
            b, c, d = a + 1, a + n + 2, a + n + 1
            f += [[a, b, c], [a, c, d]]
    return v, np.array(f, dtype=np.int64)


def icosphere(subdiv: int, radius: float) -> tuple[np.ndarray, np.ndarray]:
    t = (1 + math.sqrt(5)) / 2
    v = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t], [0, -1, -t],
         [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    for _ in range(subdiv):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        f = nf
    return np.array(verts) * radius, np.array(f, dtype=np.int64)


def build_mesh(spec: SynthSpec) -> TriangleMesh:
    if spec.kind == "quad_grid":
        v, f = quad_grid(spec.grid, spec.size)
    elif spec.kind == "icosphere":
        v, f = icosphere(spec.grid, spec.size / 2)
    else:
        v0, f0 = quad_grid(spec.grid, spec.size)
        v1, f1 = quad_grid(1, spec.size * 0.3, z=spec.size * 0.15, center=(spec.size * 0.1, 0.0))
        v, f = np.vstack([v0, v1]), np.vstack([f0, f1 + len(v0)])
    return TriangleMesh(v, f)


def fill_texture(texset: TextureSet, spec: SynthSpec, rng: np.random.Generator):
    for tex in texset.textures:
        if tex is None:
            continue
        tex.coeffs[...] = 0.0
        pos = tex.positions
        if spec.gt_mode == "constant":
            dc = np.broadcast_to(np.asarray(spec.constant, float), pos.shape[:2] + (3,))
        elif spec.gt_mode == "ramp":
            lo, hi = spec.dc_range
            s = (pos[..., 0] + spec.size / 2) / spec.size
            dc = np.repeat((lo + (hi - lo) * s)[..., None], 3, -1)
        elif spec.gt_mode == "checkerboard":
            if spec.checker_cell is None:
                rr, cc = np.mgrid[0:tex.height, 0:tex.width]
                par = (rr + cc) % 2
            else:
                par = np.floor(pos / spec.checker_cell).astype(np.int64).sum(-1) % 2
            lo, hi = spec.checker_values
            dc = np.repeat(np.where(par == 0, lo, hi)[..., None], 3, -1)
        else:
            lo, hi = spec.dc_range
            dc = rng.uniform(lo, hi, pos.shape[:2] + (3,))
            for l in range(1, texset.degree + 1):
                amp = spec.order_amplitude[l] if l < len(spec.order_amplitude) else 0.0
                tex.coeffs[..., l * l:(l + 1) * (l + 1)] = rng.normal(0.0, amp, pos.shape[:2] + (3, 2 * l + 1))
        tex.coeffs[..., 0] = dc / C0
        tex.coeffs[~tex.valid] = 0.0


def ring_cameras(spec: SynthSpec, rng: np.random.Generator) -> list[Camera]:
    f = 0.5 * spec.width / math.tan(math.radians(spec.fov_deg) / 2)
    cams = []
    lo, hi = spec.elevation
    target = np.asarray(spec.target, float)
    for i in range(spec.n_views):
        az = 2 * math.pi * i / spec.n_views + rng.uniform(-0.5, 0.5) * 2 * math.pi / spec.n_views
        el = math.radians(rng.uniform(lo, hi))
        r = spec.radius * (1 + spec.jitter * rng.uniform(-1, 1))
        eye = target + r * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        look = target + spec.jitter * spec.size * rng.uniform(-1, 1, 3) * np.array([1, 1, 0])
        cams.append(Camera(spec.width, spec.height, f, f, (spec.width - 1) / 2, (spec.height - 1) / 2,
                           look_at(eye, look)))
    return cams


@dataclass
class SynthScene:
    mesh: TriangleMesh
    gt: TextureSet
    cameras: list
    images: list
    spec: SynthSpec


def generate_scene(spec: SynthSpec, out_dir=None) -> SynthScene:
    """Mesh, ground-truth textures, cameras and 8-bit target images.

    Targets are rendered from the float32-rounded ground truth so that the
    written checkpoint reproduces the images exactly.
    """
    rng = np.random.default_rng(spec.seed)
    mesh = build_mesh(spec)
    gt = TextureSet.allocate(mesh, spec.gt_density, spec.degree)
    fill_texture(gt, spec, rng)
    quantize_coeffs(gt)
    cams = ring_cameras(spec, rng)
    cfg = ShadeConfig(**spec.shade)
    images = [to_uint8(render_image(mesh, gt, c, cfg)[0]) / 255.0 for c in cams]
    scene = SynthScene(mesh, gt, cams, images, spec)
    if out_dir is not None:
        write_synth(scene, out_dir)
    return scene


def write_synth(scene: SynthScene, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_obj(scene.mesh, out / "mesh.obj")
    write_scene(out, "mesh.obj", scene.cameras, scene.images, scene.spec.test_every)
    save_checkpoint(scene.gt, out / "gt_checkpoint.mlsh")
    with open(out / "synth.json", "w") as f:
        json.dump(asdict(scene.spec), f, indent=1)
