"""Datasets, images, texture checkpoints and image metrics.

Pixel values are linear: 8-bit bytes are divided by 255 on load and colors
are multiplied by 255 and rounded on save. No gamma is applied anywhere.

Scene file (JSON)::

    {
      "mesh": "mesh.obj",              # OBJ or PLY, relative to the scene file
      "cameras": "cameras.json",       # list of camera objects, see core.Camera
      "images": ["images/000.png", ...],
      "test_every": 8,                 # optional; test views are i % 8 == 7
      "split": {"train": [...], "test": [...]}   # optional explicit split
    }

Checkpoint layout (little endian)::

    b"MLSH" | u32 version | u32 sh degree | u32 record count
    per record: u32 tri | f64 density | u32 width | u32 height | u8 flags
                | validity bits (packed, row-major, ceil(W*H/8) bytes)
                | f32 coefficients [H, W, 3, (L+1)^2]

``flags`` bit 0 marks a texture forced to a single centroid texel. Degenerate
triangles have no record.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Camera, TriangleMesh, load_cameras, load_mesh
from .sh import num_coeffs
from .texture import TextureSet, allocate_texture

MAGIC = b"MLSH"
VERSION = 1
PSNR_CAP = 100.0


class CheckpointError(ValueError):
    pass


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------- images

def load_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def to_uint8(img) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_image(img, path):
    from PIL import Image

    Image.fromarray(to_uint8(img)).save(path, optimize=False)


# ---------------------------------------------------------------- datasets

def default_split(n: int, every: int = 8) -> tuple[list[int], list[int]]:
    """Every ``every``-th view (0-based indices ``every-1, 2*every-1, ...``) goes to test."""
    test = [i for i in range(n) if i % every == every - 1]
    return [i for i in range(n) if i % every != every - 1], test


@dataclass
class SceneDataset:
    mesh_path: Path
    cameras: list
    image_paths: list
    train: list
    test: list
    _images: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.cameras) != len(self.image_paths):
            raise DatasetError("camera count does not match image count")
        if set(self.train) & set(self.test):
            raise DatasetError("train and test splits overlap")
        if sorted(self.train + self.test) != list(range(len(self.cameras))):
            raise DatasetError("split does not cover every view exactly once")

    def image(self, i: int) -> np.ndarray:
        if i not in self._images:
            img = load_image(self.image_paths[i])
            cam = self.cameras[i]
            if img.shape[:2] != (cam.height, cam.width):
                raise DatasetError(f"{self.image_paths[i]}: size {img.shape[1]}x{img.shape[0]} "
                                   f"does not match camera {cam.width}x{cam.height}")
            self._images[i] = img
        return self._images[i]

    def load_mesh(self) -> TriangleMesh:
        return load_mesh(self.mesh_path)

    def views(self, split: str):
        idx = {"train": self.train, "test": self.test, "all": list(range(len(self.cameras)))}[split]
        return idx, [self.cameras[i] for i in idx], [self.image(i) for i in idx]


def load_dataset(scene_file, test_every: int | None = None) -> SceneDataset:
    scene_file = Path(scene_file)
    try:
        with open(scene_file) as f:
            scene = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetError(f"{scene_file}: malformed JSON ({e})") from None
    root = scene_file.parent
    try:
        mesh_path = root / scene["mesh"]
        cams = scene["cameras"]
        images = [root / p for p in scene["images"]]
    except KeyError as e:
        raise DatasetError(f"{scene_file}: missing key {e}") from None
    cams = load_cameras(root / cams) if isinstance(cams, str) else [Camera.from_json(c) for c in cams]
    if not cams:
        raise DatasetError(f"{scene_file}: empty camera list")
    for p in [mesh_path, *images]:
        if not p.exists():
            raise FileNotFoundError(p)
    if "split" in scene and test_every is None:
        train, test = list(scene["split"]["train"]), list(scene["split"]["test"])
    else:
        train, test = default_split(len(cams), test_every or scene.get("test_every", 8))
    ds = SceneDataset(mesh_path, cams, images, train, test)
    for i in range(len(cams)):
        ds.image(i)
    return ds


def write_scene(out_dir, mesh_name: str, cams, images, test_every: int = 8):
    """Write cameras.json, images/NNN.png and scene.json under ``out_dir``."""
    from .core import save_cameras

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    save_cameras(cams, out / "cameras.json")
    names = []
    for i, img in enumerate(images):
        name = f"images/{i:03d}.png"
        save_image(img, out / name)
        names.append(name)
    with open(out / "scene.json", "w") as f:
        json.dump({"mesh": mesh_name, "cameras": "cameras.json", "images": names,
                   "test_every": test_every}, f, indent=1)
    return out / "scene.json"


# ---------------------------------------------------------------- checkpoints

def checkpoint_bytes(texset: TextureSet) -> bytes:
    recs = [t for t in texset.textures if t is not None]
    parts = [MAGIC, struct.pack("<III", VERSION, texset.degree, len(recs))]
    for tex in recs:
        parts.append(struct.pack("<IdIIB", tex.tri, tex.density, tex.width, tex.height,
                                 1 if tex.forced else 0))
        parts.append(np.packbits(tex.valid.ravel()).tobytes())
        parts.append(np.ascontiguousarray(tex.coeffs, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(texset: TextureSet, path):
    Path(path).write_bytes(checkpoint_bytes(texset))


def load_checkpoint(path, mesh: TriangleMesh, degree: int | None = None) -> TextureSet:
    """Rebuild a TextureSet for ``mesh``; geometry is re-derived and must match."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    try:
        version, deg, n = struct.unpack_from("<III", buf, 4)
    except struct.error:
        raise CheckpointError(f"{path}: truncated header") from None
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if degree is not None and degree != deg:
        raise CheckpointError(f"{path}: SH degree {deg} does not match configured degree {degree}")
    k = num_coeffs(deg)
    pos = 16
    texs: list = [None] * mesh.n_triangles
    rec = struct.Struct("<IdIIB")
    try:
        for _ in range(n):
            tri, density, w, h, flags = rec.unpack_from(buf, pos)
            pos += rec.size
            nb = (w * h + 7) // 8
            if pos + nb + w * h * 3 * k * 4 > len(buf):
                raise CheckpointError(f"{path}: truncated record for triangle {tri}")
            valid = np.unpackbits(np.frombuffer(buf, np.uint8, nb, pos))[:w * h].astype(bool).reshape(h, w)
            pos += nb
            coeffs = np.frombuffer(buf, "<f4", w * h * 3 * k, pos).astype(np.float64).reshape(h, w, 3, k)
            pos += w * h * 3 * k * 4
            if tri >= mesh.n_triangles or mesh.degenerate[tri]:
                raise CheckpointError(f"{path}: record for unknown triangle {tri}")
            tex = allocate_texture(mesh, tri, density, deg)
            if (tex.width, tex.height) != (w, h) or bool(flags & 1) != tex.forced \
                    or not np.array_equal(tex.valid, valid):
                raise CheckpointError(f"{path}: texture layout of triangle {tri} does not match mesh")
            tex.coeffs[...] = coeffs
            texs[tri] = tex
    except struct.error:
        raise CheckpointError(f"{path}: truncated file") from None
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes")
    missing = [t for t in range(mesh.n_triangles) if texs[t] is None and not mesh.degenerate[t]]
    if missing:
        raise CheckpointError(f"{path}: no record for triangles {missing[:5]}")
    return TextureSet(mesh, texs, deg)


def quantize_coeffs(texset: TextureSet):
    """Round coefficients to float32 in place, as stored in checkpoints."""
    for tex in texset.textures:
        if tex is not None:
            tex.coeffs[...] = tex.coeffs.astype(np.float32)


# ---------------------------------------------------------------- metrics

def psnr(render, target, mask=None) -> float:
    """PSNR in dB over masked pixels for images in [0, 1], capped at 100 dB."""
    a = np.asarray(render, np.float64)
    b = np.asarray(target, np.float64)
    if mask is not None:
        a, b = a[np.asarray(mask, bool)], b[np.asarray(mask, bool)]
    if a.size == 0:
        raise ValueError("empty mask")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * np.log10(mse))


def _gauss_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def ssim(a, b, data_range: float = 1.0, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), valid region only.

    Local statistics use population (not sample) covariances. Multi-channel
    images are averaged over channels. Images smaller than the window are
    padded by repeating their border pixels.
    """
    from scipy.ndimage import correlate1d

    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    w = _gauss_window()
    pad = max(0, 11 - min(a.shape[:2]))
    if pad:
        p = ((pad, pad), (pad, pad), (0, 0))
        a, b = np.pad(a, p, mode="edge"), np.pad(b, p, mode="edge")

    def filt(x):
        y = correlate1d(x, w, axis=0, mode="constant")
        y = correlate1d(y, w, axis=1, mode="constant")
        return y[5:-5, 5:-5]

    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a ** 2
    sbb = filt(b * b) - mu_b ** 2
    sab = filt(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2))
    return float(s.mean())


@dataclass
class MetricsEntry:
    view: int
    split: str
    psnr: float
    ssim: float


@dataclass
class MetricsReport:
    entries: list = field(default_factory=list)
    runtime: float = 0.0

    def mean_psnr(self, split: str | None = None) -> float:
        vals = [e.psnr for e in self.entries if split is None or e.split == split]
        return float(np.mean(vals)) if vals else float("nan")

    def mean_ssim(self, split: str | None = None) -> float:
        vals = [e.ssim for e in self.entries if split is None or e.split == split]
        return float(np.mean(vals)) if vals else float("nan")

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["view", "split", "psnr", "ssim"])
            for e in self.entries:
                w.writerow([e.view, e.split, f"{e.psnr:.6f}", f"{e.ssim:.6f}"])
            for split in sorted({e.split for e in self.entries}):
                w.writerow(["mean", split, f"{self.mean_psnr(split):.6f}", f"{self.mean_ssim(split):.6f}"])


def compute_metrics(render, target, mask, view: int = 0, split: str = "test") -> MetricsEntry:
    """PSNR over masked pixels and SSIM over the mask's bounding box."""
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise ValueError("empty mask")
    ys, xs = np.nonzero(mask)
    box = (slice(ys.min(), ys.max() + 1), slice(xs.min(), xs.max() + 1))
    return MetricsEntry(view, split, psnr(render, target, mask),
                        ssim(np.asarray(render)[box], np.asarray(target)[box]))


def write_rows(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
