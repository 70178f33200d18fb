"""Loss, backward pass to SH texels, sparse Adam and the per-round training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .shade import ShadeConfig, ShadingPlan, build_plans, compose_image, render_colors
from .texture import TextureSet

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 30
    batch: int = 4
    seed: int = 0
    threads: int = 1
    shade: ShadeConfig = field(default_factory=ShadeConfig)

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0 or self.epochs <= 0 or self.batch <= 0:
            raise ValueError("lr, eps, epochs and batch must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")


def smooth_l1(x):
    """Smooth L1 value and derivative, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    small = ax < 1.0
    return np.where(small, 0.5 * x * x, ax - 0.5), np.where(small, x, np.sign(x))


def image_loss(rendered, target, mask=None):
    """Summed smooth L1 over masked pixels and channels, and d loss / d rendered."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch: {rendered.shape} vs {target.shape}")
    val, der = smooth_l1(rendered - target)
    if mask is not None:
        m = np.asarray(mask, bool)
        if m.ndim < val.ndim:
            m = m[..., None]
        val = val * m
        der = der * m
    return float(val.sum()), der


@dataclass
class GradientBuffer:
    """Coefficient gradients for the touched texels, sorted by flat texel index."""

    texels: np.ndarray   # (T,) flat texel indices
    grads: np.ndarray    # (T, 3, K)
    plan_id: int = 0

    @property
    def touched(self) -> set:
        return set(self.texels.tolist())

    def dense(self, n_texels: int) -> np.ndarray:
        out = np.zeros((n_texels,) + self.grads.shape[1:])
        out[self.texels] = self.grads
        return out

    def merged(self, other: "GradientBuffer") -> "GradientBuffer":
        tex = np.concatenate([self.texels, other.texels])
        g = np.concatenate([self.grads, other.grads])
        return _reduce(tex, g)


def _reduce(texels, contrib) -> GradientBuffer:
    if len(texels) == 0:
        return GradientBuffer(np.zeros(0, np.int64), np.zeros((0,) + contrib.shape[1:]))
    uniq, inv = np.unique(texels, return_inverse=True)
    out = np.zeros((len(uniq),) + contrib.shape[1:])
    np.add.at(out, inv, contrib)  # sequential, order-fixed accumulation
    return GradientBuffer(uniq, out)


def backward(plan: ShadingPlan, grad_colors: np.ndarray, colors: np.ndarray | None = None,
             texset: TextureSet | None = None) -> GradientBuffer:
    """Transpose of the plan's linear map.

    ``grad_colors`` is d loss / d color for the covered pixels, shape (P, 3).
    With the pre-clamp ``colors`` given, channels clipped by the output clamp
    pass no gradient. Texels with an all-zero gradient are left out.
    """
    if texset is not None and texset.version != plan.texset_version:
        raise RuntimeError("stale shading plan: textures were reallocated after it was built")
    g = np.asarray(grad_colors, dtype=np.float64)
    if colors is not None:
        g = g * ((colors >= 0.0) & (colors <= 1.0))
    live = np.any(g != 0, axis=1)[plan.entry_pixel]
    ep, et, ew = plan.entry_pixel[live], plan.entry_texel[live], plan.entry_weight[live]
    contrib = (g[ep] * ew[:, None])[:, :, None] * plan.basis[ep][:, None, :]
    buf = _reduce(et, contrib)
    nz = np.any(buf.grads != 0, axis=(1, 2))
    return GradientBuffer(buf.texels[nz], buf.grads[nz], plan.plan_id)


class SparseAdam:
    """Adam with lazily allocated per-texel moments and per-texel step counts.

    Only texels present in a gradient buffer are updated; all others keep
    their exact values.
    """

    def __init__(self, n_texels: int, coeff_shape: tuple, cfg: TrainConfig):
        self.cfg = cfg
        self.slot = np.full(n_texels, -1, np.int64)
        self.m = np.zeros((0,) + tuple(coeff_shape))
        self.v = np.zeros((0,) + tuple(coeff_shape))
        self.step = np.zeros(0, np.int64)

    @property
    def allocated(self) -> int:
        return len(self.step)

    def _slots(self, texels):
        new = texels[self.slot[texels] < 0]
        if len(new):
            self.slot[new] = np.arange(len(self.step), len(self.step) + len(new))
            pad = np.zeros((len(new),) + self.m.shape[1:])
            self.m = np.concatenate([self.m, pad])
            self.v = np.concatenate([self.v, pad.copy()])
            self.step = np.concatenate([self.step, np.zeros(len(new), np.int64)])
        return self.slot[texels]

    def apply(self, flat_coeffs: np.ndarray, grads: GradientBuffer):
        if len(grads.texels) == 0:
            return
        c = self.cfg
        s = self._slots(grads.texels)
        g = grads.grads
        self.step[s] += 1
        t = self.step[s][:, None, None].astype(np.float64)
        self.m[s] = c.beta1 * self.m[s] + (1 - c.beta1) * g
        self.v[s] = c.beta2 * self.v[s] + (1 - c.beta2) * g * g
        mhat = self.m[s] / (1 - c.beta1 ** t)
        vhat = self.v[s] / (1 - c.beta2 ** t)
        flat_coeffs[grads.texels] -= c.lr * mhat / (np.sqrt(vhat) + c.eps)


def optimizer_step(flat_coeffs: np.ndarray, grads: GradientBuffer, state: SparseAdam) -> np.ndarray:
    state.apply(flat_coeffs, grads)
    return flat_coeffs


@dataclass
class RoundResult:
    epoch_loss: list          # summed training loss per epoch (epoch 0 = before any step)
    step_log: list            # (epoch, view, loss, psnr)
    renders: list             # final per-view images


def view_step(plan: ShadingPlan, flat: np.ndarray, target_pixels: np.ndarray):
    """Loss, pre-clamp colors and gradient buffer for one view."""
    colors = render_colors(plan, flat)
    loss, dl = image_loss(np.clip(colors, 0.0, 1.0), target_pixels)
    return loss, colors, backward(plan, dl, colors)


def _psnr(a, b):
    mse = float(np.mean((a - b) ** 2)) if a.size else 0.0
    return 100.0 if mse <= 1e-10 else min(100.0, -10.0 * np.log10(mse))


def train_round(mesh, texset: TextureSet, cams, images, cfg: TrainConfig,
                state: SparseAdam | None = None, plans=None) -> tuple[RoundResult, SparseAdam]:
    """Train the textures on the given views for ``cfg.epochs`` epochs.

    Each view only ever touches texels of triangles inside its frustum.
    Returns the round result and the optimizer state (reusable across rounds
    as long as the texture layout is unchanged).
    """
    if not cams:
        raise ValueError("empty dataset")
    if plans is None:
        plans = build_plans(mesh, texset, cams, cfg.shade, cfg.threads)
    if sum(p.n_pixels for p in plans) == 0:
        raise ValueError("no covered pixels in any training view")
    targets = [np.asarray(img, np.float64).reshape(-1, 3)[p.pixels] for img, p in zip(images, plans)]
    flat = texset.flat_coeffs()
    valid = texset.flat_valid()
    if state is None or len(state.slot) != len(flat):
        state = SparseAdam(len(flat), flat.shape[1:], cfg)
    rng = np.random.default_rng(cfg.seed)

    def total_loss():
        return sum(image_loss(np.clip(render_colors(p, flat), 0, 1), t)[0] for p, t in zip(plans, targets))

    epoch_loss = [total_loss()]
    step_log = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(plans))
        for b in range(0, len(order), cfg.batch):
            acc = None
            for v in order[b:b + cfg.batch]:
                loss, colors, g = view_step(plans[v], flat, targets[v])
                acc = g if acc is None else acc.merged(g)
                step_log.append((epoch, int(v), loss, _psnr(np.clip(colors, 0, 1), targets[v])))
            assert valid[acc.texels].all()
            state.apply(flat, acc)
        epoch_loss.append(total_loss())
        log.debug("epoch %d loss %.6g", epoch, epoch_loss[-1])
    texset.set_flat_coeffs(flat)
    renders = [compose_image(p, render_colors(p, flat)) for p in plans]
    return RoundResult(epoch_loss, step_log, renders), state
