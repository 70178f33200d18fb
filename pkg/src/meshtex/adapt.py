"""Adaptive per-mesh SH density.

Training proceeds in rounds. After each round every mesh gets the mean and
variance of its PSNR across the input views. A mesh keeps refining its texel
spacing while either statistic improves; after ``patience`` consecutive
non-improving rounds it reverts to the last accepted spacing and is frozen.
The loop ends once the converged fraction reaches ``eps_T``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .io import PSNR_CAP
from .shade import build_plans
from .texture import TextureSet, resample_texture
from .train import TrainConfig, train_round

log = logging.getLogger(__name__)

FIRST, ACCEPT, PATIENCE, CONVERGE, FLOOR, UNOBSERVED = (
    "first", "accept", "patience", "converge", "floor", "unobserved")


@dataclass
class AdaptConfig:
    rho0: float = 0.2
    eps_T: float = 0.95
    patience: int = 1
    mode: str = "ratio"        # "ratio": rho * ratio, "additive": rho + step
    ratio: float = 0.7
    step: float = -0.05
    rho_min: float = 1e-3
    min_pixels: int = 32
    max_rounds: int = 8

    def __post_init__(self):
        if self.mode not in ("ratio", "additive"):
            raise ValueError(f"unknown density update mode {self.mode!r}")
        if self.rho0 <= 0 or self.rho_min <= 0 or self.max_rounds < 1 or self.patience < 0:
            raise ValueError("rho0, rho_min, max_rounds must be positive and patience >= 0")

    def refine(self, rho: float) -> float:
        new = rho * self.ratio if self.mode == "ratio" else rho + self.step
        return max(new, self.rho_min)


@dataclass
class MeshState:
    density: float
    prev_density: float
    mean: float = float("nan")
    var: float = float("nan")
    prev_mean: float = float("nan")
    prev_var: float = float("nan")
    patience: int = 0
    converged: bool = False
    updated: bool = False
    views: int = 0


@dataclass
class MeshRoundStats:
    meshes: dict                       # tri id -> MeshState, textured meshes only
    cfg: AdaptConfig = field(default_factory=AdaptConfig)

    @property
    def n_total(self) -> int:
        return len(self.meshes)

    @property
    def n_cvg(self) -> int:
        return sum(s.converged for s in self.meshes.values())

    def converged_fraction(self) -> float:
        return self.n_cvg / self.n_total if self.n_total else 1.0


def per_mesh_psnr(renders, targets, tri_maps, n_meshes: int, min_pixels: int = 32):
    """Mean and (population) variance across views of each mesh's PSNR.

    A view counts for a mesh only if the mesh covers at least ``min_pixels``
    pixels in it. Returns ``(mean, var, views)``; meshes never counted have
    NaN statistics and ``views == 0``.
    """
    psnrs = [[] for _ in range(n_meshes)]
    for img, tgt, ids in zip(renders, targets, tri_maps):
        ids = np.asarray(ids).ravel()
        cov = ids >= 0
        err = ((np.asarray(img) - np.asarray(tgt)) ** 2).reshape(-1, 3).sum(1)
        cnt = np.bincount(ids[cov], minlength=n_meshes)
        sse = np.bincount(ids[cov], err[cov], minlength=n_meshes)
        for m in np.flatnonzero(cnt >= min_pixels):
            mse = sse[m] / (3 * cnt[m])
            psnrs[m].append(PSNR_CAP if mse == 0 else min(PSNR_CAP, -10 * np.log10(mse)))
    mean = np.array([np.mean(p) if p else np.nan for p in psnrs])
    var = np.array([np.var(p) if p else np.nan for p in psnrs])
    return mean, var, np.array([len(p) for p in psnrs])


def init_stats(texset: TextureSet, cfg: AdaptConfig) -> MeshRoundStats:
    return MeshRoundStats({t: MeshState(tex.density, tex.density)
                           for t, tex in enumerate(texset.textures) if tex is not None}, cfg)


def density_round_update(stats: MeshRoundStats, mean, var, views) -> dict:
    """Apply one round of the density rule; returns ``{mesh: action}``.

    Mutates ``stats``. Densities of refined meshes change; converging meshes
    get their previous (last accepted) density back.
    """
    cfg = stats.cfg
    actions = {}
    for m, s in stats.meshes.items():
        if s.converged:
            continue
        s.mean, s.var, s.views = float(mean[m]), float(var[m]), int(views[m])
        if not s.updated and s.views == 0:
            s.converged = True
            actions[m] = UNOBSERVED
            continue
        if not s.updated:
            improved, action = True, FIRST
        else:
            improved, action = (s.mean > s.prev_mean) or (s.var < s.prev_var), ACCEPT
        if improved:
            new = cfg.refine(s.density)
            if new >= s.density:
                s.converged = True
                actions[m] = FLOOR
                continue
            s.prev_mean, s.prev_var = s.mean, s.var
            s.prev_density, s.density = s.density, new
            s.patience = 0
            s.updated = True
            actions[m] = action
        elif s.patience < cfg.patience:
            s.patience += 1
            actions[m] = PATIENCE
        else:
            s.density = s.prev_density
            s.converged = True
            actions[m] = CONVERGE
    return actions


@dataclass
class RoundReport:
    round: int
    rows: list          # (mesh, density used, mean, var, patience, converged, action, new density)
    train_loss: list
    n_cvg: int
    n_total: int
    step_log: list = field(default_factory=list)


REPORT_HEADER = ["round", "mesh", "density", "psnr_mean", "psnr_var", "patience", "converged",
                 "action", "new_density"]


def write_round_csv(reports, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(REPORT_HEADER)
        for r in reports:
            for row in r.rows:
                m, dens, mean, var, pat, conv, act, new = row
                w.writerow([r.round, m, repr(dens), f"{mean:.6f}", f"{var:.6f}", pat, int(conv), act, repr(new)])


def adaptive_loop(mesh, cams, images, train_cfg: TrainConfig | None = None,
                  cfg: AdaptConfig | None = None, texset: TextureSet | None = None,
                  degree: int = 2):
    """Alternate training rounds and density updates until enough meshes converge.

    Returns the final textures and one :class:`RoundReport` per round.
    """
    train_cfg = train_cfg or TrainConfig()
    cfg = cfg or AdaptConfig()
    if texset is None:
        texset = TextureSet.allocate(mesh, cfg.rho0, degree)
    stats = init_stats(texset, cfg)
    snapshots = {}
    reports = []
    rnd = 0
    while True:
        rnd += 1
        plans = build_plans(mesh, texset, cams, train_cfg.shade, train_cfg.threads)
        res, _ = train_round(mesh, texset, cams, images, train_cfg, plans=plans)
        renders = res.renders
        tri_maps = [_tri_map(p) for p in plans]
        mean, var, views = per_mesh_psnr(renders, images, tri_maps, mesh.n_triangles, cfg.min_pixels)
        used = {m: s.density for m, s in stats.meshes.items()}
        actions = density_round_update(stats, mean, var, views)
        new_tex = {}
        for m, act in actions.items():
            s = stats.meshes[m]
            if act in (FIRST, ACCEPT):
                snapshots[m] = texset[m].copy()
                new_tex[m] = resample_texture(texset[m], s.density, mesh, texset, train_cfg.shade.idw_power)
            elif act == CONVERGE and m in snapshots:
                new_tex[m] = snapshots.pop(m)
        texset.replace_many(new_tex)
        rows = [(m, used[m], float(mean[m]), float(var[m]), s.patience, s.converged,
                 actions.get(m, "skip"), s.density) for m, s in stats.meshes.items()]
        reports.append(RoundReport(rnd, rows, res.epoch_loss, stats.n_cvg, stats.n_total, res.step_log))
        log.info("round %d: %d/%d converged", rnd, stats.n_cvg, stats.n_total)
        if stats.converged_fraction() >= cfg.eps_T:
            break
        if rnd >= cfg.max_rounds:
            log.warning("adaptive density: max_rounds=%d reached with %d/%d converged",
                        cfg.max_rounds, stats.n_cvg, stats.n_total)
            break
    return texset, reports


def _tri_map(plan) -> np.ndarray:
    ids = np.full(plan.shape[0] * plan.shape[1], -1, np.int64)
    ids[plan.pixels] = plan.tri_id
    return ids.reshape(plan.shape)
