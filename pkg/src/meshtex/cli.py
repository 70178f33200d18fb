"""Command-line entry point: ``meshtex {synth,train,render,eval,export}``.

Every command writes its artifacts under ``--out``. Settings come from an
optional JSON config (``--config``) overridden by ``--set section.key=value``;
sections are ``synth``, ``train``, ``adapt`` and ``shade`` plus the top-level
``degree``. Exit status is 0 on success, 1 on invalid input and 2 on an
internal error, with a one-line diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path

from .adapt import AdaptConfig, adaptive_loop, write_round_csv
from .core import MeshError, load_mesh
from .io import (CheckpointError, DatasetError, MetricsReport, compute_metrics, load_checkpoint,
                 load_dataset, save_checkpoint, save_image, write_rows)
from .shade import ShadeConfig, build_plans, compose_image, coverage_mask, path_mask, render_colors
from .synth import SynthSpec, generate_scene
from .texture import TextureSet
from .train import TrainConfig, train_round

log = logging.getLogger("meshtex")

DEFAULTS = {
    "degree": 2,
    "synth": {},
    "train": {},
    "adapt": {"enabled": True},
    "shade": {},
}


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(message)


# ------------------------------------------------------------------ config

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path=None, overrides=()) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))
    if path:
        try:
            with open(path) as f:
                user = json.load(f)
        except FileNotFoundError:
            raise UserError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise UserError(f"{path}: malformed JSON ({e})") from None
        for k, v in user.items():
            if isinstance(v, dict) and isinstance(cfg.get(k), dict):
                cfg[k].update(v)
            else:
                cfg[k] = v
    for item in overrides:
        key, sep, val = item.partition("=")
        if not sep:
            raise UserError(f"--set expects key=value, got {item!r}")
        section, _, name = key.partition(".")
        if name:
            cfg.setdefault(section, {})[name] = _parse_value(val)
        else:
            cfg[section] = _parse_value(val)
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise UserError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _build(cls, d: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    bad = set(d) - names
    if bad:
        raise UserError(f"unknown {section} keys: {sorted(bad)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise UserError(f"invalid {section} config: {e}") from None


def shade_config(cfg) -> ShadeConfig:
    return _build(ShadeConfig, cfg["shade"], "shade")


def train_config(cfg, threads) -> TrainConfig:
    return dataclasses.replace(_build(TrainConfig, cfg["train"], "train"),
                               threads=threads, shade=shade_config(cfg))


def adapt_config(cfg) -> tuple[bool, AdaptConfig]:
    d = dict(cfg["adapt"])
    enabled = bool(d.pop("enabled", True))
    return enabled, _build(AdaptConfig, d, "adapt")


# ---------------------------------------------------------------- commands

def _scene(args):
    try:
        ds = load_dataset(args.scene)
    except FileNotFoundError as e:
        raise UserError(f"missing file: {e.filename or e}") from None
    return ds, ds.load_mesh()


def _checkpoint(path, mesh, degree):
    if not Path(path).is_file():
        raise UserError(f"checkpoint not found: {path}")
    return load_checkpoint(path, mesh, degree)


def _views(spec: str, ds) -> list[int]:
    if spec in ("train", "test", "all"):
        return ds.views(spec)[0] if spec != "all" else list(range(len(ds.cameras)))
    try:
        idx = [int(s) for s in spec.split(",") if s.strip()]
    except ValueError:
        raise UserError(f"bad --views {spec!r}: expected train, test, all or a comma list") from None
    bad = [i for i in idx if not 0 <= i < len(ds.cameras)]
    if bad:
        raise UserError(f"view indices out of range: {bad}")
    return idx


def cmd_synth(args, cfg, out: Path):
    d = dict(cfg["synth"])
    if args.seed is not None:
        d["seed"] = args.seed
    d.setdefault("degree", cfg["degree"])
    d.setdefault("shade", cfg["shade"])
    try:
        spec = SynthSpec.from_dict(d)
    except (TypeError, ValueError) as e:
        raise UserError(f"invalid synth config: {e}") from None
    scene = generate_scene(spec, out)
    print(f"wrote {len(scene.cameras)} views, {scene.mesh.n_triangles} triangles to {out / 'scene.json'}")


def cmd_train(args, cfg, out: Path):
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    tcfg = train_config(cfg, args.threads)
    enabled, acfg = adapt_config(cfg)
    ds, mesh = _scene(args)
    train_idx, cams, images = ds.views("train")
    t0 = time.perf_counter()
    if enabled:
        texset, reports = adaptive_loop(mesh, cams, images, tcfg, acfg, degree=cfg["degree"])
        losses = [r.train_loss for r in reports]
        steps = [(r.round, *s) for r in reports for s in r.step_log]
        write_round_csv(reports, out / "rounds.csv")
        from .plots import plot_density_rounds
        plot_density_rounds(reports, out / "densities.png")
    else:
        texset = TextureSet.allocate(mesh, acfg.rho0, cfg["degree"])
        res, _ = train_round(mesh, texset, cams, images, tcfg)
        losses = [res.epoch_loss]
        steps = [(1, *s) for s in res.step_log]
    save_checkpoint(texset, out / "checkpoint.mlsh")
    write_rows(out / "loss.csv", ["round", "epoch", "loss"],
               [(r + 1, e, repr(float(v))) for r, ls in enumerate(losses) for e, v in enumerate(ls)])
    write_rows(out / "steps.csv", ["round", "epoch", "view", "loss", "psnr"],
               [(r, e, train_idx[v], f"{l:.9g}", f"{p:.6f}") for r, e, v, l, p in steps])
    from .plots import plot_loss
    plot_loss(losses, out / "loss.png")
    with open(out / "config.json", "w") as f:
        json.dump(cfg, f, indent=1, sort_keys=True)
    first, last = losses[0][0], losses[-1][-1]
    print(f"trained {texset.n_texels} texels on {len(cams)} views in {time.perf_counter() - t0:.1f}s; "
          f"loss {first:.4g} -> {last:.4g}")


def _render_all(mesh, texset, cams, cfg, threads):
    plans = build_plans(mesh, texset, cams, shade_config(cfg), threads)
    flat = texset.flat_coeffs()
    return plans, [compose_image(p, render_colors(p, flat)) for p in plans]


def cmd_render(args, cfg, out: Path):
    ds, mesh = _scene(args)
    texset = _checkpoint(args.checkpoint, mesh, cfg["degree"])
    idx = _views(args.views, ds)
    plans, imgs = _render_all(mesh, texset, [ds.cameras[i] for i in idx], cfg, args.threads)
    from .plots import save_path_mask
    for i, plan, img in zip(idx, plans, imgs):
        save_image(img, out / f"render_{i:03d}.png")
        save_path_mask(path_mask(plan), out / f"path_{i:03d}.png")
    print(f"rendered {len(idx)} views to {out}")


def cmd_eval(args, cfg, out: Path):
    ds, mesh = _scene(args)
    texset = _checkpoint(args.checkpoint, mesh, cfg["degree"])
    splits = ["train", "test"] if args.split == "all" else [args.split]
    t0 = time.perf_counter()
    report = MetricsReport()
    for split in splits:
        idx, cams, images = ds.views(split)
        plans, imgs = _render_all(mesh, texset, cams, cfg, args.threads)
        for i, plan, img, tgt in zip(idx, plans, imgs, images):
            mask = coverage_mask(plan)
            if mask.any():
                report.entries.append(compute_metrics(img, tgt, mask, i, split))
            else:
                log.warning("view %d covers no pixels; skipped", i)
    report.runtime = time.perf_counter() - t0
    if not report.entries:
        raise UserError("no view covers any pixel")
    report.write_csv(out / "metrics.csv")
    from .plots import plot_psnr_bars
    plot_psnr_bars(report, out / "psnr.png")
    for split in splits:
        print(f"{split} PSNR {report.mean_psnr(split):.2f} dB  SSIM {report.mean_ssim(split):.4f}")


def cmd_export(args, cfg, out: Path):
    if args.mesh:
        try:
            mesh = load_mesh(args.mesh)
        except FileNotFoundError:
            raise UserError(f"mesh not found: {args.mesh}") from None
    elif args.scene:
        mesh = _scene(args)[1]
    else:
        raise UserError("export needs --mesh or --scene to lay out the textures")
    texset = _checkpoint(args.checkpoint, mesh, cfg["degree"])
    rows = []
    for tex in texset.textures:
        if tex is None:
            continue
        c = tex.coeffs[tex.valid]
        rows.append((tex.tri, repr(tex.density), tex.width, tex.height, tex.valid_count, int(tex.forced),
                     f"{c[..., 0].mean():.6g}", f"{c.std():.6g}", f"{c.min():.6g}", f"{c.max():.6g}"))
    write_rows(out / "textures.csv", ["tri", "density", "width", "height", "valid", "forced",
                                      "dc_mean", "coeff_std", "coeff_min", "coeff_max"], rows)
    dst = out / "checkpoint.mlsh"
    if Path(args.checkpoint).resolve() != dst.resolve():
        shutil.copyfile(args.checkpoint, dst)
    print(f"exported {len(rows)} textures ({texset.n_texels} texels) to {out}")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "render": cmd_render, "eval": cmd_eval,
            "export": cmd_export}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.epochs=10")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker threads for plan building (results do not depend on it)")
    common.add_argument("--seed", type=int, help="random seed (synth views and textures, training order)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="meshtex", description="Per-triangle SH texture fitting on a fixed mesh.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    t = sub.add_parser("train", parents=[common], help="fit SH textures to a scene")
    t.add_argument("--scene", required=True)
    r = sub.add_parser("render", parents=[common], help="render views from a checkpoint")
    r.add_argument("--scene", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--views", default="all", help="train, test, all or comma-separated indices")
    e = sub.add_parser("eval", parents=[common], help="PSNR/SSIM per view")
    e.add_argument("--scene", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=["train", "test", "all"], default="all")
    x = sub.add_parser("export", parents=[common], help="texture summary and checkpoint copy")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--mesh")
    x.add_argument("--scene")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.threads < 1:
            raise UserError("--threads must be >= 1")
        cfg = load_config(args.config, args.set)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg, out)
        return 0
    except (UserError, DatasetError, CheckpointError, MeshError) as e:
        print(f"meshtex: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        print(f"meshtex: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        if os.environ.get("MESHTEX_DEBUG"):
            raise
        return 2


if __name__ == "__main__":
    sys.exit(main())
