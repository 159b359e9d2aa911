"""Command-line entry point: ``ripnerf {train,render,eval,fixtures,ambiguity}``.

Exit codes: 0 success, 1 ambiguity check failed, 2 usage, 3 data, 4 numeric.
Failures print one line ``ripnerf: E_<CODE>: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import geometry
from .config import ConfigError, RunConfig, apply_override, canonical_json, resolve
from .data import (
    DataError,
    _read_png,
    load_blender,
    make_multiscale,
    toy_scene,
    write_blender,
    write_png,
)
from .field import FieldConfig, query_coords
from .metrics import MetricReport
from .train import (
    CheckpointError,
    NumericError,
    Trainer,
    config_document,
    load_checkpoint,
    lr_at,
    model_bytes,
    read_checkpoint,
    save_checkpoint,
)

EXIT_OK = 0
EXIT_AMBIGUOUS = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

LEVEL_TOLERANCE = 0.05
POS_TOLERANCE = 1e-9


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# shared helpers


def _checkpoint_config(path, overrides, seed, workers, out):
    """Config embedded in a checkpoint, with command-line overrides on top."""
    doc = read_checkpoint(path)["config"]
    for a in overrides:
        apply_override(doc, a)
    if seed is not None:
        doc["train"]["seed"] = int(seed)
    doc["workers"] = 1 if workers is None else int(workers)
    doc["out"] = "out" if out is None else str(out)
    return RunConfig.from_dict(doc)


def _config(args):
    return resolve(args.config, args.set or (), args.seed, args.workers, args.out)


def _checkpoint_doc(cfg: RunConfig):
    doc = cfg.embedded()
    extra = {k: v for k, v in doc.items() if k not in ("field", "train")}
    return config_document(cfg.field, cfg.train, extra), extra


def load_splits(cfg: RunConfig):
    """``(train, eval)`` datasets at the configured scales."""
    if cfg.data.root:
        root = Path(cfg.data.root)
        train = load_blender(root, "train", cfg.field.scene_radius)
        for name in ("eval", "test", "val"):
            if (root / f"transforms_{name}.json").exists():
                ev = load_blender(root, name, cfg.field.scene_radius)
                break
        else:
            raise DataError(f"{root}: no eval/test/val split")
    else:
        spec = cfg.toy_spec()
        if abs(spec.scene_radius - cfg.field.scene_radius) > 1e-12:
            raise ConfigError("data.toy.scene_radius must equal field.scene_radius")
        train, ev, _ = toy_scene(spec)
    return (make_multiscale(train, cfg.data.train_factors),
            make_multiscale(ev, cfg.data.eval_factors))


def _render_views(trainer: Trainer, views, workers, chunk_rays):
    trainer.model.packed  # build the pyramid once before threads share it
    opts = trainer.render_options(chunk_rays=chunk_rays)

    def one(v):
        return trainer.render_view(v.camera, opts)

    if workers <= 1:
        return [one(v) for v in views]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(one, views))


# ---------------------------------------------------------------------------
# verbs


def cmd_train(args):
    cfg = _config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    doc, extra = _checkpoint_doc(cfg)
    train_set, _ = load_splits(cfg)
    if len(train_set) == 0:
        raise DataError("training split is empty")
    bg = tuple(cfg.render.background)
    if args.resume:
        trainer = load_checkpoint(args.resume, train_set, expected_config=doc)
    else:
        trainer = Trainer(cfg.field, cfg.train, train_set, background=bg)
    header = f"# config {canonical_json(cfg.embedded())}\n"
    every = cfg.train.checkpoint_every
    with open(out / "loss.csv", "w") as fh:
        fh.write(header)
        fh.write("iteration,loss,lr\n")
        if trainer.iteration == 0:
            save_checkpoint(trainer, out / "checkpoint_000000.ripf", extra)
        while trainer.iteration < cfg.train.iterations:
            it = trainer.iteration
            loss = trainer.step()
            fh.write(f"{it},{loss!r},{lr_at(cfg.train, it)!r}\n")
            if every and trainer.iteration % every == 0:
                save_checkpoint(trainer, out / f"checkpoint_{trainer.iteration:06d}.ripf", extra)
    nbytes = save_checkpoint(trainer, out / "checkpoint.ripf", extra)
    (out / "config.json").write_text(json.dumps(cfg.embedded(), indent=2, sort_keys=True) + "\n")
    print(f"trained {trainer.iteration} iterations; model {nbytes} bytes; "
          f"checkpoint {out / 'checkpoint.ripf'}")
    return EXIT_OK


def cmd_render(args):
    cfg = _checkpoint_config(args.checkpoint, args.set or (), args.seed, args.workers, args.out)
    out = Path(cfg.out) / "render"
    out.mkdir(parents=True, exist_ok=True)
    trainer = load_checkpoint(args.checkpoint, None)
    _, ev = load_splits(cfg)
    views = [v for s in cfg.render.scales for v in ev.at_scale(s)]
    if not views:
        raise DataError(f"no {args.split} views at scales {cfg.render.scales}")
    text = {"ripnerf-config": canonical_json(cfg.embedded())}
    images = _render_views(trainer, views, cfg.workers, cfg.render.chunk_rays)
    for v, img in zip(views, images):
        write_png(out / f"{v.name}_x{v.scale}.png", img, text)
    print(f"wrote {len(views)} images to {out}")
    return EXIT_OK


def _read_rgb(path, background):
    img = _read_png(path)
    a = img[..., 3:4]
    return img[..., :3] * a + (1.0 - a) * np.asarray(background)


def cmd_eval(args):
    start = time.perf_counter()
    if args.checkpoint:
        cfg = _checkpoint_config(args.checkpoint, args.set or (), args.seed, args.workers,
                                 args.out)
        trainer = load_checkpoint(args.checkpoint, None)
        _, ev = load_splits(cfg)
        bg = trainer.background
        report = MetricReport(model_bytes=model_bytes(trainer.model),
                              parameter_count=trainer.model.parameter_count())
        views = list(ev.views)
        preds = _render_views(trainer, views, cfg.workers, cfg.render.chunk_rays)
        for v, pred in zip(views, preds):
            report.add(v.name, v.scale, pred, v.rgb(bg))
    else:
        if not (args.pred and args.target):
            raise UsageError("eval needs --checkpoint or both --pred and --target")
        cfg = _config(args)
        report = MetricReport()
        bg = tuple(cfg.render.background)
        targets = sorted(Path(args.target).glob("*.png"))
        if not targets:
            raise DataError(f"no PNG files in {args.target}")
        pairs = []
        for t in targets:
            p = Path(args.pred) / t.name
            if not p.exists():
                raise DataError(f"missing prediction {p}")
            pairs.append((t.stem, _read_rgb(p, bg), _read_rgb(t, bg)))
        full = max(tgt.shape[1] for _, _, tgt in pairs)
        for name, pred, tgt in pairs:
            if pred.shape != tgt.shape:
                raise DataError(f"{name}: prediction shape {pred.shape} != target {tgt.shape}")
            if full % tgt.shape[1]:
                raise DataError(f"{name}: width {tgt.shape[1]} is not a divisor of {full}")
            report.add(name, full // tgt.shape[1], pred, tgt)
    report.wall_clock_s = time.perf_counter() - start
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = report.to_dict()
    doc["config"] = cfg.embedded()
    (out / "metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    table = report.table()
    (out / "metrics.txt").write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


def cmd_fixtures(args):
    cfg = _config(args)
    out = Path(cfg.out)
    spec = cfg.toy_spec()
    train, ev, _ = toy_scene(spec)
    write_blender(train, out, "train")
    write_blender(ev, out, "eval")
    doc = {"scene": spec.to_dict(), "config": cfg.embedded()}
    (out / "scene.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(train)} train and {len(ev)} eval views to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ambiguity experiment


def _ellipsoid(axis, major, minor):
    v = np.asarray(axis, dtype=np.float64)
    v = v / np.linalg.norm(v)
    return minor ** 2 * np.eye(3) + (major ** 2 - minor ** 2) * np.outer(v, v)


def mirrored_pairs(n, seed):
    """``n`` Gaussian pairs related by a reflection through a coordinate plane.

    Such pairs project to identical axis-aligned footprints on the three
    coordinate planes.  The first pair is the exact body-diagonal case.
    """
    rng = np.random.default_rng(seed)
    means = np.zeros((n, 2, 3))
    covs = np.zeros((n, 2, 3, 3))
    for i in range(n):
        if i == 0:
            axis, mirror, major, minor = np.ones(3), 0, 0.3, 0.05
            mean = np.zeros(3)
        else:
            # keep the major axis away from coordinate axes and planes
            axis = rng.uniform(0.35, 1.0, 3) * rng.choice([-1.0, 1.0], 3)
            mirror = int(rng.integers(3))
            major, minor = rng.uniform(0.15, 0.4), rng.uniform(0.03, 0.08)
            mean = rng.uniform(-0.5, 0.5, 3)
            mean[mirror] = 0.0
        flip = np.ones(3)
        flip[mirror] = -1.0
        means[i] = mean
        covs[i, 0] = _ellipsoid(axis, major, minor)
        covs[i, 1] = _ellipsoid(axis * flip, major, minor)
    return means, covs


def collisions(means, covs, solid, field_cfg: FieldConfig):
    """Per pair: ``(collides, max level gap)`` for the planes of ``solid``."""
    planes = geometry.platonic_plane_set(solid)
    n = len(means)
    q = query_coords(means.reshape(-1, 3), covs.reshape(-1, 3, 3), planes, field_cfg)
    q = q.reshape(n, 2, len(planes), 4)
    pos_gap = np.abs(q[:, 0, :, :2] - q[:, 1, :, :2]).max(axis=(-1, -2))
    lvl_gap = np.abs(q[:, 0, :, 2:] - q[:, 1, :, 2:]).max(axis=(-1, -2))
    collide = (pos_gap <= POS_TOLERANCE) & (lvl_gap <= LEVEL_TOLERANCE)
    return collide, lvl_gap


def ambiguity_report(solid, n_pairs, seed, field_cfg):
    means, covs = mirrored_pairs(n_pairs, seed)
    cube, cube_gap = collisions(means, covs, "cube", field_cfg)
    other, other_gap = collisions(means, covs, solid, field_cfg)
    unresolved = cube & other
    return {
        "pairs": n_pairs,
        "seed": seed,
        "solid": solid,
        "cube_collision_fraction": float(cube.mean()),
        "solid_collision_fraction": float(other.mean()),
        "unresolved": int(unresolved.sum()),
        "body_diagonal": {"cube_collides": bool(cube[0]), "solid_collides": bool(other[0]),
                          "cube_level_gap": float(cube_gap[0]),
                          "solid_level_gap": float(other_gap[0])},
        "separates_all": bool(not unresolved.any()),
    }


def cmd_ambiguity(args):
    cfg = _config(args)
    solid = args.solid or cfg.field.solid
    try:
        geometry.Solid(solid)
    except ValueError as exc:
        raise UsageError(f"unknown solid {solid!r}") from exc
    if args.pairs < 1:
        raise UsageError("--pairs must be >= 1")
    seed = cfg.train.seed
    rep = ambiguity_report(solid, args.pairs, seed, cfg.field)
    bd = rep["body_diagonal"]
    print(f"pairs {rep['pairs']}  seed {seed}")
    print(f"cube: collision fraction {rep['cube_collision_fraction']:.3f}")
    print(f"{solid}: collision fraction {rep['solid_collision_fraction']:.3f}")
    print(f"body-diagonal pair: cube {'collides' if bd['cube_collides'] else 'separated'}, "
          f"{solid} {'collides' if bd['solid_collides'] else 'separated'} "
          f"(max level gap {bd['solid_level_gap']:.3f})")
    if args.json:
        print(json.dumps(rep, sort_keys=True))
    if not rep["separates_all"]:
        print(f"ripnerf: E_AMBIGUOUS: {rep['unresolved']} mirrored pair(s) "
              f"remain conflated under {solid}", file=sys.stderr)
        return EXIT_AMBIGUOUS
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted-path override, e.g. train.iterations=500 (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--out", help="output directory")
    parser = _Parser(prog="ripnerf", description="Anisotropic ripmap radiance fields.")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--resume", help="continue from a checkpoint")
    p.set_defaults(fn=cmd_train)
    p = sub.add_parser("render", parents=[common], help="render eval views from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="eval", choices=["eval"])
    p.set_defaults(fn=cmd_render)
    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM report")
    p.add_argument("--checkpoint")
    p.add_argument("--pred", help="directory of predicted PNGs")
    p.add_argument("--target", help="directory of target PNGs (same file names)")
    p.set_defaults(fn=cmd_eval)
    p = sub.add_parser("fixtures", parents=[common], help="write a toy dataset")
    p.set_defaults(fn=cmd_fixtures)
    p = sub.add_parser("ambiguity", parents=[common],
                       help="check that mirrored Gaussian pairs get distinct queries")
    p.add_argument("--solid", help="solid to compare against the cube (default: field.solid)")
    p.add_argument("--pairs", type=int, default=64)
    p.add_argument("--json", action="store_true", help="also print the report as JSON")
    p.set_defaults(fn=cmd_ambiguity)
    return parser


def _fail(code, tag, message):
    message = " ".join(str(message).split())
    print(f"ripnerf: {tag}: {message}", file=sys.stderr)
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.workers is not None and args.workers < 1:
            raise UsageError("--workers must be >= 1")
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        return _fail(EXIT_USAGE, "E_USAGE", exc)
    except (DataError, CheckpointError, FileNotFoundError, IsADirectoryError) as exc:
        return _fail(EXIT_DATA, "E_DATA", exc)
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, "E_NUMERIC", exc)
    except FloatingPointError as exc:
        return _fail(EXIT_NUMERIC, "E_NUMERIC", exc)


if __name__ == "__main__":
    sys.exit(main())
