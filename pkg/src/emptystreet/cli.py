"""Command line: synth, reconstruct, unveil, render, eval.

Every subcommand reads the same sectioned config (``--config``) with
``--set section.key=value`` overrides, and writes only below ``--out``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("emptystreet")

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="INI config file; missing keys keep their defaults")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--threads", type=int, default=None, help="upper bound on BLAS/OpenMP worker threads")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="emptystreet", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic street dataset")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="shorthand for --set synth.seed=N")

    p = sub.add_parser("reconstruct", help="fit splats to a dataset (stage 1 + stage 2)")
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory or manifest.json")
    p.add_argument("--out", required=True)

    p = sub.add_parser("unveil", help="remove labeled objects, inpaint and re-optimize")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--backend", choices=("oracle", "remote", "identity"), default="oracle")
    p.add_argument("--labels", type=int, nargs="*", help="labels to remove (default: all removable)")

    p = sub.add_parser("render", help="render color/alpha/depth/normal/semantic for every dataset camera")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="per-frame and summary metrics as key=value lines")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--target", default="image",
                   help="'image' (captured frames) or the name of a per-frame extra, e.g. 'empty'")
    p.add_argument("--masks", help="directory of NNNN.png masks for masked metrics")
    return ap


def _parse_overrides(items):
    from .io import ConfigError

    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _records(rows) -> str:
    def fmt(v):
        return f"{v:.6g}" if isinstance(v, float) else str(v)
    return "".join(" ".join(f"{k}={fmt(v)}" for k, v in r.items()) + "\n" for r in rows)


def _write_metrics(out: Path, rows, name="metrics.txt"):
    from .io import atomic_write_bytes

    text = _records(rows)
    atomic_write_bytes(out / name, text.encode())
    sys.stdout.write(text)


def _train_config(sections):
    from .io import train_config_from

    return train_config_from(sections)


def cmd_synth(args, sections):
    import numpy as np

    from .io import atomic_write_bytes, config_text, parse_config, write_dataset
    from .synthetic import SKY, generate_synthetic_scene

    syn = sections["synth"]
    data = generate_synthetic_scene(seed=int(syn["seed"]), n_boxes=int(syn["boxes"]), n_frames=int(syn["frames"]),
                                    width=int(syn["width"]), height=int(syn["height"]))
    out = Path(args.out)
    write_dataset(out, data.cameras, data.images_full, data.labels_full, data.points, data.point_colors,
                  data.point_labels, data.palette,
                  extras={"empty": data.images_empty, "unobservable": data.unobservable})
    # starting config for this dataset: sky carries no geometry, so keep it out of the CE term
    cfg = parse_config(config_text(sections), {"train.ignore_label": SKY})
    atomic_write_bytes(out / "config.ini", config_text(cfg).encode())
    _write_metrics(out, [dict(frames=len(data.cameras), points=len(data.points),
                              unobservable_px=int(np.sum(data.unobservable)), seed=syn["seed"])])


def cmd_reconstruct(args, sections):
    import time

    from .io import atomic_write_bytes, load_dataset, save_checkpoint
    from .training import evaluate, reconstruct, semantic_accuracy

    ds = load_dataset(args.data)
    cfg = _train_config(sections)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    scene, hist = reconstruct(ds.points, ds.point_colors, ds.point_labels, ds.palette, ds.cameras,
                              ds.images, ds.labels, cfg)
    save_checkpoint(scene, out / "scene.uspl")
    rows = [dict(step=i, loss=l, **c) for i, (l, c) in enumerate(zip(hist.losses, hist.components))
            if i % 50 == 0 or i == len(hist.losses) - 1]
    atomic_write_bytes(out / "train_log.txt", _records(rows).encode())
    ev = evaluate(scene, ds.cameras, ds.images)
    _write_metrics(out, [dict(splats=len(scene), psnr=ev["psnr"], ssim=ev["ssim"],
                              semantic_accuracy=semantic_accuracy(scene, ds.cameras, ds.labels),
                              labels_intact=int(hist.labels_intact), seconds=round(time.time() - t0, 1))])


def _backend(name, ds, sections):
    from .time_reversal import IdentityInpainter, OracleInpainter, RemoteConfig, RemoteInpainter

    if name == "identity":
        return IdentityInpainter()
    if name == "remote":
        return RemoteInpainter(RemoteConfig(**sections["remote"]))
    if "empty" not in ds.extras:
        raise ValueError("oracle backend needs per-frame 'empty' images in the dataset")
    return OracleInpainter({c.time_index: im for c, im in zip(ds.cameras, ds.extras["empty"])})


def cmd_unveil(args, sections):
    import numpy as np

    from .io import load_checkpoint, load_dataset, save_checkpoint, write_label_png, write_png
    from .pipeline import unveil
    from .training import frozen_unchanged

    scene = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    cfg = _train_config(sections)
    backend = _backend(args.backend, ds, sections)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sch = sections["schedule"]
    res = unveil(scene, ds.cameras, cfg, backend, labels=args.labels, persist_dir=out / "jobs",
                 delta=float(sch["delta"]), min_reference_pixels=int(sch["min_reference_pixels"]))
    save_checkpoint(res.scene, out / "scene.uspl")
    for cam in ds.cameras:
        t = cam.time_index
        write_png(out / "masks" / f"{t:04d}.png", np.where(res.masks[t], 255, 0).astype(np.uint8))
        write_png(out / "pseudo" / f"{t:04d}.png", res.inpainted.images[t])
        write_label_png(out / "provenance" / f"{t:04d}.png", res.inpainted.provenance[t])
    _write_metrics(out, [dict(removed=len(res.removal), seeded=res.reopt.n_seeded, jobs=len(res.schedule.jobs),
                              mask_px=int(sum(m.sum() for m in res.masks.values())),
                              frozen=int(res.reopt.frozen.sum()),
                              frozen_unchanged=int(frozen_unchanged(scene, res.removal, res.reopt)),
                              labels_intact=int(res.reopt.history.labels_intact), splats=len(res.scene))])


def cmd_render(args, sections):
    import numpy as np

    from .io import load_checkpoint, load_dataset, write_depth_png, write_label_png, write_png
    from .rasterizer import RenderOptions, render

    scene = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    out = Path(args.out)
    for cam in ds.cameras:
        t = cam.time_index
        buf = render(scene, cam, RenderOptions())
        write_png(out / "color" / f"{t:04d}.png", buf.color)
        write_png(out / "alpha" / f"{t:04d}.png", buf.alpha)
        write_depth_png(out / "depth" / f"{t:04d}.png", buf.depth)
        write_png(out / "normal" / f"{t:04d}.png", 0.5 * (buf.normal + 1.0))
        sem = np.where(buf.alpha > 0.5, buf.semantic.argmax(-1), 255)
        write_label_png(out / "semantic" / f"{t:04d}.png", sem)
    _write_metrics(out, [dict(frames=len(ds.cameras), splats=len(scene))])


def cmd_eval(args, sections):
    import numpy as np

    from .io import DatasetError, load_checkpoint, load_dataset, read_png
    from .training import evaluate, semantic_accuracy

    scene = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    if args.target == "image":
        gts = ds.images
    elif args.target in ds.extras:
        gts = ds.extras[args.target]
    else:
        raise DatasetError(f"dataset has no per-frame '{args.target}' images")
    masks = None
    if args.masks:
        mdir = Path(args.masks)
        masks = []
        for cam in ds.cameras:
            p = mdir / f"{cam.time_index:04d}.png"
            if not p.exists():
                raise FileNotFoundError(f"mask not found: {p}")
            masks.append(read_png(p)[..., 0] > 0.5)
    ev = evaluate(scene, ds.cameras, gts, masks)
    rows = [dict(fr) for fr in ev["frames"]]
    summary = dict(summary=1, psnr=ev["psnr"], ssim=ev["ssim"])
    if "masked_psnr" in ev:
        summary["masked_psnr"] = ev["masked_psnr"]
    if args.target == "image":
        summary["semantic_accuracy"] = semantic_accuracy(scene, ds.cameras, ds.labels)
    summary["splats"] = len(scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_metrics(out, rows + [summary])
    if not np.isfinite(ev["psnr"]):
        raise ValueError("non-finite PSNR")


COMMANDS = dict(synth=cmd_synth, reconstruct=cmd_reconstruct, unveil=cmd_unveil, render=cmd_render,
                eval=cmd_eval)


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 2
        # only effective if numpy has not been loaded yet in this process
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        from .io import load_config

        overrides = _parse_overrides(args.overrides)
        if getattr(args, "seed", None) is not None:
            overrides["synth.seed"] = str(args.seed)
        sections = load_config(args.config, overrides)
        COMMANDS[args.command](args, sections)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # every failure ends in a one-line diagnostic
        if args.verbose:
            log.exception("%s failed", args.command)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
