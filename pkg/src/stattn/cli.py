"""Command-line front end.

    stattn flops    --arch svit-s --res 224 [--csv out.csv]
    stattn verify   [--suite oracle|gradcheck|invariants|all]
    stattn gen-data --out data.stds [--classes 2 --per-class 320 --size 32
                     --seed 7 --kind quadrant-blobs]
    stattn train    --data data.stds --out rundir [--config train.conf]
    stattn infer    --ckpt rundir/model.stwt --image img.ppm [--config c]
    stattn viz      --ckpt rundir/model.stwt --image img.ppm --stage 0
                     --out prefix [--anchor y,x]

Exit codes: 0 success, 2 usage or configuration problem, 3 data/IO
problem, 4 verification or numeric failure. Unknown flags are errors.

Config files use `key = value` lines (see config.py for the key list).
train derives resolution and class count from the dataset header; the
checkpoint gets a `.conf` sidecar so infer and viz can rebuild the model
without repeating the architecture flags.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from stattn.blocks import PRESET_NAMES, build_model, preset
from stattn.checkpoint import load_checkpoint
from stattn.config import (
    TrainSettings,
    arch_from_values,
    read_config,
    read_sidecar,
    train_from_values,
)
from stattn.errors import (
    ConfigError,
    DataError,
    NonFiniteError,
    ShapeError,
    StattnError,
    VerificationError,
)
from stattn.flops import count_model
from stattn.pnm import read_ppm, write_pgm, write_ppm
from stattn.train import (
    DatasetSpec,
    GENERATOR_KINDS,
    OptimizerConfig,
    gen_dataset,
    load_dataset,
    save_dataset,
    split_holdout,
    train_loop,
)
from stattn.tensor import Tensor, no_grad

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_VERIFY = 4


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stattn", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("flops", help="analytic parameter/MAC report")
    p.add_argument("--arch", choices=PRESET_NAMES, help="preset name")
    p.add_argument("--config", help="config file describing the architecture")
    p.add_argument("--res", type=int, help="input resolution override")
    p.add_argument("--csv", help="also write machine-readable rows here")

    p = sub.add_parser("verify", help="run verification suites")
    p.add_argument(
        "--suite",
        default="all",
        choices=("oracle", "gradcheck", "invariants", "all"),
        help="which suite to run (default all)",
    )

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True, help="output .stds path")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--per-class", type=int, default=320)
    p.add_argument("--size", type=int, default=32, help="square image side")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--kind", choices=GENERATOR_KINDS, default="quadrant-blobs")

    p = sub.add_parser("train", help="train on a dataset file")
    p.add_argument("--data", required=True, help="dataset .stds path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="config file (arch + optimizer keys)")
    p.add_argument("--holdout", type=int, default=128, help="held-out sample count")
    p.add_argument(
        "--optimizer",
        choices=("sgd-momentum", "adamw-style"),
        default="adamw-style",
    )

    p = sub.add_parser("infer", help="classify one PPM image")
    p.add_argument("--ckpt", required=True, help="checkpoint .stwt path")
    p.add_argument("--image", required=True, help="binary PPM (P6)")
    p.add_argument("--config", help="override the checkpoint's .conf sidecar")

    p = sub.add_parser("viz", help="segmentation and attention images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="binary PPM (P6)")
    p.add_argument("--stage", type=int, default=0, help="stage index (0-based)")
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--anchor", help="anchor token as y,x (default: center)")
    p.add_argument("--config", help="override the checkpoint's .conf sidecar")
    return ap


# -- helpers ----------------------------------------------------------------------


def _arch_for(args, forced: dict) -> "tuple":
    """(ArchConfig, label) from --arch or --config."""
    if getattr(args, "config", None):
        values = read_config(args.config)
        if args.arch and "arch" not in values:
            values = dict(values, arch=args.arch)
        return arch_from_values(values, **forced), values.get("arch", "custom")
    if args.arch:
        return preset(args.arch, **forced), args.arch
    raise ConfigError("need --arch or --config")


def _resize_integer(img: np.ndarray, res: int) -> np.ndarray:
    """Resize [h, w, 3] u8 to res x res by an exact integer factor: block
    mean when shrinking, pixel replication when growing."""
    h, w, _ = img.shape
    if h != w:
        raise DataError(f"image must be square to resize, got {h}x{w}")
    if h == res:
        return img
    if h > res:
        if h % res:
            raise DataError(f"cannot shrink {h} to {res}: not an integer factor")
        f = h // res
        return (
            img.reshape(res, f, res, f, 3).mean(axis=(1, 3)).round().astype(np.uint8)
        )
    if res % h:
        raise DataError(f"cannot grow {h} to {res}: not an integer factor")
    f = res // h
    return np.repeat(np.repeat(img, f, axis=0), f, axis=1)


def _model_from_ckpt(args):
    cfg = (
        arch_from_values(read_config(args.config))
        if getattr(args, "config", None)
        else read_sidecar(args.ckpt)
    )
    model = build_model(cfg, seed=0)
    model.load_state(load_checkpoint(args.ckpt))
    return model


def _image_input(path: str, res: int) -> np.ndarray:
    img = read_ppm(path)
    img = _resize_integer(img, res)
    return (img.transpose(2, 0, 1)[None].astype(np.float32)) / 255.0


# -- subcommands --------------------------------------------------------------------


def cmd_flops(args) -> int:
    cfg, label = _arch_for(args, {})
    rep = count_model(cfg, resolution=args.res, name=label)
    sys.stdout.write(rep.as_text())
    if args.csv:
        Path(args.csv).write_text(rep.as_csv(), encoding="utf-8")
        print(f"csv written to {args.csv}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from stattn.verify import run_suites  # heavy import, keep it lazy

    results = run_suites([args.suite])
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        raise VerificationError(f"{len(failed)} checks failed")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    spec = DatasetSpec(
        n_classes=args.classes,
        per_class=args.per_class,
        height=args.size,
        width=args.size,
        seed=args.seed,
        kind=args.kind,
    )
    ds = gen_dataset(spec)
    save_dataset(args.out, ds)
    print(f"wrote {len(ds)} samples ({args.classes} classes) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    n, h, w, ch = ds.images.shape
    if h != w:
        raise ConfigError(f"dataset images must be square, got {h}x{w}")
    values = read_config(args.config) if args.config else {}
    forced = {"res": h, "n_classes": ds.n_classes, "in_channels": ch}
    if values:
        cfg = arch_from_values(values, **forced)
    else:
        cfg = preset("tiny", **forced)
    settings = train_from_values(values) if values else TrainSettings()
    opt_cfg = OptimizerConfig.from_settings(settings, kind=args.optimizer)
    if not 0 < args.holdout < n:
        raise ConfigError(f"--holdout must be in 1..{n - 1}, got {args.holdout}")
    train_ds, hold_ds = split_holdout(ds, args.holdout)
    model = build_model(cfg, seed=settings.seed)
    print(
        f"training {n - args.holdout} samples ({ds.n_classes} classes, {h}x{w}), "
        f"holdout {args.holdout}, {opt_cfg.steps} steps, batch {opt_cfg.batch}, "
        f"{opt_cfg.kind}, lr {opt_cfg.lr}, seed {opt_cfg.seed}"
    )
    report = train_loop(model, train_ds, opt_cfg, holdout_ds=hold_ds, out_dir=args.out)
    print(
        f"final train acc {report.final_train_acc:.4f}, "
        f"holdout acc {report.final_holdout_acc:.4f} "
        f"(best at step {report.best_step}), {report.seconds:.1f}s"
    )
    print(f"note: {report.notes}")
    print(f"checkpoint + metrics written under {args.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model = _model_from_ckpt(args)
    x = _image_input(args.image, model.cfg.res)
    if x.shape[1] != model.cfg.in_channels:
        raise DataError(
            f"image has {x.shape[1]} channels, model wants {model.cfg.in_channels}"
        )
    with no_grad():
        logits = model.forward(x, training=False).data[0]
    z = logits - logits.max()
    probs = np.exp(z) / np.exp(z).sum()
    label = int(probs.argmax())
    print(f"label {label}")
    for k, p in enumerate(probs):
        print(f"class {k}: {p:.6f}")
    return EXIT_OK


def cmd_viz(args) -> int:
    from stattn.viz import (
        attention_row_image,
        initial_assignment,
        learned_assignment,
        render_heatmap,
        render_segmentation,
    )

    model = _model_from_ckpt(args)
    if not 0 <= args.stage <= 3:
        raise ConfigError(f"--stage must be 0..3, got {args.stage}")
    sta_cfg = model.cfg.sta_config(args.stage)
    if (sta_cfg.grid_h, sta_cfg.grid_w) == (1, 1):
        raise ConfigError(
            f"stage {args.stage} has a 1x1 grid (plain global attention); "
            "pick a stage with a real super-token grid"
        )
    x = _image_input(args.image, model.cfg.res)
    with no_grad():
        tokens, cfg, weights, rel_bias = model.sta_inspect(Tensor(x), args.stage)
    _, _, th, tw = tokens.shape
    if args.anchor is None:
        ay, ax = th // 2, tw // 2
    else:
        try:
            ay, ax = (int(v) for v in args.anchor.split(","))
        except ValueError as e:
            raise ConfigError(f"--anchor must be y,x integers, got {args.anchor!r}") from e
    if not (0 <= ay < th and 0 <= ax < tw):
        raise ConfigError(f"anchor ({ay},{ax}) outside the {th}x{tw} token map")

    scale = model.cfg.res // th
    initial = initial_assignment(th, tw, cfg.grid_h, cfg.grid_w)
    learned = learned_assignment(tokens, cfg)
    heat = attention_row_image(tokens, cfg, weights, (ay, ax), rel_bias=rel_bias)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    files = {
        f"{out}_seg_initial.ppm": render_segmentation(initial, scale),
        f"{out}_seg.ppm": render_segmentation(learned, scale),
    }
    for path, img in files.items():
        write_ppm(path, img)
    heat_path = f"{out}_attn.pgm"
    write_pgm(heat_path, render_heatmap(heat, scale))
    for path in [*files, heat_path]:
        print(f"wrote {path}")
    print(
        f"stage {args.stage}: {th}x{tw} tokens, cells {cfg.grid_h}x{cfg.grid_w}, "
        f"{initial.max() + 1} regions, anchor ({ay},{ax})"
    )
    return EXIT_OK


_DISPATCH = {
    "flops": cmd_flops,
    "verify": cmd_verify,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "viz": cmd_viz,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _DISPATCH[args.cmd](args)
    except (ConfigError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (VerificationError, NonFiniteError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VERIFY
    except StattnError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
