"""Command-line entry point: ``splatguide <subcommand> [flags]``.

Exit codes: 0 ok, 2 usage or configuration error, 3 runtime error, 4 numeric
failure (NaN/Inf, failed gradient check).
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import ConfigError, NumericError, SplatGuideError, __version__

log = logging.getLogger("splatguide")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_NUMERIC = 0, 2, 3, 4

# fields that live in their own section rather than under "train"
_TRAIN_ELSEWHERE = {"splat", "T", "beta_start", "beta_end", "mask_coverage", "mask_tolerance"}
# file paths are flags; only the resume point is also settable from JSON
IO_KEYS = ("resume",)


# ---------------------------------------------------------------- config

@dataclasses.dataclass
class CliConfig:
    """Every tunable in one place, grouped into sections mirroring the JSON layout.

    ``{"mask": {...}, "splat": {...}, "schedule": {...}, "train": {...}, "io": {...}}``
    Any section or key may be omitted; defaults are the library defaults.
    """
    mask: dict = dataclasses.field(default_factory=dict)
    splat: dict = dataclasses.field(default_factory=dict)
    schedule: dict = dataclasses.field(default_factory=dict)
    train: dict = dataclasses.field(default_factory=dict)
    io: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        from .masks import MaskConfig
        from .splat import SplatConfig
        from .trainer import TrainConfig

        allowed = {
            "mask": _names(MaskConfig),
            "splat": _names(SplatConfig),
            "schedule": {"T", "beta_start", "beta_end"},
            "train": _names(TrainConfig) - _TRAIN_ELSEWHERE,
            "io": set(IO_KEYS),
        }
        for section, keys in allowed.items():
            unknown = set(getattr(self, section)) - keys
            if unknown:
                raise ConfigError(f"unknown keys in section {section!r}: {sorted(unknown)}")
        # validate eagerly so bad values fail before any work starts
        self.mask_config()
        self.splat_config()
        self.train_config()

    @classmethod
    def from_dict(cls, d: dict) -> "CliConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        for k, v in d.items():
            if not isinstance(v, dict):
                raise ConfigError(f"config section {k!r} must be an object")
        return cls(**{k: dict(v) for k, v in d.items()})

    @classmethod
    def load(cls, path) -> "CliConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return {f.name: dict(getattr(self, f.name)) for f in dataclasses.fields(self)}

    def mask_config(self):
        from .masks import MaskConfig

        d = dict(self.mask)
        for k in ("stroke_count_range", "width_range"):
            if k in d:
                d[k] = tuple(d[k])
        return MaskConfig(**d)

    def splat_config(self):
        from .splat import SplatConfig

        d = dict(self.splat)
        if "scales" in d:
            d["scales"] = tuple(d["scales"])
        return SplatConfig(**d)

    def train_config(self):
        from .trainer import TrainConfig

        m = self.mask_config()
        d = dict(self.train, **self.schedule)
        d.update(splat=self.splat_config(), mask_coverage=m.target_coverage,
                 mask_tolerance=m.coverage_tolerance)
        if "loss_weights" in d:
            from .trainer import _reject_unknown
            from .losses import LossWeights

            _reject_unknown(d["loss_weights"], LossWeights, "loss_weights")
        return TrainConfig(**d)

    def effective(self) -> dict:
        """Fully resolved configuration, defaults included."""
        t = self.train_config().to_dict()
        m = dataclasses.asdict(self.mask_config())
        return {
            "mask": {k: list(v) if isinstance(v, tuple) else v for k, v in m.items()},
            "splat": t.pop("splat"),
            "schedule": {k: t.pop(k) for k in ("T", "beta_start", "beta_end")},
            "train": {k: v for k, v in t.items() if k not in _TRAIN_ELSEWHERE},
            "io": dict(self.io),
        }


def _names(klass) -> set[str]:
    return {f.name for f in dataclasses.fields(klass)}


def _parse_set(items) -> dict[str, dict]:
    """``section.key=value`` pairs; values are parsed as JSON, falling back to a plain string."""
    out: dict[str, dict] = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out.setdefault(section, {})[name] = value
    return out


def resolve_config(args, section_flags: dict[str, dict], base: dict | None = None) -> CliConfig:
    """base (e.g. from a checkpoint) < JSON file < --set pairs < dedicated flags."""
    d = {k: dict(v) for k, v in (base or {}).items()}
    if getattr(args, "config", None):
        for section, values in CliConfig.load(args.config).to_dict().items():
            d.setdefault(section, {}).update(values)
    for layer in (_parse_set(getattr(args, "set", None)), section_flags):
        for section, values in layer.items():
            d.setdefault(section, {}).update({k: v for k, v in values.items() if v is not None})
    cfg = CliConfig.from_dict(d)
    log.info("effective config: %s", json.dumps(cfg.effective(), sort_keys=True))
    return cfg


# ---------------------------------------------------------------- commands

def cmd_gen_mask(args) -> int:
    from .masks import coverage, generate_brush_mask
    from .tensor import FieldMap, save_field, save_mask_pgm

    cfg = resolve_config(args, {"mask": {"seed": args.seed, "target_coverage": args.coverage,
                                         "coverage_tolerance": args.tolerance}})
    mask = generate_brush_mask(args.height, args.width, cfg.mask_config())
    save_field(FieldMap(mask, "mask"), args.out)
    if args.preview:
        save_mask_pgm(mask, args.preview)
    print(f"wrote {args.out}: {args.height}x{args.width} coverage {coverage(mask):.4f}")
    return EXIT_OK


def cmd_splat(args) -> int:
    from .splat import splat_guidance
    from .tensor import field_to_pgm, load_mask, load_ppm, save_field

    cfg = resolve_config(args, {"splat": {"beta": args.beta, "epsilon": args.epsilon,
                                          "truncation": args.truncation, "scales": args.scales,
                                          "sigma_max": args.sigma_max}})
    image = load_ppm(args.image)
    mask = load_mask(args.mask)
    result = splat_guidance(image, mask, cfg.splat_config())
    save_field(result.splat, args.out)
    if args.preview:
        field_to_pgm(result.splat, args.preview)
    if args.report:
        from .report import guidance_figure

        out = Path(args.report)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "splat_scales.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scale", "raw_min", "raw_max", "raw_mean"])
            for r, raw in zip(cfg.splat_config().scales, result.raw):
                w.writerow([r, repr(float(raw.min())), repr(float(raw.max())), repr(float(raw.mean()))])
        guidance_figure(image, mask, result, out / "guidance.png")
    s = result.splat.data
    print(f"wrote {args.out}: splat range [{s.min():.4f}, {s.max():.4f}] mean {s.mean():.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .report import loss_figure
    from .trainer import train

    cfg = resolve_config(args, {
        "train": {"dataset": args.dataset, "dataset_kind": args.dataset_kind, "epochs": args.epochs,
                  "batch_size": args.batch_size, "lr": args.lr, "max_steps": args.max_steps,
                  "limit": args.limit, "seed": args.seed, "out_dir": args.out_dir,
                  "checkpoint_interval": args.checkpoint_interval},
        "schedule": {"T": args.T},
        "io": {"resume": args.resume},
    })
    resume = cfg.io.get("resume")
    result = train(cfg.train_config(), resume=resume)
    figure = result.log_path.with_name("loss_curve.png")
    loss_figure(result.log_path, figure)
    last = result.history[-1] if result.history else {}
    summary = " ".join(f"{k}={last[k]:.5g}" for k in ("noise", "rec", "perc", "style", "tv", "total") if k in last)
    print(f"trained {result.steps} steps; checkpoint {result.checkpoint}; log {result.log_path}; "
          f"figure {figure}" + (f"; last {summary}" if summary else ""))
    return EXIT_OK


def cmd_inpaint(args) -> int:
    from .diffusion import NoiseSchedule, build_guidance, inpaint
    from .masks import apply_mask
    from .metrics import mse, psnr_from_mse, ssim
    from .nn import load_checkpoint
    from .tensor import load_mask, load_ppm, save_ppm

    net, _, extra = load_checkpoint(args.checkpoint)
    base = {}
    trained = extra.get("config") if isinstance(extra, dict) else None
    if trained:
        base["splat"] = trained.get("splat", {})
        base["schedule"] = {k: trained[k] for k in ("T", "beta_start", "beta_end") if k in trained}
    cfg = resolve_config(args, {"schedule": {"T": args.T}}, base)
    sched = cfg.train_config().schedule()
    image = load_ppm(args.image)
    mask = load_mask(args.mask)
    if image.shape[2] != net.config.img_channels:
        raise ConfigError(f"image has {image.shape[2]} channels, checkpoint expects {net.config.img_channels}")
    incomplete = apply_mask(image, mask)
    guidance = build_guidance(incomplete, mask, cfg.splat_config())

    snapshot = None
    if args.snapshot_every:
        snap_dir = Path(args.snapshot_dir or Path(args.out).with_suffix("").as_posix() + "_steps")
        snap_dir.mkdir(parents=True, exist_ok=True)

        def snapshot(t, img):
            if t % args.snapshot_every == 0 or t == 1:
                save_ppm(img, snap_dir / f"t{t:04d}.ppm")

    out = inpaint(incomplete, mask, guidance, net, sched, seed=args.seed, snapshot=snapshot)
    save_ppm(out, args.out)
    truth = None
    if args.truth:
        truth = load_ppm(args.truth)
        # score what was written, i.e. after 8-bit quantisation
        written = load_ppm(args.out)
        err = mse(written, truth)
        parts = [f"mse={err:.6e}", f"psnr={psnr_from_mse(err):.3f}"]
        try:
            parts.append(f"ssim={ssim(written, truth):.5f}")
        except ValueError:
            parts.append("ssim=n/a")
        if mask.any():
            m_err = mse(written, truth, np.broadcast_to(mask[:, :, None].astype(bool), truth.shape))
            parts += [f"masked_mse={m_err:.6e}", f"masked_psnr={psnr_from_mse(m_err):.3f}"]
        print("metrics " + " ".join(parts))
    if args.figure:
        from .report import inpaint_figure

        inpaint_figure(incomplete, mask, load_ppm(args.out), args.figure, truth)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import evaluate_dir
    from .report import metrics_figure

    report = evaluate_dir(args.results, args.truth)
    print(report.format_table())
    if args.out:
        report.write_csv(args.out)
        figure = Path(args.out).with_suffix(".png")
        metrics_figure(report, figure)
        print(f"wrote {args.out} and {figure}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .trainer import denoiser_grad_check

    report = denoiser_grad_check(size=args.size, channels=args.channels, n_params=args.params, h=args.h,
                                 tolerance=args.tolerance, seed=args.seed)
    print(report.format())
    print(f"max relative error: {report.max_rel_error:.3e} ({'PASS' if report.passed else 'FAIL'})")
    return EXIT_OK if report.passed else EXIT_NUMERIC


# ---------------------------------------------------------------- parser

def _common(p, seed_help=None):
    p.add_argument("--config", help="JSON config file (sections mask, splat, schedule, train, io)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override any config field; may repeat (value parsed as JSON)")
    if seed_help:
        p.add_argument("--seed", type=int, help=seed_help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatguide", description=__doc__.splitlines()[0],
                                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    # -q also accepted after the subcommand name
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS,
                        help="only log warnings and errors")

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_, description=help_, parents=[shared],
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.set_defaults(func=fn)
        return p

    p = add("gen-mask", cmd_gen_mask, "generate a random brush-stroke mask (1 = missing)")
    p.add_argument("--height", type=int, default=32, help="mask height in pixels")
    p.add_argument("--width", type=int, default=32, help="mask width in pixels")
    p.add_argument("--coverage", type=float, help="target missing fraction (default 0.2)")
    p.add_argument("--tolerance", type=float, help="accepted deviation from the target (default 0.05)")
    p.add_argument("--out", required=True, help="output mask field file")
    p.add_argument("--preview", help="optional PGM preview (255 = missing)")
    _common(p, "mask RNG seed (default 0)")

    p = add("splat", cmd_splat, "compute the normalised multi-scale splat map for an image and mask")
    p.add_argument("--image", required=True, help="input PPM/PGM image")
    p.add_argument("--mask", required=True, help="mask field file or PGM (>= 128 = missing)")
    p.add_argument("--out", required=True, help="output splat field file")
    p.add_argument("--preview", help="optional PGM rendering of the splat map")
    p.add_argument("--report", help="directory for guidance.png and splat_scales.csv")
    p.add_argument("--beta", type=float, help="amplitude decay per pixel of distance (default 0.1)")
    p.add_argument("--epsilon", type=float, help="structure tensor regulariser (default 1e-5)")
    p.add_argument("--truncation", type=float, help="Mahalanobis cutoff (default 3)")
    p.add_argument("--scales", type=int, nargs="+", help="structure tensor radii (default 1 2 4)")
    p.add_argument("--sigma-max", type=float, help="std-dev cap in pixels (default max(H,W)/4)")
    _common(p)

    p = add("train", cmd_train, "train the denoiser")
    p.add_argument("--dataset", help="directory of PPM images or a CIFAR-10 binary batch")
    p.add_argument("--dataset-kind", choices=("ppm", "cifar10"), help="dataset format (default ppm)")
    p.add_argument("--limit", type=int, help="use only the first N images")
    p.add_argument("--epochs", type=int, help="passes over the data (default 1)")
    p.add_argument("--batch-size", type=int, help="images per step (default 8)")
    p.add_argument("--lr", type=float, help="AdamW learning rate (default 2e-4)")
    p.add_argument("--max-steps", type=int, help="stop after this many steps")
    p.add_argument("--T", type=int, help="diffusion steps (default 100)")
    p.add_argument("--checkpoint-interval", type=int, help="also checkpoint every N steps")
    p.add_argument("--out-dir", help="directory for checkpoint, loss_log.csv and loss_curve.png")
    p.add_argument("--resume", help="checkpoint to resume from")
    _common(p, "initialisation and sampling seed (default 0)")

    p = add("inpaint", cmd_inpaint, "fill the missing region of an image with a trained denoiser")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint file")
    p.add_argument("--image", required=True, help="input PPM (pixels under the mask are ignored)")
    p.add_argument("--mask", required=True, help="mask field file or PGM")
    p.add_argument("--out", required=True, help="output PPM")
    p.add_argument("--truth", help="ground-truth PPM; prints a metrics line")
    p.add_argument("--T", type=int, help="override the checkpoint's diffusion steps")
    p.add_argument("--snapshot-every", type=int, default=0, help="write intermediate images every k steps")
    p.add_argument("--snapshot-dir", help="directory for snapshots (default <out>_steps)")
    p.add_argument("--figure", help="optional PNG with input, output and truth")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    _common(p)

    p = add("eval", cmd_eval, "MSE/PSNR/SSIM over matching filenames in two directories")
    p.add_argument("--results", required=True, help="directory of inpainted images")
    p.add_argument("--truth", required=True, help="directory of ground-truth images")
    p.add_argument("--out", help="CSV report; a PNG figure is written next to it")

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of the denoiser and loss gradients")
    p.add_argument("--size", type=int, default=8, help="image side in pixels")
    p.add_argument("--channels", type=int, default=3, help="image channels")
    p.add_argument("--params", type=int, default=20, help="number of scalar parameters to check")
    p.add_argument("--h", type=float, default=1e-3, help="central-difference step")
    p.add_argument("--tolerance", type=float, default=1e-2, help="max accepted relative error")
    p.add_argument("--seed", type=int, default=0, help="sample and parameter selection seed")
    return parser


def _thread_limit():
    raw = os.environ.get("SPLATGUIDE_THREADS", "").strip()
    if not raw:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    from .metrics import worker_count

    return threadpool_limits(limits=worker_count())


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with _thread_limit():
            return args.func(args)
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_USAGE
    except (SplatGuideError, OSError, ValueError, IndexError, ArithmeticError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
