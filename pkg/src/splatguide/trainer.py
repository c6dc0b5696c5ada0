"""Training loop: masks -> guidance -> forward diffusion -> denoiser -> losses -> AdamW."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ConfigError, NumericError
from .diffusion import (NoiseSchedule, build_guidance, forward_diffuse, from_diffusion, to_diffusion,
                        x0_estimate)
from .losses import TERMS, FeatureExtractor, LossWeights, evaluate
from .masks import MaskConfig, generate_brush_mask
from .nn import AdamW, DenoiserConfig, DenoiserNet, grad_check, load_checkpoint, save_checkpoint
from .splat import SplatConfig
from .tensor import cifar10_count, load_cifar10_batch, load_ppm

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "t", *TERMS, "total")


@dataclass
class TrainConfig:
    dataset: str = ""
    dataset_kind: str = "ppm"          # "ppm" (directory) or "cifar10" (binary batch file)
    limit: int | None = None           # use only the first N images
    image_size: int = 32
    batch_size: int = 8
    epochs: int = 1
    max_steps: int | None = None
    lr: float = 2e-4
    weight_decay: float = 0.01
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    loss_weights: LossWeights = field(default_factory=LossWeights)
    mask_coverage: float = 0.20
    mask_tolerance: float = 0.05
    splat: SplatConfig = field(default_factory=SplatConfig)
    widths: tuple[int, int, int] = (32, 64, 128)
    strides: tuple[int, int] = (1, 1)
    seed: int = 0
    checkpoint_interval: int = 0       # steps; 0 = only at the end
    out_dir: str = "runs/default"
    cache_guidance: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.dataset_kind not in ("ppm", "cifar10"):
            raise ConfigError(f"unknown dataset_kind {self.dataset_kind!r}")
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if isinstance(self.splat, dict):
            self.splat = SplatConfig(**self.splat)
        self.widths = tuple(self.widths)
        self.strides = tuple(self.strides)

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.T, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        d["strides"] = list(self.strides)
        d["splat"]["scales"] = list(self.splat.scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        d = dict(d)
        if "loss_weights" in d:
            _reject_unknown(d["loss_weights"], LossWeights, "loss_weights")
        if "splat" in d:
            _reject_unknown(d["splat"], SplatConfig, "splat")
        return cls(**d)


def _reject_unknown(d, klass, label):
    names = {f.name for f in dataclasses.fields(klass)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {label} keys: {sorted(unknown)}")


# full-scale settings for reference runs
FULL_SCALE_PRESET = {"batch_size": 128, "epochs": 200, "lr": 2e-4}


# ---------------------------------------------------------------- data

def load_dataset(config: TrainConfig) -> list[np.ndarray]:
    if not config.dataset:
        raise ConfigError("no dataset configured")
    path = Path(config.dataset)
    if config.dataset_kind == "cifar10":
        n = cifar10_count(path)
        if config.limit is not None:
            n = min(n, config.limit)
        images = [load_cifar10_batch(path, i)[0] for i in range(n)]
    else:
        if not path.is_dir():
            raise ConfigError(f"dataset directory {path} does not exist")
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".ppm", ".pgm"))
        if config.limit is not None:
            files = files[:config.limit]
        images = []
        for f in files:
            try:
                images.append(load_ppm(f))
            except OSError as exc:
                raise OSError(f"{f}: {exc}") from exc
    if not images:
        raise ConfigError(f"dataset {path} contains no images")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ConfigError(f"dataset images differ in shape: {sorted(shapes)}")
    h, w, _ = images[0].shape
    # three 2x pooling stages in the feature extractor
    if h % 8 or w % 8:
        raise ConfigError(f"image size {h}x{w} must be divisible by 8")
    return images


# ---------------------------------------------------------------- one step

@dataclass
class TrainSample:
    """A batch ready for the denoiser: clean images, noise, timesteps, guidance."""
    images: np.ndarray   # B x C x H x W in [0, 1]
    masks: np.ndarray    # B x 1 x H x W
    cond: np.ndarray     # B x (C + 3) x H x W
    t: np.ndarray        # B
    eps: np.ndarray      # B x C x H x W


def make_sample(images, rng: np.random.Generator, config: TrainConfig, schedule: NoiseSchedule,
                cache: dict | None = None, keys=None) -> TrainSample:
    imgs, masks, conds, ts = [], [], [], []
    for i, img in enumerate(images):
        h, w, _ = img.shape
        mask_seed = int(rng.integers(0, 2**63))
        mcfg = MaskConfig(config.mask_coverage, config.mask_tolerance, seed=mask_seed)
        mask = generate_brush_mask(h, w, mcfg)
        ckey = None if cache is None or keys is None else (keys[i], mask_seed)
        if ckey is not None and ckey in cache:
            guide = cache[ckey]
        else:
            guide = build_guidance(img, mask, config.splat)
            if ckey is not None:
                cache[ckey] = guide
        imgs.append(img.transpose(2, 0, 1))
        masks.append(mask[None])
        conds.append(guide.cond()[0])
        ts.append(int(rng.integers(1, schedule.T + 1)))
    batch = np.stack(imgs).astype(np.float64)
    eps = rng.standard_normal(batch.shape)
    return TrainSample(batch, np.stack(masks).astype(np.float64), np.stack(conds), np.array(ts), eps)


def loss_and_backward(net: DenoiserNet, sample: TrainSample, schedule: NoiseSchedule,
                      fx: FeatureExtractor, weights: LossWeights) -> dict[str, float]:
    """Forward the batch, evaluate every loss term and backprop into ``net``'s gradients."""
    x0 = to_diffusion(sample.images)
    x_t = forward_diffuse(x0, sample.t, sample.eps, schedule)
    eps_hat = net.forward(x_t.astype(net.dtype), sample.cond.astype(net.dtype), sample.t).astype(np.float64)
    raw = from_diffusion(x0_estimate(x_t, eps_hat, sample.t, schedule))
    i_hat = np.clip(raw, 0.0, 1.0)
    breakdown, g_eps, g_img = evaluate(eps_hat, sample.eps, i_hat, sample.images, sample.masks, fx, weights)
    if not math.isfinite(breakdown["total"]):
        raise NumericError(f"non-finite loss {breakdown}")
    ab = np.array([schedule.abar(int(t)) for t in sample.t]).reshape(-1, 1, 1, 1)
    inside = (raw > 0.0) & (raw < 1.0)
    g_eps = g_eps + g_img * inside * (-0.5 * np.sqrt(1.0 - ab) / np.sqrt(ab))
    net.backward(g_eps)
    return breakdown


def train_step(net: DenoiserNet, optimizer: AdamW, images, config: TrainConfig, rng: np.random.Generator,
               fx: FeatureExtractor | None = None, schedule: NoiseSchedule | None = None,
               cache: dict | None = None, keys=None) -> dict[str, float]:
    """One optimisation step on a batch of HxWxC images; returns the loss breakdown (plus mean t)."""
    schedule = schedule or config.schedule()
    fx = fx or FeatureExtractor(images[0].shape[2])
    sample = make_sample(images, rng, config, schedule, cache, keys)
    try:
        breakdown = loss_and_backward(net, sample, schedule, fx, config.loss_weights)
    except NumericError:
        _dump_sample(config, sample)
        raise
    optimizer.apply(net)
    breakdown["t"] = float(sample.t.mean())
    return breakdown


def _dump_sample(config: TrainConfig, sample: TrainSample):
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "nan_sample.npz"
    np.savez(path, **dataclasses.asdict(sample))
    log.error("non-finite loss; offending sample written to %s", path)


# ---------------------------------------------------------------- loop

@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    steps: int
    history: list[dict[str, float]]


def _rng_from_state(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


def train(config: TrainConfig, resume: str | os.PathLike | None = None,
          images: list[np.ndarray] | None = None) -> TrainResult:
    """Run epochs x batches of :func:`train_step`, checkpointing along the way.

    Resuming restores parameters, AdamW moments, the sampling RNG and the
    (epoch, batch) position, so the continued loss sequence is identical to an
    uninterrupted run.
    """
    if images is None:
        images = load_dataset(config)
    if not images:
        raise ConfigError("empty dataset")
    schedule = config.schedule()
    channels = images[0].shape[2]
    fx = FeatureExtractor(channels)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "loss_log.csv"
    ckpt_path = out / "checkpoint.splc"

    if resume is not None:
        net, opt, extra = load_checkpoint(resume)
        if opt is None:
            raise ConfigError(f"{resume} carries no optimizer state; cannot resume")
        rng = _rng_from_state(extra["rng_state"])
        epoch0, batch0, step = extra["epoch"], extra["batch"], extra["step"]
        mode = "a"
    else:
        net = DenoiserNet(DenoiserConfig(channels, config.widths, seed=config.seed,
                                         strides=config.strides))
        opt = AdamW(lr=config.lr, weight_decay=config.weight_decay)
        rng = np.random.Generator(np.random.PCG64(config.seed))
        epoch0, batch0, step = 0, 0, 0
        mode = "w"

    def snapshot(epoch, batch):
        extra = {"epoch": epoch, "batch": batch, "step": step, "rng_state": rng.bit_generator.state,
                 "schedule": schedule.to_json(), "config": config.to_dict()}
        save_checkpoint(ckpt_path, net, opt, extra)
        if config.checkpoint_interval:
            save_checkpoint(out / f"checkpoint_{step:06d}.splc", net, opt, extra)

    n = len(images)
    per_epoch = math.ceil(n / config.batch_size)
    cache = {} if config.cache_guidance else None
    history = []
    done = False
    with open(log_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(LOG_FIELDS)
        for epoch in range(epoch0, config.epochs):
            order = np.random.Generator(np.random.PCG64([config.seed, epoch])).permutation(n)
            for b in range(batch0 if epoch == epoch0 else 0, per_epoch):
                if config.max_steps is not None and step >= config.max_steps:
                    done = True
                    break
                idx = order[b * config.batch_size:(b + 1) * config.batch_size]
                row = train_step(net, opt, [images[i] for i in idx], config, rng, fx, schedule,
                                 cache, [int(i) for i in idx])
                step += 1
                row["step"] = step
                history.append(row)
                writer.writerow([step, f"{row['t']:.1f}"] + [repr(row[k]) for k in (*TERMS, "total")])
                if config.checkpoint_interval and step % config.checkpoint_interval == 0:
                    nb, ne = (b + 1, epoch) if b + 1 < per_epoch else (0, epoch + 1)
                    snapshot(ne, nb)
            if done:
                break
    if not done:
        snapshot(config.epochs, 0)
    else:
        snapshot(epoch, b)
    return TrainResult(ckpt_path, log_path, step, history)


# ---------------------------------------------------------------- gradient check

def denoiser_grad_check(size: int = 8, channels: int = 3, n_params: int = 20, h: float = 1e-3,
                        tolerance: float = 1e-2, seed: int = 0, dtype=np.float64,
                        widths=(32, 64, 128), strides=(1, 1)):
    """Finite-difference check of the full denoiser + total-loss graph on one random sample."""
    rng = np.random.Generator(np.random.PCG64(seed))
    config = TrainConfig(batch_size=1, widths=widths, strides=strides, seed=seed)
    schedule = config.schedule()
    image = rng.uniform(0.05, 0.95, size=(size, size, channels)).astype(np.float32)
    net = DenoiserNet(DenoiserConfig(channels, tuple(widths), seed=seed, strides=tuple(strides)), dtype=dtype)
    # nonzero attention weights so the attention head carries gradient signal
    net.set_param("attn_conv.weight", rng.normal(0, 0.3, size=(1, 1, 3, 3)))
    sample = make_sample([image], rng, config, schedule)
    sample.t = np.array([int(rng.integers(1, 20))])
    fx = FeatureExtractor(channels)

    def closure():
        return loss_and_backward(net, sample, schedule, fx, config.loss_weights)["total"]

    return grad_check(net, closure, n_params=n_params, h=h, tolerance=tolerance, seed=seed)
