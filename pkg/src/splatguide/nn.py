"""A small reverse-mode layer set, the conditioned denoiser, AdamW and gradient checking.

Tensors are numpy arrays in NCHW layout.  Each layer caches what its backward
pass needs during ``forward``; ``backward`` consumes that cache, so a second
backward without a fresh forward raises :class:`StateError`.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import DimensionError, FormatError, NumericError, StateError


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def _take_cache(self):
        if self._cache is None:
            raise StateError(f"{self.kind}: backward called without a matching forward")
        cache, self._cache = self._cache, None
        return cache

    def describe(self) -> dict:
        return {"kind": self.kind}


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _fold_replicate(g: np.ndarray, pad: int, h: int, w: int) -> np.ndarray:
    """Adjoint of edge-replicate padding: fold the pad border back onto the edge pixels."""
    r = g[:, :, pad:pad + h, :].copy()
    r[:, :, 0, :] += g[:, :, :pad, :].sum(axis=2)
    r[:, :, -1, :] += g[:, :, pad + h:, :].sum(axis=2)
    c = r[:, :, :, pad:pad + w].copy()
    c[:, :, :, 0] += r[:, :, :, :pad].sum(axis=3)
    c[:, :, :, -1] += r[:, :, :, pad + w:].sum(axis=3)
    return c


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 1):
    """Cross-correlate NCHW ``x`` with OIkk ``weight``; returns (output, cache).

    Stride 1 pads by replicating edges; stride 2 pads with zeros, so output
    extents are exactly H/stride.
    """
    b, c, h, w = x.shape
    out_ch, in_ch, k, k2 = weight.shape
    if k != k2 or k % 2 != 1:
        raise DimensionError("conv kernels must be odd-sized and square")
    if c != in_ch:
        raise DimensionError(f"conv expects {in_ch} input channels, got {c}")
    s = stride
    if h % s or w % s:
        raise DimensionError(f"stride {s} must divide spatial dims {h}x{w}")
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="edge" if s == 1 else "constant")
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
    y = cols @ weight.reshape(out_ch, -1).T + bias
    return y.reshape(b, ho, wo, out_ch).transpose(0, 3, 1, 2), (cols, x.shape, xp.shape, s)


def conv2d_backward(grad_out: np.ndarray, cache, weight: np.ndarray):
    """Return (grad_input, grad_weight, grad_bias) for a :func:`conv2d_forward` call."""
    if cache is None:
        raise StateError("conv2d_backward called without a forward cache")
    cols, (b, c, h, w), pshape, s = cache
    out_ch, _, k, _ = weight.shape
    p = k // 2
    ho, wo = grad_out.shape[2], grad_out.shape[3]
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, out_ch)
    grad_w = (g.T @ cols).reshape(weight.shape)
    grad_b = g.sum(axis=0)
    dcols = (g @ weight.reshape(out_ch, -1)).reshape(b, ho, wo, c, k, k)
    dxp = np.zeros(pshape, dtype=grad_out.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if s == 1:
        grad_x = _fold_replicate(dxp, p, h, w)
    else:
        grad_x = dxp[:, :, p:p + h, p:p + w]
    return grad_x, grad_w, grad_b


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, rng=None, dtype=np.float32, zero_init=False):
        super().__init__()
        if kernel % 2 != 1:
            raise DimensionError("conv kernels must be odd-sized")
        self.in_ch, self.out_ch, self.kernel, self.stride = in_ch, out_ch, kernel, stride
        shape = (out_ch, in_ch, kernel, kernel)
        if zero_init or rng is None:
            w = np.zeros(shape, dtype=dtype)
        else:
            w = kaiming_uniform(rng, shape, in_ch * kernel * kernel, dtype)
        self.params = {"weight": w, "bias": np.zeros(out_ch, dtype=dtype)}

    def describe(self):
        return {"kind": self.kind, "in": self.in_ch, "out": self.out_ch,
                "kernel": self.kernel, "stride": self.stride}

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, self._cache = conv2d_forward(x, self.params["weight"], self.params["bias"], self.stride)
        return y

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        gx, gw, gb = conv2d_backward(grad_out, self._take_cache(), self.params["weight"])
        self.grads = {"weight": gw, "bias": gb}
        return gx


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_dim, out_dim, rng=None, dtype=np.float32):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        w = np.zeros((out_dim, in_dim), dtype) if rng is None else kaiming_uniform(rng, (out_dim, in_dim), in_dim, dtype)
        self.params = {"weight": w, "bias": np.zeros(out_dim, dtype=dtype)}

    def describe(self):
        return {"kind": self.kind, "in": self.in_dim, "out": self.out_dim}

    def forward(self, x):
        self._cache = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad_out):
        x = self._take_cache()
        self.grads = {"weight": grad_out.T @ x, "bias": grad_out.sum(axis=0)}
        return grad_out @ self.params["weight"]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._cache = x > 0
        return np.where(self._cache, x, 0).astype(x.dtype)

    def backward(self, grad_out):
        return np.where(self._take_cache(), grad_out, 0).astype(grad_out.dtype)


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        y = 0.5 * (1.0 + np.tanh(0.5 * x))  # overflow-free logistic
        self._cache = y
        return y.astype(x.dtype)

    def backward(self, grad_out):
        y = self._take_cache()
        return grad_out * y * (1 - y)


class Upsample(Layer):
    """Nearest-neighbour upsampling by an integer factor (factor 1 is the identity)."""
    kind = "upsample-nearest"

    def __init__(self, factor: int = 2):
        super().__init__()
        self.factor = factor

    def describe(self):
        return {"kind": self.kind, "factor": self.factor}

    def forward(self, x):
        self._cache = True
        f = self.factor
        return x if f == 1 else x.repeat(f, axis=2).repeat(f, axis=3)

    def backward(self, grad_out):
        self._take_cache()
        f = self.factor
        if f == 1:
            return grad_out
        b, c, h, w = grad_out.shape
        return grad_out.reshape(b, c, h // f, f, w // f, f).sum(axis=(3, 5))


class AvgPool2x(Layer):
    kind = "avgpool2"

    def forward(self, x):
        b, c, h, w = x.shape
        if h % 2 or w % 2:
            raise DimensionError("avgpool2 needs even spatial dims")
        self._cache = True
        return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(self, grad_out):
        self._take_cache()
        return (grad_out / 4).repeat(2, axis=2).repeat(2, axis=3)


def time_embedding(t, dim: int = 64) -> np.ndarray:
    """Sinusoidal embedding; frequencies run geometrically from 1 down to 1e-4."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10_000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# ---------------------------------------------------------------- denoiser

@dataclass(frozen=True)
class DenoiserConfig:
    img_channels: int = 3
    widths: tuple[int, int, int] = (32, 64, 128)
    time_dim: int = 64
    seed: int = 0
    strides: tuple[int, int] = (1, 1)  # second and third encoder convs; (2, 2) gives a 4x bottleneck

    @property
    def in_channels(self) -> int:
        # noisy image, incomplete image, mask, splat, edge, attention
        return 2 * self.img_channels + 4

    def to_json(self) -> dict:
        return {"img_channels": self.img_channels, "widths": list(self.widths),
                "time_dim": self.time_dim, "seed": self.seed, "strides": list(self.strides)}

    @classmethod
    def from_json(cls, d: dict) -> "DenoiserConfig":
        return cls(d["img_channels"], tuple(d["widths"]), d["time_dim"], d.get("seed", 0),
                   tuple(d.get("strides", (1, 1))))

    @property
    def reduction(self) -> int:
        return self.strides[0] * self.strides[1]


class DenoiserNet:
    """Encoder/decoder noise predictor without skip connections.

    ``cond`` stacks [incomplete image (C), mask, splat, edge] on the channel
    axis; the attention map sigmoid(conv(splat)) is computed here and appended.
    """

    def __init__(self, config: DenoiserConfig = DenoiserConfig(), dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.Generator(np.random.PCG64(config.seed))
        c, (w1, w2, w3) = config.img_channels, config.widths
        s2, s3 = config.strides
        if s2 not in (1, 2) or s3 not in (1, 2):
            raise DimensionError(f"encoder strides must be 1 or 2, got {config.strides}")
        self.layers: dict[str, Layer] = {
            "attn_conv": Conv2d(1, 1, 3, 1, rng, dtype, zero_init=True),
            "attn_act": Sigmoid(),
            "enc1": Conv2d(config.in_channels, w1, 3, 1, rng, dtype),
            "enc1_act": ReLU(),
            "enc2": Conv2d(w1, w2, 3, s2, rng, dtype),
            "enc2_act": ReLU(),
            "enc3": Conv2d(w2, w3, 3, s3, rng, dtype),
            "enc3_act": ReLU(),
            "time": Dense(config.time_dim, w3, rng, dtype),
            "up1": Upsample(s3),
            "dec1": Conv2d(w3, w2, 3, 1, rng, dtype),
            "dec1_act": ReLU(),
            "up2": Upsample(s2),
            "dec2": Conv2d(w2, w1, 3, 1, rng, dtype),
            "dec2_act": ReLU(),
            "out": Conv2d(w1, c, 3, 1, rng, dtype),
        }
        self.last_attention: np.ndarray | None = None

    # parameters are addressed as "<layer>.<param>" in declaration order
    @property
    def params(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, layer in self.layers.items() for k, v in layer.params.items()}

    @property
    def grads(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, layer in self.layers.items() for k, v in layer.grads.items()}

    def set_param(self, name: str, value: np.ndarray) -> None:
        lname, pname = name.split(".", 1)
        cur = self.layers[lname].params[pname]
        if cur.shape != value.shape:
            raise DimensionError(f"{name}: expected {cur.shape}, got {value.shape}")
        self.layers[lname].params[pname] = np.asarray(value, dtype=self.dtype)

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def describe(self) -> list[dict]:
        return [{"name": n, **layer.describe()} for n, layer in self.layers.items()]

    def astype(self, dtype) -> "DenoiserNet":
        clone = DenoiserNet(self.config, dtype)
        for name, value in self.params.items():
            clone.set_param(name, value.astype(dtype))
        return clone

    def forward(self, x_noisy: np.ndarray, cond: np.ndarray, t) -> np.ndarray:
        L = self.layers
        c = self.config.img_channels
        if x_noisy.ndim != 4 or x_noisy.shape[1] != c:
            raise DimensionError(f"noisy input must be Bx{c}xHxW, got {x_noisy.shape}")
        if cond.shape != (x_noisy.shape[0], c + 3) + x_noisy.shape[2:]:
            raise DimensionError(f"conditioning stack shape {cond.shape} does not match {x_noisy.shape}")
        h, w = x_noisy.shape[2:]
        r = self.config.reduction
        if h % r or w % r:
            raise DimensionError(f"spatial dims must be divisible by {r}")
        dt = self.dtype
        splat = cond[:, c + 1:c + 2].astype(dt)
        attn = L["attn_act"].forward(L["attn_conv"].forward(splat))
        self.last_attention = attn
        x = np.concatenate([x_noisy.astype(dt), cond.astype(dt), attn], axis=1)
        hdn = L["enc1_act"].forward(L["enc1"].forward(x))
        hdn = L["enc2_act"].forward(L["enc2"].forward(hdn))
        hdn = L["enc3_act"].forward(L["enc3"].forward(hdn))
        temb = L["time"].forward(time_embedding(t, self.config.time_dim).astype(dt))
        hdn = hdn + temb[:, :, None, None]
        hdn = L["dec1_act"].forward(L["dec1"].forward(L["up1"].forward(hdn)))
        hdn = L["dec2_act"].forward(L["dec2"].forward(L["up2"].forward(hdn)))
        return L["out"].forward(hdn)

    def backward(self, grad_eps: np.ndarray) -> None:
        """Backpropagate dLoss/d(eps_hat) into every parameter gradient."""
        L = self.layers
        g = L["out"].backward(grad_eps.astype(self.dtype))
        g = L["dec2"].backward(L["dec2_act"].backward(g))
        g = L["up2"].backward(g)
        g = L["dec1"].backward(L["dec1_act"].backward(g))
        g = L["up1"].backward(g)
        L["time"].backward(g.sum(axis=(2, 3)))
        g = L["enc3"].backward(L["enc3_act"].backward(g))
        g = L["enc2"].backward(L["enc2_act"].backward(g))
        gx = L["enc1"].backward(L["enc1_act"].backward(g))
        g_attn = gx[:, -1:]
        L["attn_conv"].backward(L["attn_act"].backward(g_attn))


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamW:
    """Adam with decoupled weight decay and bias correction."""
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "weight_decay": self.weight_decay}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Return updated parameters; moments and the step counter update in place."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in parameter {name}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        out = {}
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            decayed = p * (1.0 - self.lr * self.weight_decay)
            out[name] = (decayed - self.lr * update).astype(p.dtype)
        return out

    def apply(self, net: DenoiserNet) -> None:
        for name, value in self.step(net.params, net.grads).items():
            net.set_param(name, value)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"SPLC"
CKPT_VERSION = 1


def _write_blob(fh, payload: bytes):
    fh.write(struct.pack("<I", len(payload)))
    fh.write(payload)


def _read_blob(fh) -> bytes:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return _read_exact(fh, n)


def _read_exact(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("checkpoint truncated")
    return buf


def _write_tensor(fh, name: str, arr: np.ndarray):
    _write_blob(fh, name.encode())
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_tensor(fh) -> tuple[str, np.ndarray]:
    name = _read_blob(fh).decode()
    (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    return name, data


def save_checkpoint(path, net: DenoiserNet, optimizer: AdamW | None = None, extra: dict | None = None) -> None:
    """Write ``SPLC`` checkpoint: header JSON (architecture + extra), params, optional AdamW state."""
    header = {"arch": net.config.to_json(), "layers": net.describe(), "extra": extra or {}}
    params = net.params
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        _write_blob(fh, json.dumps(header, sort_keys=True).encode())
        fh.write(struct.pack("<I", len(params)))
        for name, value in params.items():
            _write_tensor(fh, name, value)
        if optimizer is None:
            fh.write(struct.pack("<I", 0))
            return
        fh.write(struct.pack("<I", 1))
        _write_blob(fh, json.dumps({**optimizer.hyper(), "step": optimizer.step_count}).encode())
        names = [n for n in params if n in optimizer.m]
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            _write_tensor(fh, name, optimizer.m[name])
            _write_tensor(fh, name, optimizer.v[name])


def load_checkpoint(path) -> tuple[DenoiserNet, AdamW | None, dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise FormatError(f"{path}: not a SPLC checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(_read_blob(fh))
        net = DenoiserNet(DenoiserConfig.from_json(header["arch"]))
        if header["layers"] != net.describe():
            raise FormatError(f"{path}: layer table does not match the architecture config")
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        for _ in range(n):
            name, value = _read_tensor(fh)
            net.set_param(name, value)
        (has_opt,) = struct.unpack("<I", _read_exact(fh, 4))
        opt = None
        if has_opt:
            hyper = json.loads(_read_blob(fh))
            step = hyper.pop("step")
            opt = AdamW(**hyper, step_count=step)
            (k,) = struct.unpack("<I", _read_exact(fh, 4))
            for _ in range(k):
                name, m = _read_tensor(fh)
                _, v = _read_tensor(fh)
                opt.m[name], opt.v[name] = m, v
    return net, opt, header["extra"]


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    entries: list[tuple[str, int, float, float, float]]  # name, flat index, analytic, numeric, rel

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def format(self) -> str:
        lines = [f"{'parameter':<18} {'index':>7} {'analytic':>14} {'numeric':>14} {'rel err':>10}"]
        for name, idx, a, n, r in self.entries:
            lines.append(f"{name:<18} {idx:>7d} {a:>14.6e} {n:>14.6e} {r:>10.2e}")
        lines.append(f"max relative error {self.max_rel_error:.3e} (tolerance {self.tolerance:g})")
        return "\n".join(lines)


def relative_error(a: float, n: float, floor: float = 1e-6) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(model, closure, n_params: int = 20, h: float = 1e-3, tolerance: float = 1e-2,
               seed: int = 0) -> GradCheckReport:
    """Central finite differences against backprop on a random subset of scalar parameters.

    ``model`` exposes ``params`` / ``grads`` dicts (views onto its arrays);
    ``closure()`` runs forward + backward and returns the scalar loss.
    """
    closure()
    analytic = {k: np.array(v, dtype=np.float64) for k, v in model.grads.items()}
    params = model.params
    names = list(params)
    sizes = np.array([params[n].size for n in names])
    rng = np.random.Generator(np.random.PCG64(seed))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    # one entry from every tensor, then uniform picks over the remaining scalars
    picks = {int(offsets[i] + rng.integers(sizes[i])) for i in range(len(names))}
    total = int(sizes.sum())
    while len(picks) < min(max(n_params, len(names)), total):
        picks.add(int(rng.integers(total)))
    entries = []
    for flat in sorted(int(p) for p in picks):
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, idx = names[i], flat - int(offsets[i])
        arr = params[name].reshape(-1)
        orig = arr[idx]
        arr[idx] = orig + h
        hi = float(arr[idx])
        up = closure()
        arr[idx] = orig - h
        lo = float(arr[idx])
        down = closure()
        arr[idx] = orig
        # step actually taken after rounding to the parameter dtype
        num = (up - down) / (hi - lo)
        a = float(analytic[name].reshape(-1)[idx])
        entries.append((name, idx, a, float(num), relative_error(a, num)))
    closure()
    worst = max((e[4] for e in entries), default=0.0)
    return GradCheckReport(worst, tolerance, entries)
