"""Tiny comparable architectures, SGD training and the checkpoint format.

The default network is three stages of depthwise-separable blocks
(pointwise expand, depthwise KxK, pointwise project, activation, residual)
with stride-2 downsampling in between and a GAP + linear head.  The ``dcls``
variants swap only the depthwise convolution for a DCLS one; the
``starrelu`` variants swap the block activation for StarReLU.
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dcls as _dcls
from .tensor import (
    Tensor,
    add,
    backward,
    conv2d,
    global_avg_pool,
    linear,
    relu,
    softmax_cross_entropy,
    star_relu,
)

log = logging.getLogger(__name__)

ARCHS = ("baseline", "dcls", "starrelu", "starrelu_dcls", "probe")
CKPT_MAGIC = b"DCLSCKPT"
CKPT_VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4")}


class TrainingDiverged(RuntimeError):
    def __init__(self, step, detail=""):
        super().__init__(f"training diverged at step {step}" + (f": {detail}" if detail else ""))
        self.step = step


@dataclass
class TrainConfig:
    arch: str = "baseline"
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.1
    pos_lr_mult: float = 5.0
    seed: int = 0
    kernel_size: int = 5
    dcls_elements: int = 9
    interp: str = "bilinear"
    classes: int = 3
    widths: tuple = (16, 32, 64)
    expansion: int = 2
    dilation: int = 1
    val_fraction: float = 0.1
    branch_scale: float = 0.1
    lr_schedule: str = "cosine"
    clip_norm: float = 2.0
    # probe arch: conv -> activation -> tap -> GAP -> linear
    probe_channels: int = 2
    probe_kernel: int = 1
    probe_stride: int = 1
    probe_act: str = "relu"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHS}")
        if self.interp not in _dcls.MODES:
            raise ValueError(f"unknown interpolation {self.interp!r}")

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# layers


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv:
    def __init__(self, cin, cout, k, rng, stride=1, padding=0, groups=1, dilation=1, bias=True):
        fan_in = (cin // groups) * k * k
        self.weight = Tensor(_he(rng, (cout, cin // groups, k, k), fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None
        self.stride, self.padding, self.groups, self.dilation = stride, padding, groups, dilation

    def parameters(self):
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups, self.dilation)


class DclsDepthwise:
    def __init__(self, channels, elements, kernel_size, mode, rng):
        self.spec = _dcls.DclsKernelSpec.random(channels, elements, kernel_size, mode, rng)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        self.padding = kernel_size // 2

    def parameters(self):
        out = dict(self.spec.parameters())
        out["bias"] = self.bias
        return out

    def __call__(self, x):
        return _dcls.dcls_conv(x, self.spec, self.bias, padding=self.padding)


class Activation:
    def __init__(self, kind):
        if kind not in ("relu", "star_relu", "identity"):
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind
        if kind == "star_relu":
            self.scale = Tensor(np.array([1.0]), requires_grad=True)
            self.bias = Tensor(np.array([0.0]), requires_grad=True)

    def parameters(self):
        if self.kind == "star_relu":
            return {"scale": self.scale, "bias": self.bias}
        return {}

    def __call__(self, x):
        if self.kind == "relu":
            return relu(x)
        if self.kind == "star_relu":
            return star_relu(x, self.scale, self.bias)
        return x


class Block:
    """Residual depthwise-separable block."""

    def __init__(self, channels, cfg, rng, use_dcls, act):
        hidden = channels * cfg.expansion
        self.expand = Conv(channels, hidden, 1, rng)
        if use_dcls:
            self.dw = DclsDepthwise(hidden, cfg.dcls_elements, cfg.kernel_size, cfg.interp, rng)
        else:
            pad = cfg.dilation * (cfg.kernel_size - 1) // 2
            self.dw = Conv(hidden, hidden, cfg.kernel_size, rng, padding=pad, groups=hidden,
                           dilation=cfg.dilation)
        self.project = Conv(hidden, channels, 1, rng)
        self.project.weight.data *= cfg.branch_scale
        self.act = Activation(act)

    def parameters(self):
        out = {}
        for part in ("expand", "dw", "project", "act"):
            for k, v in getattr(self, part).parameters().items():
                out[f"{part}.{k}"] = v
        return out

    def __call__(self, x):
        return add(x, self.act(self.project(self.dw(self.expand(x)))))


class Pool:
    def parameters(self):
        return {}

    def __call__(self, x):
        return global_avg_pool(x)


class Dense:
    def __init__(self, din, dout, rng):
        self.weight = Tensor(rng.normal(0.0, np.sqrt(1.0 / din), size=(dout, din)), requires_grad=True)
        self.bias = Tensor(np.zeros(dout), requires_grad=True)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


class Model:
    """Ordered named layers with a CAM tap after layer index ``tap``."""

    def __init__(self, layers, tap, config=None):
        self.layers = list(layers)
        self.tap = tap
        self.config = config
        self.tap_output = None
        names = [n for n, _ in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names: {names}")

    def parameters(self):
        out = {}
        for lname, layer in self.layers:
            for k, v in layer.parameters().items():
                out[f"{lname}.{k}"] = v
        return out

    def param_count(self):
        return int(sum(p.size for p in self.parameters().values()))

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    def dcls_specs(self):
        specs = []
        for _, layer in self.layers:
            for part in (layer, getattr(layer, "dw", None)):
                if isinstance(part, DclsDepthwise):
                    specs.append(part.spec)
        return specs

    def forward(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        for i, (_, layer) in enumerate(self.layers):
            x = layer(x)
            if i == self.tap:
                if x.data.ndim != 4:
                    raise ValueError(f"tap layer must output NCHW, got {x.shape}")
                self.tap_output = x
        return x

    __call__ = forward


def build(config):
    """Instantiate the architecture named by ``config.arch``."""
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    if cfg.arch == "probe":
        layers = [
            ("conv", Conv(3, cfg.probe_channels, cfg.probe_kernel, rng, stride=cfg.probe_stride,
                          padding=cfg.probe_kernel // 2)),
            ("act", Activation(cfg.probe_act)),
            ("pool", Pool()),
            ("head", Dense(cfg.probe_channels, cfg.classes, rng)),
        ]
        return Model(layers, tap=1, config=cfg)

    use_dcls = cfg.arch in ("dcls", "starrelu_dcls")
    act = "star_relu" if cfg.arch.startswith("starrelu") else "relu"
    w1, w2, w3 = cfg.widths
    layers = [
        ("stem", Conv(3, w1, 3, rng, stride=2, padding=1)),
        ("stem_act", Activation("relu")),
        ("stage1", Block(w1, cfg, rng, use_dcls, act)),
        ("down1", Conv(w1, w2, 2, rng, stride=2)),
        ("stage2", Block(w2, cfg, rng, use_dcls, act)),
        ("down2", Conv(w2, w3, 2, rng, stride=2)),
        ("stage3", Block(w3, cfg, rng, use_dcls, act)),
        ("pool", Pool()),
        ("head", Dense(w3, cfg.classes, rng)),
    ]
    return Model(layers, tap=6, config=cfg)


# ---------------------------------------------------------------------------
# data plumbing


def to_input(images):
    """uint8 [N, H, W, 3] (or one [H, W, 3]) -> normalised float32 NCHW."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    x = images.astype(np.float32).transpose(0, 3, 1, 2)
    return (x / 255.0 - 0.5) / 0.25


def split_dataset(samples, val_fraction):
    """Deterministic split: the trailing ``val_fraction`` of the list is held out."""
    n_val = int(round(len(samples) * val_fraction))
    cut = len(samples) - n_val
    return samples[:cut], samples[cut:]


def _stack(samples):
    x = to_input(np.stack([s.image for s in samples]))
    y = np.array([s.label for s in samples], dtype=np.int64)
    return x, y


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)  # dicts: epoch, loss, train_top1, val_top1
    step_losses: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "train_top1", "val_top1"])
            for e in self.epochs:
                val = "" if e["val_top1"] is None else f"{e['val_top1']:.6f}"
                w.writerow([e["epoch"], f"{e['loss']:.8f}", f"{e['train_top1']:.6f}", val])


def learning_rate(config, step, total_steps):
    if config.lr_schedule == "constant":
        return config.lr
    if config.lr_schedule == "cosine":
        return 0.5 * config.lr * (1.0 + np.cos(np.pi * step / max(1, total_steps)))
    raise ValueError(f"unknown lr schedule {config.lr_schedule!r}")


def sgd_step(model, lr, pos_lr_mult, clip_norm=0.0):
    """Plain SGD; each tensor's gradient is clipped to ``clip_norm`` when positive."""
    for name, p in model.parameters().items():
        if p.grad is None:
            continue
        g = p.grad
        if clip_norm > 0:
            norm = float(np.sqrt(np.sum(np.square(g, dtype=np.float64))))
            if norm > clip_norm:
                g = g * (clip_norm / norm)
        step = lr * pos_lr_mult if name.endswith(".positions") else lr
        p.data -= (step * g).astype(p.data.dtype)
    for spec in model.dcls_specs():
        _dcls.clamp_positions(spec)


def train(model, samples, config, val_samples=None, max_steps=None):
    """Plain minibatch SGD; returns a :class:`TrainLog`."""
    if len(samples) == 0:
        raise ValueError("cannot train on an empty dataset")
    x, y = _stack(samples)
    n = len(y)
    rng = np.random.default_rng(config.seed + 1)
    tlog = TrainLog()
    step = 0
    total_steps = config.epochs * -(-n // config.batch_size)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total, correct, seen = 0.0, 0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            model.zero_grad()
            try:
                logits = model.forward(x[idx])
                loss = softmax_cross_entropy(logits, y[idx])
            except FloatingPointError as exc:
                raise TrainingDiverged(step, str(exc)) from exc
            lval = loss.data.item()
            if not np.isfinite(lval):
                raise TrainingDiverged(step, "non-finite loss")
            backward(loss)
            sgd_step(model, learning_rate(config, step, total_steps), config.pos_lr_mult, config.clip_norm)
            tlog.step_losses.append(lval)
            total += lval * len(idx)
            seen += len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y[idx]))
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        val_acc = top1(model, val_samples) if val_samples else None
        tlog.epochs.append({
            "epoch": epoch + 1,
            "loss": total / seen,
            "train_top1": correct / seen,
            "val_top1": val_acc,
        })
        log.info("epoch %d loss %.4f train %.4f val %s", epoch + 1, total / seen, correct / seen, val_acc)
        if max_steps is not None and step >= max_steps:
            break
    return tlog


def predict(model, image):
    """Class logits for one uint8 [H, W, 3] image."""
    return model.forward(to_input(image)).data[0].copy()


def predict_batch(model, images, batch_size=256):
    out = []
    for start in range(0, len(images), batch_size):
        out.append(model.forward(to_input(images[start : start + batch_size])).data)
    return np.concatenate(out, axis=0)


def top1(model, samples, batch_size=256):
    if not samples:
        raise ValueError("cannot evaluate on an empty dataset")
    images = np.stack([s.image for s in samples])
    labels = np.array([s.label for s in samples])
    logits = predict_batch(model, images, batch_size)
    return float(np.mean(np.argmax(logits, axis=1) == labels))


# ---------------------------------------------------------------------------
# checkpoints


def sidecar_path(path):
    return Path(str(path) + ".json")


def save_checkpoint(model, path):
    """Write the binary parameter file plus a JSON TrainConfig sidecar."""
    path = Path(path)
    chunks = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    for name, p in model.parameters().items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<BI", 0, p.data.ndim))
        chunks.append(struct.pack(f"<{p.data.ndim}I", *p.shape))
        chunks.append(p.data.astype("<f4").tobytes())
    path.write_bytes(b"".join(chunks))
    if model.config is not None:
        sidecar_path(path).write_text(model.config.to_json() + "\n")


def read_checkpoint(path):
    """Parse a checkpoint into an ordered ``{name: ndarray}`` dict."""
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a DCLSCKPT file")
    if len(buf) < 12:
        raise ValueError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    params = {}
    try:
        while off < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            tag, ndim = struct.unpack_from("<BI", buf, off)
            off += 5
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            dt = _DTYPE_TAGS[tag]
            count = int(np.prod(shape, dtype=np.int64))
            nbytes = count * dt.itemsize
            if off + nbytes > len(buf):
                raise ValueError(f"{path}: payload of {name!r} truncated")
            params[name] = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(shape)
            off += nbytes
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    except KeyError as exc:
        raise ValueError(f"{path}: unknown dtype tag {exc}") from exc
    return params


def load_state(model, params):
    own = model.parameters()
    if set(own) != set(params):
        missing = sorted(set(own) - set(params))
        extra = sorted(set(params) - set(own))
        raise ValueError(f"checkpoint does not match model: missing {missing}, unexpected {extra}")
    for name, p in own.items():
        arr = params[name]
        if arr.shape != p.shape:
            raise ValueError(f"parameter {name}: checkpoint shape {arr.shape} vs model {p.shape}")
        p.data[...] = arr


def load_checkpoint(path, config=None):
    if config is None:
        config = TrainConfig.from_dict(json.loads(sidecar_path(path).read_text()))
    model = build(config)
    load_state(model, read_checkpoint(path))
    return model
