"""Dilated convolution with learnable spacings.

A DCLS kernel holds ``m`` weights per channel, each sitting at a continuous
(row, col) position inside a K x K support.  The dense kernel is built by
spreading every weight onto the grid, either bilinearly over the four
surrounding cells or with a grid-normalised Gaussian bump.  Both routes are
differentiable in the weights and positions (and sigma for the Gaussian),
so the spacings are trained by plain backpropagation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, _accumulate, _result, conv2d

__all__ = [
    "SIGMA_FLOOR",
    "DclsKernelSpec",
    "clamp_positions",
    "construct_kernel",
    "dcls_conv",
    "grid_positions",
]

SIGMA_FLOOR = 1e-3
MODES = ("bilinear", "gaussian")


@dataclass
class DclsKernelSpec:
    """Learnable depthwise DCLS kernel parameters for one layer."""

    weights: Tensor  # [channels, m]
    positions: Tensor  # [channels, m, 2]
    kernel_size: int
    mode: str = "bilinear"
    sigma: Tensor | None = field(default=None)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown interpolation mode {self.mode!r}; expected one of {MODES}")
        if self.kernel_size < 2:
            raise ValueError(f"kernel_size must be at least 2, got {self.kernel_size}")
        c, m = self.weights.shape
        if self.positions.shape != (c, m, 2):
            raise ValueError(
                f"positions shape {self.positions.shape} does not match weights {self.weights.shape}"
            )
        if m > self.kernel_size ** 2:
            raise ValueError(f"{m} elements do not fit a {self.kernel_size}x{self.kernel_size} kernel")
        if self.mode == "gaussian" and self.sigma is None:
            self.sigma = Tensor(np.array([0.5], dtype=self.weights.dtype), requires_grad=True)

    @property
    def channels(self):
        return self.weights.shape[0]

    @property
    def elements(self):
        return self.weights.shape[1]

    @classmethod
    def random(cls, channels, elements, kernel_size, mode="bilinear", rng=None, dtype=np.float32):
        """He-scaled weights with positions drawn uniformly over the support."""
        rng = np.random.default_rng() if rng is None else rng
        w = rng.normal(0.0, np.sqrt(2.0 / elements), size=(channels, elements))
        p = rng.uniform(0.0, kernel_size - 1, size=(channels, elements, 2))
        return cls(
            Tensor(w, requires_grad=True, dtype=dtype),
            Tensor(p, requires_grad=True, dtype=dtype),
            kernel_size,
            mode,
        )

    def parameters(self):
        out = {"weights": self.weights, "positions": self.positions}
        if self.mode == "gaussian":
            out["sigma"] = self.sigma
        return out


def grid_positions(channels, kernel_size, dilation, dtype=np.float32):
    """Positions of a centred dilated grid, repeated for every channel."""
    side = (kernel_size - 1) // dilation + 1
    offset = (kernel_size - 1 - dilation * (side - 1)) / 2
    rr, cc = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    pos = np.stack([rr.ravel(), cc.ravel()], axis=-1) * dilation + offset
    return np.broadcast_to(pos, (channels,) + pos.shape).astype(dtype)


def _bilinear_coords(p, k):
    # Left branch at integer positions, except at 0 where no left cell exists.
    base = np.clip(np.ceil(p) - 1, 0, k - 2).astype(np.int64)
    return base, p - base


def _construct_bilinear(spec):
    w = spec.weights.data
    pos = spec.positions.data
    k = spec.kernel_size
    c, m = w.shape
    r0, fr = _bilinear_coords(pos[..., 0], k)
    c0, fc = _bilinear_coords(pos[..., 1], k)
    corners = (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    )
    chan = np.repeat(np.arange(c), m).reshape(c, m)
    kernel = np.zeros((c, k * k), dtype=w.dtype)
    for dr, dc, coef in corners:
        np.add.at(kernel, (chan, (r0 + dr) * k + (c0 + dc)), w * coef)

    def _bw(g):
        g = g.reshape(c, k * k)
        g00 = g[chan, r0 * k + c0]
        g01 = g[chan, r0 * k + c0 + 1]
        g10 = g[chan, (r0 + 1) * k + c0]
        g11 = g[chan, (r0 + 1) * k + c0 + 1]
        dw = g00 * (1 - fr) * (1 - fc) + g01 * (1 - fr) * fc + g10 * fr * (1 - fc) + g11 * fr * fc
        dpr = w * ((g10 - g00) * (1 - fc) + (g11 - g01) * fc)
        dpc = w * ((g01 - g00) * (1 - fr) + (g11 - g10) * fr)
        _accumulate(spec.weights, dw)
        _accumulate(spec.positions, np.stack([dpr, dpc], axis=-1))

    out = kernel.reshape(c, 1, k, k)
    return _result(out, (spec.weights, spec.positions), "dcls_bilinear", _bw)


def _construct_gaussian(spec):
    w = spec.weights.data
    pos = spec.positions.data
    sigma = float(spec.sigma.data.reshape(-1)[0])
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    k = spec.kernel_size
    c, m = w.shape
    grid = np.arange(k, dtype=np.float64)
    dr = grid[None, None, :, None] - pos[..., 0].astype(np.float64)[..., None, None]
    dc = grid[None, None, None, :] - pos[..., 1].astype(np.float64)[..., None, None]
    sq = dr * dr + dc * dc
    g = np.exp(-sq / (2 * sigma * sigma))
    u = g / g.sum(axis=(2, 3), keepdims=True)  # [c, m, k, k], each slice sums to 1
    kernel = np.einsum("cm,cmij->cij", w.astype(np.float64), u)

    def _bw(grad):
        G = grad.reshape(c, 1, k, k).astype(np.float64)
        gu = G * u
        su = gu.sum(axis=(2, 3))
        _accumulate(spec.weights, su)
        wd = w.astype(np.float64)
        out = []
        for logderiv in (dr / sigma**2, dc / sigma**2):
            mean_l = (u * logderiv).sum(axis=(2, 3))
            out.append(wd * ((gu * logderiv).sum(axis=(2, 3)) - su * mean_l))
        _accumulate(spec.positions, np.stack(out, axis=-1))
        ls = sq / sigma**3
        mean_ls = (u * ls).sum(axis=(2, 3))
        dsig = (wd * ((gu * ls).sum(axis=(2, 3)) - su * mean_ls)).sum()
        _accumulate(spec.sigma, np.array([dsig]))

    out = kernel.astype(w.dtype).reshape(c, 1, k, k)
    return _result(out, (spec.weights, spec.positions, spec.sigma), "dcls_gaussian", _bw)


def construct_kernel(spec):
    """Dense depthwise kernel [channels, 1, K, K] from a DCLS spec."""
    k = spec.kernel_size
    pos = spec.positions.data
    if pos.min() < 0 or pos.max() > k - 1:
        raise ValueError(
            f"positions must lie in [0, {k - 1}] (got range [{pos.min():.4g}, {pos.max():.4g}]); "
            "call clamp_positions first"
        )
    if spec.mode == "bilinear":
        return _construct_bilinear(spec)
    return _construct_gaussian(spec)


def dcls_conv(x, spec, bias=None, stride=1, padding=0):
    """Depthwise convolution with a DCLS-constructed kernel."""
    if x.data.ndim != 4 or x.shape[1] != spec.channels:
        raise ValueError(f"input {x.shape} does not match a {spec.channels}-channel DCLS kernel")
    kernel = construct_kernel(spec)
    return conv2d(x, kernel, bias=bias, stride=stride, padding=padding, groups=spec.channels)


def clamp_positions(spec):
    """Project positions onto [0, K-1] and sigma onto [SIGMA_FLOOR, inf)."""
    np.clip(spec.positions.data, 0.0, spec.kernel_size - 1, out=spec.positions.data)
    if spec.sigma is not None:
        np.maximum(spec.sigma.data, SIGMA_FLOOR, out=spec.sigma.data)
