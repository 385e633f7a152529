"""Grad-CAM, Threshold-Grad-CAM and heatmap overlays.

Both methods read the activations ``A`` of the model's tap layer and the
gradient of the target class score with respect to them.  Channel weights
are the spatial means of those gradients.  Grad-CAM rectifies the weighted
sum of channels; Threshold-Grad-CAM rectifies each weighted channel before
summing, normalises by the maximum and zeroes everything below ``t``, so a
strongly negative channel cannot cancel a positive one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, backward, resize_matrix
from .zoo import to_input

__all__ = [
    "DEFAULT_THRESHOLD",
    "JET",
    "Heatmap",
    "apply_threshold",
    "explain_batch",
    "gradcam",
    "gradcam_map",
    "overlay",
    "tap_activations_and_gradients",
    "threshold_gradcam",
    "threshold_map",
]

DEFAULT_THRESHOLD = 0.3
METHODS = ("gradcam", "threshold_gradcam")


def _jet_table():
    x = np.arange(256) / 255.0
    rgb = [np.clip(1.5 - np.abs(4 * x - k), 0.0, 1.0) for k in (3, 2, 1)]
    return np.round(np.stack(rgb, axis=1) * 255).astype(np.uint8)


# 256-entry jet-like colormap: channel k in (r, g, b) is
# round(255 * clip(1.5 - |4x - c_k|, 0, 1)) with c = (3, 2, 1), x = i / 255.
# Entry 0 is (0, 0, 128), entry 255 is (128, 0, 0).
JET = _jet_table()


@dataclass
class Heatmap:
    values: np.ndarray  # float32 [H, W]
    degenerate: bool = False
    raw: np.ndarray | None = None  # feature-resolution map before resizing

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


def _resize(m, h, w):
    if m.shape == (h, w):
        return m.copy()
    return resize_matrix(m.shape[0], h) @ m @ resize_matrix(m.shape[1], w).T


def gradcam_map(acts, grads):
    """Rectified gradient-weighted channel sum for one image.

    ``acts`` and ``grads`` are [C, h, w].  Returns (map, channel weights).
    """
    acts = np.asarray(acts, dtype=np.float64)
    alpha = np.asarray(grads, dtype=np.float64).mean(axis=(1, 2))
    return np.maximum(np.tensordot(alpha, acts, axes=1), 0.0), alpha


def threshold_map(acts, grads, t=DEFAULT_THRESHOLD):
    """Per-channel rectification, max normalisation and thresholding.

    Returns (map, degenerate) at feature resolution; ``degenerate`` is set
    when the rectified sum is identically zero.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {t}")
    acts = np.asarray(acts, dtype=np.float64)
    alpha = np.asarray(grads, dtype=np.float64).mean(axis=(1, 2))
    s = np.maximum(alpha[:, None, None] * acts, 0.0).sum(axis=0)
    peak = s.max()
    if not peak > 0:
        return np.zeros_like(s), True
    return apply_threshold(s / peak, t), False


def apply_threshold(normalised, t=DEFAULT_THRESHOLD):
    """Keep values ``>= t`` and zero the rest."""
    n = np.asarray(normalised, dtype=np.float64)
    return np.where(n >= t, n, 0.0)


def _finish_gradcam(lmap, h, w):
    if lmap.max() - lmap.min() <= 0:
        return Heatmap(np.zeros((h, w), dtype=np.float32), True, lmap)
    up = _resize(lmap, h, w)
    lo, hi = up.min(), up.max()
    return Heatmap(((up - lo) / (hi - lo)).astype(np.float32), False, lmap)


def _finish_threshold(tmap, degenerate, h, w):
    return Heatmap(_resize(tmap, h, w).astype(np.float32), degenerate, tmap)


def _prepare(images):
    if isinstance(images, Tensor):
        return images.data
    arr = np.asarray(images)
    if arr.dtype == np.uint8:
        return to_input(arr)
    if arr.ndim == 3:
        arr = arr[None]
    return arr.astype(np.float32)


def tap_activations_and_gradients(model, images, classes, target="logit"):
    """Forward a batch and differentiate each image's class score.

    Samples in a batch do not interact, so seeding every row with its own
    class yields per-image gradients in one backward pass.
    """
    x = _prepare(images)
    classes = np.atleast_1d(np.asarray(classes, dtype=np.int64))
    n = x.shape[0]
    if classes.shape != (n,):
        raise ValueError(f"expected {n} class indices, got {classes.shape}")
    model.zero_grad()
    logits = model.forward(Tensor(x))
    k = logits.shape[1]
    if np.any(classes < 0) or np.any(classes >= k):
        raise ValueError(f"class index out of range for {k} classes: {classes.tolist()}")
    rows = np.arange(n)
    seed = np.zeros(logits.shape, dtype=np.float64)
    if target == "logit":
        seed[rows, classes] = 1.0
    elif target == "softmax":
        z = logits.data.astype(np.float64)
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        pc = p[rows, classes]
        seed = -pc[:, None] * p
        seed[rows, classes] += pc
    else:
        raise ValueError(f"unknown target {target!r}; expected 'logit' or 'softmax'")
    tap = model.tap_output
    backward(logits, seed)
    if tap.grad is None:
        raise RuntimeError("tap layer received no gradient")
    return tap.data.copy(), tap.grad.copy(), logits.data.copy()


def explain_batch(model, images, classes, method="gradcam", t=DEFAULT_THRESHOLD, target="logit",
                  size=None):
    """Heatmaps for a batch; returns (list of Heatmap, logits)."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    x = _prepare(images)
    h, w = size if size is not None else x.shape[2:]
    acts, grads, logits = tap_activations_and_gradients(model, x, classes, target)
    out = []
    for a, g in zip(acts, grads):
        if method == "gradcam":
            out.append(_finish_gradcam(gradcam_map(a, g)[0], h, w))
        else:
            out.append(_finish_threshold(*threshold_map(a, g, t), h, w))
    return out, logits


def gradcam(model, image, class_index, target="logit"):
    """Grad-CAM heatmap resized to the input and min-max normalised."""
    maps, _ = explain_batch(model, image, [class_index], "gradcam", target=target)
    return maps[0]


def threshold_gradcam(model, image, class_index, t=DEFAULT_THRESHOLD, target="logit"):
    """Threshold-Grad-CAM: threshold at feature resolution, then resize."""
    maps, _ = explain_batch(model, image, [class_index], "threshold_gradcam", t=t, target=target)
    return maps[0]


def overlay(image, heatmap, alpha=0.5):
    """Blend ``image`` with the jet colouring of ``heatmap``.

    out = round((1 - alpha) * image + alpha * JET[round(255 * h)]), with
    numpy's round-half-to-even.
    """
    img = np.asarray(image)
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    if img.shape[:2] != values.shape:
        raise ValueError(f"heatmap {values.shape} does not match image {img.shape[:2]}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    idx = np.round(np.clip(values, 0.0, 1.0) * 255).astype(np.int64)
    colour = JET[idx].astype(np.float64)
    out = (1.0 - alpha) * img.astype(np.float64) + alpha * colour
    return np.clip(np.round(out), 0, 255).astype(np.uint8)
