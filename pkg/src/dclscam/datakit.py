"""Image and heatmap files, JSON-lines manifests, and the synthetic shapes set.

Heatmaps travel as 16-bit binary PGM (value = round(65535 * h)), images as
binary PPM; PNG images are read through Pillow.  The shapes generator draws
one target shape per image on a cluttered background and stores the blurred
object mask as the reference attention map.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

log = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle", "cross", "ring")


class FormatError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # uint8 [H, W, 3]
    label: int
    heatmap: np.ndarray  # float32 [H, W] in [0, 1]


# ---------------------------------------------------------------------------
# netpbm / png


def _parse_header(buf, magic, path):
    if buf[:2] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} header, got {buf[:2]!r}")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: malformed header")
        try:
            fields.append(int(buf[start:pos]))
        except ValueError:
            raise FormatError(f"{path}: malformed header field {buf[start:pos]!r}") from None
    if pos >= len(buf):
        raise FormatError(f"{path}: malformed header")
    width, height, maxval = fields
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: invalid header values {fields}")
    return width, height, maxval, pos + 1


def write_pgm16(path, heatmap):
    h = np.asarray(heatmap, dtype=np.float64)
    if h.ndim != 2:
        raise ValueError(f"heatmap must be 2-D, got shape {h.shape}")
    q = np.round(np.clip(h, 0.0, 1.0) * 65535).astype(">u2")
    Path(path).write_bytes(f"P5\n{h.shape[1]} {h.shape[0]}\n65535\n".encode() + q.tobytes())


def read_pgm16(path):
    """Read a binary PGM as a float32 heatmap scaled by its max value."""
    buf = Path(path).read_bytes()
    width, height, maxval, off = _parse_header(buf, b"P5", path)
    dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * dt.itemsize
    actual = len(buf) - off
    if actual < expected:
        raise FormatError(f"{path}: truncated payload, expected {expected} bytes, got {actual}")
    vals = np.frombuffer(buf, dtype=dt, count=width * height, offset=off).reshape(height, width)
    return (vals.astype(np.float64) / maxval).astype(np.float32)


def write_ppm(path, image):
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"image must be uint8 [H, W, 3], got {img.dtype} {img.shape}")
    Path(path).write_bytes(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode() + img.tobytes())


def read_ppm(path):
    buf = Path(path).read_bytes()
    width, height, maxval, off = _parse_header(buf, b"P6", path)
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    expected = width * height * 3
    actual = len(buf) - off
    if actual < expected:
        raise FormatError(f"{path}: truncated payload, expected {expected} bytes, got {actual}")
    return np.frombuffer(buf, dtype=np.uint8, count=expected, offset=off).reshape(height, width, 3).copy()


def read_png(path):
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("RGB", "RGBA", "L", "P"):
            raise FormatError(f"{path}: unsupported PNG mode {im.mode}")
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_png(path, image):
    from PIL import Image

    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def read_image(path):
    suffix = Path(path).suffix.lower()
    if suffix == ".png":
        return read_png(path)
    return read_ppm(path)


# ---------------------------------------------------------------------------
# manifests


def load_dataset(manifest):
    """Eagerly load and validate every line of a JSON-lines manifest."""
    manifest = Path(manifest)
    root = manifest.parent
    samples, classes = [], None
    meta_path = root / "dataset.json"
    if meta_path.exists():
        classes = json.loads(meta_path.read_text()).get("classes")
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            image_path, heat_path, label = rec["image"], rec["heatmap"], int(rec["label"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{manifest}:{lineno}: invalid record ({exc})") from None
        try:
            image = read_image(root / image_path)
            heat = read_pgm16(root / heat_path)
        except FileNotFoundError as exc:
            raise FormatError(f"{manifest}:{lineno}: missing file {exc.filename}") from None
        except FormatError as exc:
            raise FormatError(f"{manifest}:{lineno}: {exc}") from None
        if heat.shape != image.shape[:2]:
            raise FormatError(
                f"{manifest}:{lineno}: heatmap {heat.shape[0]}x{heat.shape[1]} does not match "
                f"image {image.shape[0]}x{image.shape[1]}"
            )
        if label < 0 or (classes is not None and label >= classes):
            raise FormatError(f"{manifest}:{lineno}: label {label} out of range for {classes} classes")
        samples.append(Sample(image, label, heat))
    return samples


# ---------------------------------------------------------------------------
# synthetic shapes


def _shape_mask(kind, yy, xx, cy, cx, r, angle):
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    if kind == "circle":
        return u * u + v * v <= r * r
    if kind == "square":
        s = r * 0.85
        return (np.abs(u) <= s) & (np.abs(v) <= s)
    if kind == "triangle":
        mask = np.ones_like(u, dtype=bool)
        for k in range(3):
            th = angle + np.pi / 2 + 2 * np.pi * k / 3
            # inside when the projection on each edge normal stays below the inradius
            mask &= (dx * np.cos(th) + dy * np.sin(th)) <= r * 0.5
        return mask
    if kind == "cross":
        arm = r * 0.35
        return ((np.abs(u) <= arm) & (np.abs(v) <= r)) | ((np.abs(v) <= arm) & (np.abs(u) <= r))
    if kind == "ring":
        d2 = u * u + v * v
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(f"unknown shape {kind!r}")


def render_sample(rng, size, label):
    """One cluttered image, its object mask, and the blurred reference heatmap."""
    kind = SHAPES[label]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5

    base = rng.uniform(40, 110, size=3)
    texture = gaussian_filter(rng.normal(0, 1, size=(size, size, 3)), sigma=(1.2, 1.2, 0))
    img = base + 18.0 * texture / max(texture.std(), 1e-9)
    for _ in range(rng.integers(3, 7)):
        # distractor strokes: short thin segments in muted colours
        y0, x0 = rng.uniform(0, size, 2)
        ang = rng.uniform(0, np.pi)
        length = rng.uniform(size * 0.1, size * 0.3)
        t = (xx - x0) * np.cos(ang) + (yy - y0) * np.sin(ang)
        d = np.abs(-(xx - x0) * np.sin(ang) + (yy - y0) * np.cos(ang))
        seg = (d <= 0.6) & (t >= 0) & (t <= length)
        img[seg] = rng.uniform(60, 160, size=3)

    r = rng.uniform(size * 0.16, size * 0.28)
    margin = r + 1
    cy, cx = rng.uniform(margin, size - margin, 2)
    mask = _shape_mask(kind, yy, xx, cy, cx, r, rng.uniform(0, 2 * np.pi))
    colour = rng.uniform(150, 255, size=3)
    colour[rng.integers(3)] = rng.uniform(170, 255)
    img[mask] = colour
    image = np.clip(np.round(img), 0, 255).astype(np.uint8)

    heat = gaussian_filter(mask.astype(np.float64), sigma=size / 32, mode="constant")
    heat = (heat / heat.max()).astype(np.float32)
    return image, mask, heat


def generate_shapes(n, size, classes, seed, out):
    """Write ``n`` samples plus ``manifest.jsonl`` under ``out``; returns the manifest path."""
    if size < 16:
        raise ValueError(f"size must be at least 16, got {size}")
    if not 2 <= classes <= len(SHAPES):
        raise ValueError(f"classes must be in 2..{len(SHAPES)}, got {classes}")
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "heatmaps").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes)
    lines = []
    for i, label in enumerate(labels):
        image, mask, heat = render_sample(rng, size, int(label))
        rows, cols = np.nonzero(mask)
        ay, ax = np.unravel_index(np.argmax(heat), heat.shape)
        assert rows.min() <= ay <= rows.max() and cols.min() <= ax <= cols.max(), (
            f"sample {i}: heatmap peak outside the object box"
        )
        img_rel, heat_rel = f"images/{i:05d}.ppm", f"heatmaps/{i:05d}.pgm"
        write_ppm(out / img_rel, image)
        write_pgm16(out / heat_rel, heat)
        lines.append(json.dumps({"image": img_rel, "heatmap": heat_rel, "label": int(label)}))
    manifest = out / "manifest.jsonl"
    manifest.write_text("".join(line + "\n" for line in lines))
    (out / "dataset.json").write_text(
        json.dumps({"classes": classes, "names": list(SHAPES[:classes]), "n": n, "seed": seed,
                    "size": size}, sort_keys=True) + "\n"
    )
    log.info("wrote %d samples to %s", n, out)
    return manifest
