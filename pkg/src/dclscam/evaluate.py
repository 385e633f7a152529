"""Rank-correlation scoring of explanation heatmaps against reference maps."""

from __future__ import annotations

import copy
import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import cam as _cam
from .zoo import to_input

CSV_COLUMNS = ("model", "method", "top1", "mean_score", "n_images", "n_degenerate", "params")
TABLE_COLUMNS = ("Model", "Top1-accuracy", "Grad-CAM score", "Threshold-Grad-CAM score", "Params")


class ReportSchemaError(ValueError):
    pass


def average_ranks(values):
    """1-based ranks; tied values share the mean of the ranks they span."""
    v = np.asarray(values, dtype=np.float64).ravel()
    order = np.argsort(v, kind="mergesort")
    sv = v[order]
    starts = np.flatnonzero(np.r_[True, sv[1:] != sv[:-1]])
    ends = np.r_[starts[1:], v.size]
    mean_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(v.size, dtype=np.float64)
    ranks[order] = np.repeat(mean_rank, ends - starts)
    return ranks


def rank_correlation(a, b):
    """Spearman correlation as (score, degenerate).

    A constant input has no rank variance; it scores 0 and is flagged.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("need at least two observations")
    ra = average_ranks(a)
    rb = average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    saa = np.dot(ra, ra)
    sbb = np.dot(rb, rb)
    if saa == 0 or sbb == 0:
        return 0.0, True
    r = float(np.dot(ra, rb) / math.sqrt(saa * sbb))
    return min(1.0, max(-1.0, r)), False


def spearman(a, b):
    return rank_correlation(a, b)[0]


@dataclass
class AlignmentReport:
    model: str
    method: str
    scores: list = field(default_factory=list)
    top1: float = 0.0
    params: int = 0
    n_degenerate: int = 0

    @property
    def mean_score(self):
        return float(np.mean(self.scores)) if self.scores else 0.0

    @property
    def n_images(self):
        return len(self.scores)

    def row(self):
        return {
            "model": self.model,
            "method": self.method,
            "top1": f"{self.top1:.4f}",
            "mean_score": f"{self.mean_score:.4f}",
            "n_images": str(self.n_images),
            "n_degenerate": str(self.n_degenerate),
            "params": str(self.params),
        }


def score_heatmaps(heatmaps, references, blur=0.0):
    """Per-image Spearman scores and the number of degenerate comparisons."""
    scores, degenerate = [], 0
    for hm, ref in zip(heatmaps, references):
        values = hm.values if isinstance(hm, _cam.Heatmap) else np.asarray(hm)
        ref = np.asarray(ref)
        if values.shape != ref.shape:
            values = _cam._resize(np.asarray(values, dtype=np.float64), *ref.shape)
        if values.shape != ref.shape:
            raise AssertionError(f"resized heatmap {values.shape} vs reference {ref.shape}")
        if blur > 0:
            values = gaussian_filter(np.asarray(values, dtype=np.float64), blur)
        r, deg = rank_correlation(values, ref)
        flagged = deg or (isinstance(hm, _cam.Heatmap) and hm.degenerate)
        scores.append(0.0 if flagged else r)
        degenerate += int(flagged)
    return scores, degenerate


def _score_chunk(model, samples, method, t, target, class_source, blur, batch_size):
    scores, degenerate, correct = [], 0, 0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images = np.stack([s.image for s in chunk])
        labels = np.array([s.label for s in chunk])
        if class_source == "label":
            classes = labels
        else:
            classes = np.argmax(model.forward(to_input(images)).data, axis=1)
        maps, logits = _cam.explain_batch(model, images, classes, method, t, target)
        correct += int(np.sum(np.argmax(logits, axis=1) == labels))
        sc, deg = score_heatmaps(maps, [s.heatmap for s in chunk], blur)
        scores.extend(sc)
        degenerate += deg
    return scores, degenerate, correct


def score_model(model, samples, method="threshold_gradcam", t=_cam.DEFAULT_THRESHOLD, model_id="model",
                target="logit", class_source="label", blur=0.0, batch_size=64, workers=1):
    """Explain every sample and correlate with its reference heatmap.

    ``class_source`` selects the explained class: the ground-truth label or
    the model's prediction.  With ``workers > 1`` contiguous chunks are
    scored on private model copies; results keep dataset order.
    """
    if class_source not in ("label", "predicted"):
        raise ValueError(f"unknown class source {class_source!r}")
    if not samples:
        raise ValueError("cannot score an empty dataset")
    args = (method, t, target, class_source, blur, batch_size)
    if workers <= 1:
        parts = [_score_chunk(model, samples, *args)]
    else:
        bounds = np.linspace(0, len(samples), workers + 1).astype(int)
        chunks = [samples[a:b] for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            futures = [pool.submit(_score_chunk, copy.deepcopy(model), c, *args) for c in chunks]
            parts = [f.result() for f in futures]
    scores = [s for p in parts for s in p[0]]
    return AlignmentReport(
        model=model_id,
        method=method,
        scores=scores,
        top1=sum(p[2] for p in parts) / len(samples),
        params=model.param_count(),
        n_degenerate=sum(p[1] for p in parts),
    )


# ---------------------------------------------------------------------------
# reports


def emit_report(reports):
    """(CSV text, formatted table text) for a list of reports, in input order."""
    rows = [r.row() if isinstance(r, AlignmentReport) else dict(r) for r in reports]
    return rows_to_csv(rows), format_table(rows)


def rows_to_csv(rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: row[k] for k in CSV_COLUMNS})
    return buf.getvalue()


def read_report_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ReportSchemaError(f"{path}: empty file") from None
        if tuple(header) != CSV_COLUMNS:
            raise ReportSchemaError(f"{path}: header {header} does not match {list(CSV_COLUMNS)}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(CSV_COLUMNS):
                raise ReportSchemaError(f"{path}:{lineno}: expected {len(CSV_COLUMNS)} fields")
            rows.append(dict(zip(CSV_COLUMNS, rec)))
    return rows


def pivot_rows(rows):
    """One entry per model (first-seen order) with both method scores."""
    models = {}
    for row in rows:
        entry = models.setdefault(row["model"], {"model": row["model"], "top1": row["top1"],
                                                 "params": row["params"]})
        entry[row["method"]] = row["mean_score"]
    return list(models.values())


def format_table(rows):
    body = []
    for entry in pivot_rows(rows):
        body.append((
            entry["model"],
            f"{100 * float(entry['top1']):.2f}",
            entry.get("gradcam", "-"),
            entry.get("threshold_gradcam", "-"),
            entry["params"],
        ))
    widths = [max([len(c)] + [len(r[i]) for r in body]) for i, c in enumerate(TABLE_COLUMNS)]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(TABLE_COLUMNS, widths)))]
    lines.append("  ".join("-" * w for w in widths))
    for r in body:
        lines.append("  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(r, widths))))
    return "\n".join(lines) + "\n"
