"""Boundary benchmark: NMS thinning, tolerance matching, PR curves, ODS/OIS/AP."""

from __future__ import annotations

import csv
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching
from scipy.spatial import cKDTree

DEFAULT_MAX_DIST = 0.0075


class BenchmarkError(ValueError):
    pass


# --------------------------------------------------------------------------
# thinning
# --------------------------------------------------------------------------


def edge_orientation(prob: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Normal direction in [0, pi) from second derivatives of the smoothed map.

    0 means the edge normal points along +x (a vertical contour).
    """
    e = ndimage.gaussian_filter(np.asarray(prob, dtype=np.float64), sigma, mode="nearest")
    oy, ox = np.gradient(e)
    _, oxx = np.gradient(ox)
    oyy, oxy = np.gradient(oy)
    sign = np.where(oxy > 0, -1.0, 1.0)
    return np.mod(np.arctan(oyy * sign / (oxx + 1e-5)), np.pi)


def _interp(e: np.ndarray, y: np.ndarray, x: np.ndarray) -> np.ndarray:
    h, w = e.shape
    y = np.clip(y, 0, h - 1.001)
    x = np.clip(x, 0, w - 1.001)
    y0, x0 = np.floor(y).astype(int), np.floor(x).astype(int)
    dy, dx = y - y0, x - x0
    return (
        e[y0, x0] * (1 - dy) * (1 - dx)
        + e[y0, x0 + 1] * (1 - dy) * dx
        + e[y0 + 1, x0] * dy * (1 - dx)
        + e[y0 + 1, x0 + 1] * dy * dx
    )


def nms_pass(prob: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """One suppression sweep: keep pixels that beat both radius-1 normal neighbours.

    Ties go to the row-major earlier pixel.
    """
    e = np.asarray(prob, dtype=np.float64)
    ori = edge_orientation(e, sigma)
    ys, xs = np.nonzero(e > 0)
    if ys.size == 0:
        return np.zeros_like(e)
    c, s = np.cos(ori[ys, xs]), np.sin(ori[ys, xs])
    v = e[ys, xs]
    # s >= 0, so the "+" neighbour never precedes (y, x) in row-major order
    ahead = _interp(e, ys + s, xs + c)
    behind = _interp(e, ys - s, xs - c)
    keep = (v >= ahead) & (v > behind)
    out = np.zeros_like(e)
    out[ys[keep], xs[keep]] = v[keep]
    return out


def nms_thin(prob: np.ndarray, sigma: float = 1.0, max_iter: int = 50) -> np.ndarray:
    """Thin a soft contour map to 1-pixel ridges.

    The suppression sweep is repeated until nothing changes, so the result
    is a fixed point and thinning it again is a no-op.
    """
    cur = np.asarray(prob, dtype=np.float64)
    for _ in range(max_iter):
        nxt = nms_pass(cur, sigma)
        if np.array_equal(nxt, cur):
            break
        cur = nxt
    return cur


# --------------------------------------------------------------------------
# correspondence
# --------------------------------------------------------------------------


@dataclass
class MatchCounts:
    tp_pred: int = 0
    total_pred: int = 0
    tp_gt: int = 0
    total_gt: int = 0

    def __add__(self, other: MatchCounts) -> MatchCounts:
        return MatchCounts(
            self.tp_pred + other.tp_pred,
            self.total_pred + other.total_pred,
            self.tp_gt + other.tp_gt,
            self.total_gt + other.total_gt,
        )

    @property
    def precision(self) -> float:
        return self.tp_pred / self.total_pred if self.total_pred else 1.0

    @property
    def recall(self) -> float:
        return self.tp_gt / self.total_gt if self.total_gt else 1.0


def f_measure(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def tolerance_px(shape: tuple[int, int], max_dist: float = DEFAULT_MAX_DIST) -> float:
    return max_dist * float(np.hypot(*shape))


def _match(pred: np.ndarray, gt: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Maximum matching; returns (pred coords, gt coords, pred matched mask, gt matched mask)."""
    p = np.argwhere(pred)
    g = np.argwhere(gt)
    pm = np.zeros(len(p), dtype=bool)
    gm = np.zeros(len(g), dtype=bool)
    if len(p) and len(g):
        pairs = cKDTree(p).query_ball_tree(cKDTree(g), tol + 1e-9)
        rows = np.repeat(np.arange(len(p)), [len(x) for x in pairs])
        cols = np.fromiter((j for x in pairs for j in x), dtype=np.int64, count=len(rows))
        if len(rows):
            adj = coo_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(len(p), len(g))).tocsr()
            m = maximum_bipartite_matching(adj, perm_type="column")
            pm = m >= 0
            gm[m[pm]] = True
    return p, g, pm, gm


def correspond(pred_binary: np.ndarray, gt: np.ndarray, tol: float) -> MatchCounts:
    """Maximum one-to-one matching of positives within Euclidean ``tol`` pixels."""
    pred_binary, gt = np.asarray(pred_binary) > 0, np.asarray(gt) > 0
    if pred_binary.shape != gt.shape:
        raise BenchmarkError(f"prediction {pred_binary.shape} and ground truth {gt.shape} differ in extent")
    if not tol > 0:
        raise BenchmarkError(f"tolerance must be positive, got {tol}")
    _, _, pm, gm = _match(pred_binary, gt, tol)
    return MatchCounts(int(pm.sum()), int(pred_binary.sum()), int(gm.sum()), int(gt.sum()))


def correspond_multi(pred_binary: np.ndarray, gts: Sequence[np.ndarray], tol: float) -> MatchCounts:
    """Union precision, per-annotator recall.

    A prediction is a true positive if any annotator map matches it; every
    annotator map adds its own pixels to the recall denominator.
    """
    if len(gts) == 0:
        raise BenchmarkError("ground-truth set is empty")
    pred_binary = np.asarray(pred_binary) > 0
    hit = np.zeros(int(pred_binary.sum()), dtype=bool)
    tp_gt = total_gt = 0
    for gt in gts:
        gt = np.asarray(gt) > 0
        if gt.shape != pred_binary.shape:
            raise BenchmarkError(f"prediction {pred_binary.shape} and ground truth {gt.shape} differ in extent")
        if not tol > 0:
            raise BenchmarkError(f"tolerance must be positive, got {tol}")
        _, _, pm, gm = _match(pred_binary, gt, tol)
        if pm.size:
            hit |= pm
        tp_gt += int(gm.sum())
        total_gt += int(gt.sum())
    return MatchCounts(int(hit.sum()), int(pred_binary.sum()), tp_gt, total_gt)


# --------------------------------------------------------------------------
# benchmark
# --------------------------------------------------------------------------


@dataclass
class BenchmarkSummary:
    pr_points: list[tuple[float, float, float, float]]
    ods: float
    ois: float
    ap: float
    ods_threshold: float = float("nan")

    def as_row(self) -> dict[str, float]:
        return {"ods": self.ods, "ois": self.ois, "ap": self.ap}


def default_thresholds(k: int = 99) -> np.ndarray:
    if k < 2:
        raise BenchmarkError(f"need at least 2 thresholds, got {k}")
    return np.arange(1, k + 1) / (k + 1)


def image_counts(
    pred: np.ndarray, gts: Sequence[np.ndarray], thresholds: np.ndarray, tol: float | None = None
) -> list[MatchCounts]:
    """Match counts for one image at every threshold (binarise with ``>=``)."""
    pred = np.asarray(pred, dtype=np.float64)
    tol = tolerance_px(pred.shape) if tol is None else tol
    return [correspond_multi(pred >= t, gts, tol) for t in thresholds]


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """Trapezoid area under the precision envelope, extended flat to recall 0."""
    order = np.argsort(recall, kind="stable")
    r, p = np.asarray(recall, float)[order], np.asarray(precision, float)[order]
    # running max from high recall to low
    p = np.maximum.accumulate(p[::-1])[::-1]
    r = np.concatenate([[0.0], r])
    p = np.concatenate([[p[0]], p])
    return float(np.sum((r[1:] - r[:-1]) * (p[1:] + p[:-1]) / 2))


def summarize(per_image: Sequence[Sequence[MatchCounts]], thresholds: np.ndarray) -> BenchmarkSummary:
    """ODS/OIS/AP from per-image, per-threshold counts."""
    thresholds = np.asarray(thresholds, dtype=float)
    if not per_image:
        raise BenchmarkError("no images to benchmark")
    if sum(c[0].total_gt for c in per_image) == 0:
        raise BenchmarkError("no positive ground-truth pixels anywhere; recall is undefined")
    totals = [sum((img[k] for img in per_image), MatchCounts()) for k in range(len(thresholds))]
    points = []
    for t, c in zip(thresholds, totals):
        p, r = c.precision, c.recall
        points.append((float(t), p, r, f_measure(p, r)))
    fs = np.array([pt[3] for pt in points])
    best = int(np.argmax(fs))
    ois_counts = MatchCounts()
    for img in per_image:
        img_f = [f_measure(c.precision, c.recall) for c in img]
        ois_counts = ois_counts + img[int(np.argmax(img_f))]
    ois = f_measure(ois_counts.precision, ois_counts.recall)
    ap = average_precision(np.array([pt[2] for pt in points]), np.array([pt[1] for pt in points]))
    return BenchmarkSummary(points, float(fs[best]), ois, ap, float(thresholds[best]))


def benchmark(
    preds: Sequence[np.ndarray],
    gts: Sequence[Sequence[np.ndarray]],
    thresholds: int = 99,
    max_dist: float = DEFAULT_MAX_DIST,
    tol: float | None = None,
) -> BenchmarkSummary:
    """Evaluate thinned soft maps against per-image annotator sets.

    The matching radius is ``max_dist`` times the image diagonal unless
    ``tol`` (pixels) is given.
    """
    if len(preds) != len(gts):
        raise BenchmarkError(f"{len(preds)} predictions for {len(gts)} ground-truth sets")
    ts = default_thresholds(thresholds)
    per_image = []
    for pred, gt in zip(preds, gts):
        gt = [gt] if isinstance(gt, np.ndarray) else list(gt)
        img_tol = tolerance_px(np.shape(pred), max_dist) if tol is None else tol
        per_image.append(image_counts(pred, gt, ts, img_tol))
    return summarize(per_image, ts)


# --------------------------------------------------------------------------
# report files
# --------------------------------------------------------------------------

CSV_COLUMNS = ("threshold", "precision", "recall", "f")


def write_pr_csv(summary: BenchmarkSummary, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for row in summary.pr_points:
            w.writerow([repr(float(v)) for v in row])


def read_pr_csv(path: str | Path) -> list[tuple[float, float, float, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != CSV_COLUMNS:
        raise BenchmarkError(f"{path}: unexpected header {rows[0]}")
    return [tuple(float(v) for v in r) for r in rows[1:]]  # type: ignore[misc]


def iso_f_curve(f: float, n: int = 100) -> np.ndarray:
    """(recall, precision) points of the iso-F line for F = ``f``."""
    r = np.linspace(f / (2 - f) + 1e-9, 1.0, n)
    p = f * r / (2 * r - f)
    return np.column_stack([r, p])


PALETTE = ("#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def render_svg(
    summary: BenchmarkSummary | dict[str, BenchmarkSummary],
    size: int = 400,
    iso_f=(0.5, 0.6, 0.7, 0.8, 0.9),
    title: str = "",
) -> str:
    """Static PR plot; a mapping of named summaries draws one curve each."""
    curves = summary if isinstance(summary, dict) else {title: summary}
    m = 40
    span = size - 2 * m

    def xy(r: float, p: float) -> str:
        return f"{m + r * span:.2f},{m + (1 - p) * span:.2f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="{m}" y="{m}" width="{span}" height="{span}" fill="none" stroke="black"/>',
    ]
    for f in iso_f:
        pts = " ".join(xy(r, p) for r, p in iso_f_curve(f))
        parts.append(f'<polyline class="iso-f" data-f="{f:.1f}" points="{pts}" fill="none" stroke="#7fbf7f" stroke-width="0.8"/>')
        parts.append(f'<text class="iso-f-label" x="{m + span + 2}" y="{m + (1 - f / (2 - f)) * span + 3:.2f}" font-size="9">{f:.1f}</text>')
    for i in range(6):
        v = i / 5
        parts.append(f'<text x="{m + v * span:.2f}" y="{size - m + 14}" font-size="10" text-anchor="middle">{v:.1f}</text>')
        parts.append(f'<text x="{m - 4}" y="{m + (1 - v) * span + 3:.2f}" font-size="10" text-anchor="end">{v:.1f}</text>')
    parts.append(f'<text x="{size / 2}" y="{size - 6}" font-size="11" text-anchor="middle">Recall</text>')
    parts.append(f'<text x="12" y="{size / 2}" font-size="11" transform="rotate(-90 12 {size / 2})" text-anchor="middle">Precision</text>')
    for k, (name, s) in enumerate(curves.items()):
        color = PALETTE[k % len(PALETTE)]
        curve = [(r, p) for _, p, r, _ in s.pr_points if r > 0 or p < 1]
        if curve:
            pts = " ".join(xy(r, p) for r, p in curve)
            parts.append(f'<polyline class="pr" data-name="{escape(name)}" points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        label = escape(f"{name} ODS={s.ods:.3f} OIS={s.ois:.3f} AP={s.ap:.3f}".strip())
        parts.append(f'<text x="{m + 6}" y="{m + 14 + 13 * k}" font-size="10" fill="{color}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def export_report(summary: BenchmarkSummary, out_dir: str | Path, stem: str = "pr") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, svg_path = out / f"{stem}.csv", out / f"{stem}.svg"
    write_pr_csv(summary, csv_path)
    svg_path.write_text(render_svg(summary), encoding="utf-8")
    return csv_path, svg_path
