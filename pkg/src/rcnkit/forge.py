"""Contour label corpora: mask boundaries, confident-detection enrichment,
and a seeded synthetic corpus of shapes with distractor lines."""

from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from skimage import draw

from .imageio import read_label, read_png, write_label, write_png

log = logging.getLogger(__name__)

MANIFEST_HEADER = "# rcnkit corpus manifest v1"
SHAPE_KINDS = ("rectangle", "ellipse", "polygon")


class ForgeError(ValueError):
    pass


@dataclass
class SegmentationMask:
    pixels: np.ndarray
    class_set: frozenset[int] = frozenset()

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 2 or self.pixels.size == 0:
            raise ForgeError(f"mask must be a nonempty 2-D array, got shape {self.pixels.shape}")
        if (self.pixels < 0).any():
            raise ForgeError("mask class ids must be nonnegative")


@dataclass
class LabelMap:
    pixels: np.ndarray
    provenance: str = "synthetic"

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels).astype(np.uint8)
        if not np.isin(self.pixels, (0, 1)).all():
            raise ForgeError("label values must be 0 or 1")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape  # type: ignore[return-value]

    def count(self) -> int:
        return int(self.pixels.sum())


def mask_to_contours(mask: SegmentationMask | np.ndarray, classes: Iterable[int]) -> LabelMap:
    """Mark selected-class pixels that have a 4-neighbour of another id.

    Pixels outside the image count as background (id 0).
    """
    pixels = mask.pixels if isinstance(mask, SegmentationMask) else SegmentationMask(mask).pixels
    classes = sorted(set(int(c) for c in classes))
    if not classes:
        raise ForgeError("class set is empty")
    padded = np.pad(pixels, 1, constant_values=0)
    center = padded[1:-1, 1:-1]
    differs = (
        (padded[:-2, 1:-1] != center)
        | (padded[2:, 1:-1] != center)
        | (padded[1:-1, :-2] != center)
        | (padded[1:-1, 2:] != center)
    )
    return LabelMap(np.isin(pixels, classes) & differs, provenance="mask_derived")


def enrich_labels(base: LabelMap | np.ndarray, detection: np.ndarray, threshold: float = 0.9) -> LabelMap:
    """Add confident detections (``detection >= threshold``) to ``base``."""
    base_px = base.pixels if isinstance(base, LabelMap) else np.asarray(base)
    detection = np.asarray(detection)
    if base_px.shape != detection.shape:
        raise ForgeError(f"label {base_px.shape} and detection {detection.shape} differ in shape")
    if threshold <= 0:
        raise ForgeError(f"threshold must be positive, got {threshold}")
    return LabelMap((base_px > 0) | (detection >= threshold), provenance="enriched")


def degrade_labels(label: LabelMap, rng: np.random.Generator, drop_fraction: float = 0.3, block: int = 8) -> LabelMap:
    """Delete contour pieces in square blocks, mimicking incomplete annotations."""
    px = label.pixels.copy()
    h, w = px.shape
    target = int(round(drop_fraction * px.sum()))
    removed = 0
    ys, xs = np.nonzero(px)
    order = rng.permutation(len(ys))
    for i in order:
        if removed >= target:
            break
        y, x = ys[i], xs[i]
        if not px[y, x]:
            continue
        y0, x0 = max(0, y - block // 2), max(0, x - block // 2)
        removed += int(px[y0 : y0 + block, x0 : x0 + block].sum())
        px[y0 : y0 + block, x0 : x0 + block] = 0
    return LabelMap(px, provenance=label.provenance)


# --------------------------------------------------------------------------
# synthetic corpus
# --------------------------------------------------------------------------


@dataclass
class SynthConfig:
    canvas: tuple[int, int] = (96, 96)
    kinds: tuple[str, ...] = SHAPE_KINDS
    shapes: tuple[int, int] = (1, 4)
    distractors: tuple[int, int] = (1, 3)
    noise: float = 0.02
    gradient: float = 0.1
    min_contrast: float = 0.15

    def validate(self) -> None:
        h, w = self.canvas
        if min(h, w) < 16:
            raise ForgeError(f"canvas {h}x{w} is too small for shapes (need at least 16x16)")
        bad = set(self.kinds) - set(SHAPE_KINDS)
        if not self.kinds or bad:
            raise ForgeError(f"unknown shape kinds: {sorted(bad) or 'none given'}")
        if not 1 <= self.shapes[0] <= self.shapes[1]:
            raise ForgeError(f"invalid shape count range {self.shapes}")
        if not 0 <= self.distractors[0] <= self.distractors[1]:
            raise ForgeError(f"invalid distractor count range {self.distractors}")


@dataclass
class SynthSample:
    image: np.ndarray  # uint8 (H, W, 3)
    mask: np.ndarray  # shape ids, 0 = background
    label: LabelMap
    distractors: np.ndarray  # bool, pixels of distractor lines
    shapes: list[dict] = field(default_factory=list)


def _shape_pixels(kind: str, rng: np.random.Generator, h: int, w: int) -> tuple[np.ndarray, np.ndarray, dict]:
    lo, hi = max(4, min(h, w) // 6), max(5, min(h, w) // 2)
    if kind == "rectangle":
        sh, sw = rng.integers(lo, hi + 1, size=2)
        y0 = int(rng.integers(1, h - sh))
        x0 = int(rng.integers(1, w - sw))
        rr, cc = np.mgrid[y0 : y0 + sh, x0 : x0 + sw]
        return rr.ravel(), cc.ravel(), {"kind": kind, "top": y0, "left": x0, "height": int(sh), "width": int(sw)}
    if kind == "ellipse":
        ry, rx = rng.uniform(lo / 2, hi / 2, size=2)
        cy = rng.uniform(ry + 1, h - ry - 1)
        cx = rng.uniform(rx + 1, w - rx - 1)
        rr, cc = draw.ellipse(cy, cx, ry, rx, shape=(h, w))
        return rr, cc, {"kind": kind, "cy": cy, "cx": cx, "ry": ry, "rx": rx}
    r = rng.uniform(lo / 2, hi / 2)
    cy, cx = rng.uniform(r + 1, h - r - 1), rng.uniform(r + 1, w - r - 1)
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=int(rng.integers(3, 7))))
    ys, xs = cy + r * np.sin(angles), cx + r * np.cos(angles)
    rr, cc = draw.polygon(ys, xs, shape=(h, w))
    return rr, cc, {"kind": kind, "vertices": list(zip(ys.tolist(), xs.tolist()))}


def _pick_level(rng: np.random.Generator, taken: list[float], min_gap: float) -> float:
    grid = np.linspace(0.05, 0.95, 91)
    gap = min_gap
    while gap >= 0.05:
        free = grid[np.all(np.abs(grid[:, None] - np.asarray(taken)[None, :]) >= gap - 1e-9, axis=1)]
        if free.size:
            return float(free[rng.integers(free.size)])
        gap *= 0.75
    raise ForgeError("no distinct gray level left; lower the shape count")


def synth_sample(rng: np.random.Generator, cfg: SynthConfig = SynthConfig()) -> SynthSample:
    cfg.validate()
    h, w = cfg.canvas
    bg = float(rng.uniform(0.35, 0.65))
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    ramp = (np.cos(theta) * (xx / w - 0.5) + np.sin(theta) * (yy / h - 0.5)) * 2 * cfg.gradient
    img = bg + ramp

    mask = np.zeros((h, w), dtype=np.int32)
    levels = [bg]
    shapes = []
    for sid in range(1, int(rng.integers(cfg.shapes[0], cfg.shapes[1] + 1)) + 1):
        kind = cfg.kinds[int(rng.integers(len(cfg.kinds)))]
        rr, cc, meta = _shape_pixels(kind, rng, h, w)
        fill = _pick_level(rng, levels, cfg.min_contrast)
        levels.append(fill)
        mask[rr, cc] = sid
        img[rr, cc] = fill
        meta.update(id=sid, fill=fill)
        shapes.append(meta)
    label = mask_to_contours(mask, range(1, len(shapes) + 1))
    label.provenance = "synthetic"

    distract = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(cfg.distractors[0], cfg.distractors[1] + 1))):
        y0, y1 = rng.integers(0, h, size=2)
        x0, x1 = rng.integers(0, w, size=2)
        rr, cc = draw.line(int(y0), int(x0), int(y1), int(x1))
        keep = label.pixels[rr, cc] == 0
        rr, cc = rr[keep], cc[keep]
        delta = rng.uniform(cfg.min_contrast, cfg.min_contrast + 0.15) * rng.choice([-1.0, 1.0])
        img[rr, cc] = np.clip(img[rr, cc] + delta, 0.0, 1.0)
        distract[rr, cc] = True
    img = img + rng.normal(0.0, cfg.noise, size=(h, w))
    gray = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    return SynthSample(np.repeat(gray[..., None], 3, axis=2), mask, label, distract, shapes)


def synth_images(n: int, cfg: SynthConfig = SynthConfig(), seed: int = 0) -> list[SynthSample]:
    if n < 1:
        raise ForgeError(f"n must be >= 1, got {n}")
    cfg.validate()
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]
    return [synth_sample(r, cfg) for r in rngs]


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    image: Path
    labels: list[Path]
    split: str = "train"


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry]
    root: Path = Path(".")
    version: int = 1

    def split(self, tag: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == tag]

    def validate(self) -> None:
        seen: dict[Path, str] = {}
        for e in self.entries:
            for p in (e.image, *e.labels):
                if not p.exists():
                    raise ForgeError(f"manifest references missing file {p}")
            prev = seen.setdefault(e.image, e.split)
            if prev != e.split:
                raise ForgeError(f"{e.image} appears in splits {prev!r} and {e.split!r}")
            if not e.labels:
                raise ForgeError(f"{e.image} has no label files")

    def load(self, split: str | None = None) -> list[tuple[np.ndarray, list[np.ndarray]]]:
        """(image uint8 HxWx3, [binary label, ...]) pairs."""
        out = []
        for e in self.entries if split is None else self.split(split):
            img = read_png(e.image)
            if img.ndim == 2:
                img = np.repeat(img[..., None], 3, axis=2)
            out.append((img, [read_label(p) for p in e.labels]))
        return out


def write_manifest(manifest: CorpusManifest, path: str | Path) -> Path:
    path = Path(path)
    root = path.parent
    lines = [MANIFEST_HEADER]

    def rel(p: Path) -> str:
        try:
            return str(Path(p).relative_to(root))
        except ValueError:
            return str(p)

    for e in manifest.entries:
        lines.append("\t".join([rel(e.image), ";".join(rel(p) for p in e.labels), e.split]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_manifest(path: str | Path) -> CorpusManifest:
    path = Path(path)
    root = path.parent
    text = path.read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith("# rcnkit corpus manifest"):
        raise ForgeError(f"{path}: missing manifest header")
    version = int(text[0].rsplit("v", 1)[1])
    entries = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ForgeError(f"{path}:{lineno}: expected 3 tab-separated fields")
        img, labels, split = parts
        entries.append(ManifestEntry(root / img, [root / p for p in labels.split(";") if p], split))
    m = CorpusManifest(entries, root, version)
    m.validate()
    return m


def synth_corpus(
    n: int,
    out_dir: str | Path,
    cfg: SynthConfig = SynthConfig(),
    seed: int = 0,
    val_count: int = 0,
) -> CorpusManifest:
    """Render ``n`` samples to PNG files plus ``manifest.tsv``.

    The last ``val_count`` samples are tagged ``val``.  Distractor masks go
    to ``distractors/`` beside the labels.
    """
    out = Path(out_dir)
    for sub in ("images", "labels", "distractors"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(synth_images(n, cfg, seed)):
        stem = f"{i:05d}"
        img_p, lab_p = out / "images" / f"{stem}.png", out / "labels" / f"{stem}.png"
        write_png(img_p, s.image)
        write_label(lab_p, s.label.pixels)
        write_label(out / "distractors" / f"{stem}.png", s.distractors)
        entries.append(ManifestEntry(img_p, [lab_p], "val" if i >= n - val_count else "train"))
    manifest = CorpusManifest(entries, out)
    write_manifest(manifest, out / "manifest.tsv")
    return manifest


def masks_corpus(mask_dir: str | Path, out_dir: str | Path, classes: Sequence[int]) -> tuple[CorpusManifest, int]:
    """Forge contour labels from exported masks.

    Expects ``mask_dir/masks/<stem>.png`` (8-bit class ids) and
    ``mask_dir/images/<stem>.png``.  Returns the manifest and the number of
    empty labels produced.
    """
    src = Path(mask_dir)
    masks = sorted((src / "masks").glob("*.png")) or sorted(src.glob("*.png"))
    if not masks:
        raise FileNotFoundError(f"no mask PNGs under {src}")
    out = Path(out_dir)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    entries, empty = [], 0
    for mp in masks:
        image = next((p for p in (src / "images" / f"{mp.stem}{ext}" for ext in (".png", ".jpg")) if p.exists()), None)
        if image is None:
            raise FileNotFoundError(f"no image for mask {mp.name} under {src / 'images'}")
        raw = read_png(mp)
        label = mask_to_contours(raw if raw.ndim == 2 else raw[..., 0], classes)
        if label.count() == 0:
            empty += 1
            log.warning("mask %s yields no contours for classes %s", mp.name, list(classes))
        lab_p = out / "labels" / f"{mp.stem}.png"
        write_label(lab_p, label.pixels)
        entries.append(ManifestEntry(image.resolve(), [lab_p], "train"))
    manifest = CorpusManifest(entries, out)
    write_manifest(manifest, out / "manifest.tsv")
    return manifest, empty
