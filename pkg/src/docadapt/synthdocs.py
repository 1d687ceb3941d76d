"""Deterministic synthetic document-page generator.

Stands in for restricted layout datasets at desk scale: pages are grayscale
rasters with four element kinds, each drawn with an unmistakable texture so a
tiny detector can learn them —

* ``text``   horizontal line bundles,
* ``title``  one thick solid bar,
* ``figure`` a hatched rectangle,
* ``table``  a grid lattice.

Two presets give a paired source/target benchmark with both geometric shift
(two-column vs. one-column) and content shift (stroke thickness, background
level, category mix).  Every page is a pure function of (spec, seed), and
annotation boxes are the tight bounding boxes of the rendered ink.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .labelspace import Annotation, Dataset, ImageRecord, export_coco, load_coco, shared4_taxonomy
from .geometry import Box
from . import pngio

CATEGORIES = shared4_taxonomy().categories  # ("figure", "table", "text", "title")


@dataclass(frozen=True)
class RenderStyle:
    """Ink geometry knobs; the content half of the domain gap."""

    stroke: int = 1
    background: float = 1.0
    ink: float = 0.15
    text_pitch: int = 7
    hatch_pitch: int = 9
    grid_pitch: int = 18
    page_noise: float = 0.01


@dataclass(frozen=True)
class DomainSpec:
    """Everything that defines one synthetic document domain."""

    name: str
    page_size: int = 320
    columns: int = 2
    weights: tuple = (0.15, 0.15, 0.5, 0.2)  # aligned with CATEGORIES
    style: RenderStyle = field(default_factory=RenderStyle)
    elements_per_page: tuple = (6, 12)
    margin: int = 16
    gutter: int = 12
    # Chance that a figure or table spans the full text width (two-column
    # layouts place the occasional page-wide float, like real papers do;
    # body text always stays inside its column).
    full_width_fraction: float = 0.0
    # Text blocks fill this fraction range of their column's width.
    text_width_range: tuple = (0.9, 1.0)
    # Titles are short bars spanning this fraction range of their column.
    title_width_range: tuple = (0.4, 0.75)

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        if len(w) != len(CATEGORIES) or any(x < 0 for x in w) or sum(w) <= 0:
            raise ConfigurationError(f"weights must be {len(CATEGORIES)} non-negatives with a positive sum")
        if self.columns not in (1, 2):
            raise ConfigurationError("columns must be 1 or 2")
        if self.page_size < 128:
            raise ConfigurationError("page_size must be at least 128")
        lo, hi = self.elements_per_page
        if not (0 <= lo <= hi):
            raise ConfigurationError("elements_per_page must satisfy 0 <= lo <= hi")
        object.__setattr__(self, "weights", w)

    def weight_of(self, category: str) -> float:
        return self.weights[CATEGORIES.index(category)]


@dataclass(frozen=True)
class RenderedPage:
    image: np.ndarray      # (H, W) float32 in [0, 1]
    annotations: tuple     # ((Box, category_id), ...)


# Element heights as fractions of the page edge, per category.
_HEIGHT_RANGES = {
    "text": (0.09, 0.22),
    "title": (0.055, 0.095),
    "figure": (0.18, 0.34),
    "table": (0.20, 0.34),
}


def _draw_text(canvas, mask, x0, y0, x1, y1, style, rng):
    pitch = max(style.text_pitch, style.stroke + 2)
    rows = np.arange(y0, y1 - style.stroke + 1, pitch)
    if len(rows) == 0:
        rows = np.array([y0])
    for i, r in enumerate(rows):
        if i == len(rows) - 1 and len(rows) > 1:
            end = x0 + max(2, int((x1 - x0) * rng.uniform(0.55, 0.95)))
        else:
            end = x1
        canvas[r : r + style.stroke, x0:end] = style.ink
        mask[r : r + style.stroke, x0:end] = True


def _draw_title(canvas, mask, x0, y0, x1, y1, style, rng):
    canvas[y0:y1, x0:x1] = style.ink
    mask[y0:y1, x0:x1] = True


def _draw_figure(canvas, mask, x0, y0, x1, y1, style, rng):
    # Placeholder-image idiom: light fill, dark border, and an X through it.
    t = style.stroke
    fill = style.background - 0.28
    canvas[y0:y1, x0:x1] = fill
    mask[y0:y1, x0:x1] = True
    canvas[y0 : y0 + t, x0:x1] = style.ink
    canvas[y1 - t : y1, x0:x1] = style.ink
    canvas[y0:y1, x0 : x0 + t] = style.ink
    canvas[y0:y1, x1 - t : x1] = style.ink
    h, w = y1 - y0, x1 - x0
    if h > 4 and w > 4:
        rows = np.arange(y0, y1)
        frac = (rows - y0) / max(h - 1, 1)
        cols_down = x0 + np.round(frac * (w - 1)).astype(int)
        for dr in range(t):
            cc = np.clip(cols_down + dr, x0, x1 - 1)
            canvas[rows, cc] = style.ink
            canvas[rows, x1 - 1 - (cc - x0)] = style.ink


def _draw_table(canvas, mask, x0, y0, x1, y1, style, rng):
    # Grid lattice with a mid-gray header band (kept lighter than title bars
    # so the two stay distinguishable in pooled features).
    t = style.stroke
    header = min(max(6, (y1 - y0) // 5), 14)
    canvas[y0 : y0 + header, x0:x1] = (style.ink + style.background) / 2.0
    mask[y0 : y0 + header, x0:x1] = True
    n_cols = max(2, (x1 - x0) // style.grid_pitch)
    n_rows = max(2, (y1 - y0 - header) // max(style.grid_pitch - 4, 8))
    for cx in np.linspace(x0, x1 - t, int(n_cols) + 1):
        c = int(round(cx))
        canvas[y0:y1, c : c + t] = style.ink
        mask[y0:y1, c : c + t] = True
    for cy in np.linspace(y0 + header, y1 - t, int(n_rows) + 1):
        r = int(round(cy))
        canvas[r : r + t, x0:x1] = style.ink
        mask[r : r + t, x0:x1] = True


_RENDERERS = {"text": _draw_text, "title": _draw_title, "figure": _draw_figure, "table": _draw_table}


def _column_ranges(spec: DomainSpec):
    usable = spec.page_size - 2 * spec.margin
    if spec.columns == 1:
        return [(spec.margin, spec.margin + usable)]
    half = (usable - spec.gutter) // 2
    left = spec.margin
    right = spec.margin + half + spec.gutter
    return [(left, left + half), (right, right + half)]


def generate_page(spec: DomainSpec, seed: int) -> RenderedPage:
    """Render one page; a pure function of (spec, seed).

    Elements are stacked inside column bands, so no two boxes overlap.  When
    the page fills up before the sampled element count is reached, the count
    shrinks instead of failing.
    """
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    size = spec.page_size
    style = spec.style
    canvas = np.full((size, size), style.background, dtype=np.float64)
    mask = np.zeros((size, size), dtype=bool)
    lo, hi = spec.elements_per_page
    n_target = int(rng.integers(lo, hi + 1))
    weights = np.asarray(spec.weights, dtype=np.float64)
    weights = weights / weights.sum()

    columns = _column_ranges(spec)
    cursors = [spec.margin for _ in columns]
    annotations = []
    for _ in range(n_target):
        cat_id = int(rng.choice(len(CATEGORIES), p=weights))
        cat = CATEGORIES[cat_id]
        h_lo, h_hi = _HEIGHT_RANGES[cat]
        height = int(rng.uniform(h_lo, h_hi) * size)
        full_width = (
            cat in ("figure", "table")
            and len(columns) > 1
            and rng.uniform() < spec.full_width_fraction
        )
        if full_width:
            cx0, cx1 = spec.margin, size - spec.margin
            y0 = max(cursors)
        else:
            col = int(np.argmin(cursors))
            cx0, cx1 = columns[col]
            y0 = cursors[col]
        y1 = y0 + height
        if y1 > size - spec.margin:
            # No room left: the page is full, the count shrinks.
            break
        if cat == "title":
            width = int((cx1 - cx0) * rng.uniform(*spec.title_width_range))
            x0 = cx0 + int(rng.uniform(0, (cx1 - cx0) - width))
            x1 = x0 + width
        elif cat == "text":
            width = max(24, int((cx1 - cx0) * rng.uniform(*spec.text_width_range)))
            x0 = cx0 + int(rng.uniform(0, 4))
            x1 = min(cx1, x0 + width)
        else:
            inset_l = int(rng.uniform(0, 5))
            inset_r = int(rng.uniform(0, 5))
            x0, x1 = cx0 + inset_l, cx1 - inset_r
        elem_mask = np.zeros_like(mask)
        _RENDERERS[cat](canvas, elem_mask, x0, y0, x1, y1, style, rng)
        mask |= elem_mask
        ys, xs = np.nonzero(elem_mask)
        box = Box(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
        annotations.append((box, cat_id))
        advance = y1 + int(rng.uniform(8, 19))
        if full_width:
            cursors = [advance for _ in cursors]
        else:
            cursors[col] = advance

    if style.page_noise > 0:
        canvas = canvas + rng.normal(0.0, style.page_noise, canvas.shape)
    canvas = np.clip(canvas, 0.0, 1.0).astype(np.float32)
    return RenderedPage(canvas, tuple(annotations))


def ink_mask(page: RenderedPage, spec: DomainSpec) -> np.ndarray:
    """Recover the rendered-ink pixels of a page (noise-tolerant)."""
    return page.image < (spec.style.background + spec.style.ink) / 2.0


def generate_dataset(spec: DomainSpec, n_pages: int, seed: int, out_dir) -> Dataset:
    """Render ``n_pages`` pages (page i uses seed+i) and write a COCO-subset dataset.

    Layout: ``<out_dir>/images/page_*.png`` plus ``<out_dir>/annotations.json``.
    The returned dataset is re-read through :func:`labelspace.load_coco`, so it
    round-trips by construction.
    """
    if n_pages < 1:
        raise ConfigurationError("n_pages must be at least 1")
    out_dir = Path(out_dir)
    taxonomy = shared4_taxonomy()
    images = []
    annotations = []
    for i in range(n_pages):
        page = generate_page(spec, seed + i)
        rel = f"images/page_{i:05d}.png"
        pngio.save_gray(out_dir / rel, page.image)
        images.append(ImageRecord(i, str(out_dir / rel), spec.page_size, spec.page_size))
        for box, cat_id in page.annotations:
            annotations.append(Annotation(i, box, cat_id))
    dataset = Dataset(tuple(images), tuple(annotations), taxonomy)
    export_coco(dataset, out_dir / "annotations.json")
    return load_coco(out_dir / "annotations.json")


def domain_presets() -> tuple:
    """The paired benchmark: a 'scientific two-column' source and a 'report-style one-column' target."""
    source = DomainSpec(
        name="synth-source",
        page_size=320,
        columns=2,
        weights=(0.15, 0.15, 0.50, 0.20),  # figure, table, text, title
        style=RenderStyle(
            stroke=1, background=1.0, ink=0.15, text_pitch=7, hatch_pitch=9,
            grid_pitch=18, page_noise=0.01,
        ),
        elements_per_page=(6, 12),
        full_width_fraction=0.3,
    )
    target = DomainSpec(
        name="synth-target",
        page_size=320,
        columns=1,
        weights=(0.30, 0.35, 0.25, 0.10),
        style=RenderStyle(
            stroke=2, background=0.92, ink=0.12, text_pitch=9, hatch_pitch=13,
            grid_pitch=20, page_noise=0.015,
        ),
        elements_per_page=(4, 8),
        margin=30,
        text_width_range=(0.55, 0.85),
        title_width_range=(0.25, 0.5),
    )
    return source, target


def load_page_image(record: ImageRecord) -> np.ndarray:
    return pngio.load_gray(record.file_path)
