"""Category taxonomies, cross-dataset class mappings, and COCO-subset ingestion.

Real document-layout datasets disagree on label sets; cross-domain scoring
therefore happens in reduced shared spaces.  This module ships the built-in
reductions (``pln4``, ``dln4``, ``dln10``, ``m6doc10``), a flat mapping-file
format (one ``source = target`` or ``source = DROP`` pair per line) so users
can override them, and a loader/exporter for the documented COCO annotation
subset (images, bbox annotations, categories).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, IngestionError
from .geometry import Box

DROP = "DROP"

# The four-class space shared by PubLayNet-style and DocLayNet-style data,
# and the ten-class space shared by DocLayNet-style and M6Doc-style data.
SHARED4 = ("figure", "table", "text", "title")
SHARED10 = (
    "caption",
    "footnote",
    "formula",
    "page-footer",
    "page-header",
    "picture",
    "section-header",
    "table",
    "text",
    "title",
)

PUBLAYNET_CLASSES = ("figure", "list", "table", "text", "title")
DOCLAYNET_CLASSES = (
    "caption",
    "footnote",
    "formula",
    "list-item",
    "page-footer",
    "page-header",
    "picture",
    "section-header",
    "table",
    "text",
    "title",
)


@dataclass(frozen=True)
class Taxonomy:
    """Ordered category names; ids are the positions 0..K-1."""

    name: str
    categories: tuple

    def __post_init__(self):
        cats = tuple(str(c) for c in self.categories)
        if len(set(cats)) != len(cats):
            raise ConfigurationError(f"taxonomy {self.name!r} has duplicate category names")
        if not cats:
            raise ConfigurationError(f"taxonomy {self.name!r} has no categories")
        object.__setattr__(self, "categories", cats)

    def __len__(self) -> int:
        return len(self.categories)

    def id_of(self, name: str) -> int:
        try:
            return self.categories.index(name)
        except ValueError:
            raise ConfigurationError(f"category {name!r} not in taxonomy {self.name!r}") from None

    def name_of(self, category_id: int) -> str:
        if not 0 <= category_id < len(self.categories):
            raise ConfigurationError(f"category id {category_id} not in taxonomy {self.name!r}")
        return self.categories[category_id]


@dataclass(frozen=True)
class CategoryMapping:
    """Total map from one taxonomy's categories onto another's (or DROP)."""

    source_taxonomy: Taxonomy
    target_taxonomy: Taxonomy
    pairs: tuple  # ((source name, target name or DROP), ...)

    def __post_init__(self):
        pairs = tuple((str(s), str(t)) for s, t in self.pairs)
        object.__setattr__(self, "pairs", pairs)
        sources = [s for s, _ in pairs]
        if sorted(sources) != sorted(self.source_taxonomy.categories):
            raise ConfigurationError(
                "mapping must cover every source category exactly once "
                f"(got {sources} for taxonomy {self.source_taxonomy.name!r})"
            )
        for s, t in pairs:
            if t != DROP and t not in self.target_taxonomy.categories:
                raise ConfigurationError(f"mapping target {t!r} (from {s!r}) not in target taxonomy")

    def target_for(self, source_name: str) -> str:
        for s, t in self.pairs:
            if s == source_name:
                return t
        raise ConfigurationError(f"{source_name!r} not in mapping")


@dataclass(frozen=True)
class ImageRecord:
    id: int
    file_path: str
    width: int
    height: int


@dataclass(frozen=True)
class Annotation:
    image_id: int
    box: Box
    category_id: int


@dataclass(frozen=True)
class Dataset:
    """Immutable image/annotation collection under one taxonomy."""

    images: tuple
    annotations: tuple
    taxonomy: Taxonomy

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        sizes = {im.id: (im.width, im.height) for im in self.images}
        if len(sizes) != len(self.images):
            raise IngestionError("duplicate image ids in dataset")
        for i, ann in enumerate(self.annotations):
            if ann.image_id not in sizes:
                raise IngestionError(f"annotation {i} references missing image id {ann.image_id}")
            w, h = sizes[ann.image_id]
            b = ann.box
            if b.x_min < -1e-6 or b.y_min < -1e-6 or b.x_max > w + 1e-6 or b.y_max > h + 1e-6:
                raise IngestionError(f"annotation {i} box outside image {ann.image_id} bounds")
            if not 0 <= ann.category_id < len(self.taxonomy):
                raise IngestionError(f"annotation {i} has invalid category id {ann.category_id}")

    def __len__(self) -> int:
        return len(self.images)

    def annotations_for(self, image_id: int) -> tuple:
        return tuple(a for a in self.annotations if a.image_id == image_id)

    def images_only(self) -> "Dataset":
        """Annotation-free view; what the adaptation loop is allowed to see."""
        return Dataset(self.images, (), self.taxonomy)


def shared4_taxonomy() -> Taxonomy:
    return Taxonomy("shared4", SHARED4)


def shared10_taxonomy() -> Taxonomy:
    return Taxonomy("shared10", SHARED10)


def _mapping_from_pairs(name, source_name, source_classes, target_taxonomy, pairs):
    return CategoryMapping(Taxonomy(source_name, source_classes), target_taxonomy, pairs)


def builtin_mapping(name: str) -> CategoryMapping:
    """Return one of the documented cross-dataset reductions.

    ``pln4``/``dln4`` reduce PubLayNet-style and DocLayNet-style taxonomies to
    the four shared classes; ``dln10``/``m6doc10`` align DocLayNet-style and
    M6Doc-style taxonomies on ten shared classes.  The M6Doc side is a
    maintainer-curated stand-in (see ``data/mappings/m6doc10.map``) and can be
    overridden with :func:`load_mapping_file`.
    """
    if name == "pln4":
        pairs = (
            ("figure", "figure"),
            ("list", DROP),
            ("table", "table"),
            ("text", "text"),
            ("title", "title"),
        )
        return _mapping_from_pairs(name, "publaynet", PUBLAYNET_CLASSES, shared4_taxonomy(), pairs)
    if name == "dln4":
        pairs = tuple(
            (c, {"picture": "figure", "table": "table", "text": "text", "title": "title"}.get(c, DROP))
            for c in DOCLAYNET_CLASSES
        )
        return _mapping_from_pairs(name, "doclaynet", DOCLAYNET_CLASSES, shared4_taxonomy(), pairs)
    if name == "dln10":
        pairs = tuple((c, c if c in SHARED10 else DROP) for c in DOCLAYNET_CLASSES)
        return _mapping_from_pairs(name, "doclaynet", DOCLAYNET_CLASSES, shared10_taxonomy(), pairs)
    if name == "m6doc10":
        ref = resources.files("docadapt").joinpath("data/mappings/m6doc10.map")
        with resources.as_file(ref) as path:
            return load_mapping_file(path, shared10_taxonomy(), source_name="m6doc")
    raise ConfigurationError(
        f"unknown mapping {name!r}; valid options: pln4, dln4, dln10, m6doc10"
    )


def load_mapping_file(path, target_taxonomy: Taxonomy, source_name: str | None = None) -> CategoryMapping:
    """Parse a flat mapping file: one ``source = target`` (or ``= DROP``) per line.

    Blank lines and ``#`` comments are ignored.  The source taxonomy is built
    from the left-hand sides in file order.
    """
    path = Path(path)
    pairs = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise IngestionError(f"{path.name}:{lineno}: expected 'source = target', got {raw!r}")
        src, tgt = (part.strip() for part in line.split("=", 1))
        if not src or not tgt:
            raise IngestionError(f"{path.name}:{lineno}: empty source or target")
        pairs.append((src, tgt))
    if not pairs:
        raise IngestionError(f"{path}: no mapping pairs found")
    source = Taxonomy(source_name or path.stem, tuple(s for s, _ in pairs))
    return CategoryMapping(source, target_taxonomy, tuple(pairs))


def write_mapping_file(mapping: CategoryMapping, path) -> None:
    lines = [f"# {mapping.source_taxonomy.name} -> {mapping.target_taxonomy.name}"]
    lines += [f"{s} = {t}" for s, t in mapping.pairs]
    Path(path).write_text("\n".join(lines) + "\n")


def identity_mapping(taxonomy: Taxonomy) -> CategoryMapping:
    return CategoryMapping(taxonomy, taxonomy, tuple((c, c) for c in taxonomy.categories))


def remap(dataset: Dataset, mapping: CategoryMapping) -> Dataset:
    """Translate a dataset into the mapping's target taxonomy, dropping DROPs."""
    # Taxonomies match on category content; display names may differ (a COCO
    # file's taxonomy is named after the file).
    if dataset.taxonomy.categories != mapping.source_taxonomy.categories:
        raise ConfigurationError(
            f"dataset taxonomy {dataset.taxonomy.name!r} does not match "
            f"mapping source {mapping.source_taxonomy.name!r}"
        )
    lut = {}
    for s, t in mapping.pairs:
        src_id = mapping.source_taxonomy.id_of(s)
        lut[src_id] = None if t == DROP else mapping.target_taxonomy.id_of(t)
    kept = tuple(
        Annotation(a.image_id, a.box, lut[a.category_id])
        for a in dataset.annotations
        if lut[a.category_id] is not None
    )
    return Dataset(dataset.images, kept, mapping.target_taxonomy)


# -- COCO-subset annotation files ---------------------------------------------


def load_coco(path) -> Dataset:
    """Load the documented COCO subset: images, bbox annotations, categories.

    ``bbox`` is ``[x, y, w, h]`` and is converted to corner form.  Category
    ids are re-indexed from 0 in category-name order so taxonomies are stable
    across files; image paths resolve relative to the annotation file.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise IngestionError(f"cannot read annotation file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise IngestionError(f"{path} is not valid JSON: {exc}") from exc
    for key in ("images", "annotations", "categories"):
        if key not in raw:
            raise IngestionError(f"{path} missing required key {key!r}")
    if not raw["categories"]:
        raise IngestionError(f"{path} has an empty categories block")

    by_name = sorted(raw["categories"], key=lambda c: str(c.get("name", "")))
    names = []
    old_to_new = {}
    for new_id, cat in enumerate(by_name):
        if "id" not in cat or "name" not in cat:
            raise IngestionError(f"{path}: category record {cat!r} missing id or name")
        names.append(str(cat["name"]))
        old_to_new[cat["id"]] = new_id
    taxonomy = Taxonomy(path.stem, tuple(names))

    images = []
    for rec in raw["images"]:
        try:
            images.append(
                ImageRecord(
                    id=int(rec["id"]),
                    file_path=str(path.parent / rec["file_name"]),
                    width=int(rec["width"]),
                    height=int(rec["height"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise IngestionError(f"{path}: malformed image record {rec.get('id', rec)!r}: {exc}") from exc

    annotations = []
    for rec in raw["annotations"]:
        rec_id = rec.get("id", "<missing id>")
        try:
            x, y, w, h = (float(v) for v in rec["bbox"])
            if w < 0 or h < 0:
                raise ValueError(f"negative bbox size {rec['bbox']}")
            annotations.append(
                Annotation(
                    image_id=int(rec["image_id"]),
                    box=Box(x, y, x + w, y + h),
                    category_id=old_to_new[rec["category_id"]],
                )
            )
        except KeyError as exc:
            raise IngestionError(f"{path}: annotation {rec_id!r} missing key {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise IngestionError(f"{path}: annotation {rec_id!r} malformed: {exc}") from exc
    return Dataset(tuple(images), tuple(annotations), taxonomy)


def export_coco(dataset: Dataset, path) -> None:
    """Write a dataset back to the COCO subset (inverse of :func:`load_coco`)."""
    path = Path(path)
    body = {
        "images": [
            {
                "id": im.id,
                "file_name": _relative_to(im.file_path, path.parent),
                "width": im.width,
                "height": im.height,
            }
            for im in dataset.images
        ],
        "annotations": [
            {
                "id": i,
                "image_id": a.image_id,
                "bbox": [a.box.x_min, a.box.y_min, a.box.width, a.box.height],
                "category_id": a.category_id,
            }
            for i, a in enumerate(dataset.annotations)
        ],
        "categories": [
            {"id": i, "name": name} for i, name in enumerate(dataset.taxonomy.categories)
        ],
    }
    path.write_text(json.dumps(body, sort_keys=True, separators=(",", ":")))


def _relative_to(file_path: str, base: Path) -> str:
    try:
        return Path(file_path).relative_to(base).as_posix()
    except ValueError:
        return Path(file_path).as_posix()


def with_taxonomy_name(dataset: Dataset, name: str) -> Dataset:
    return replace(dataset, taxonomy=Taxonomy(name, dataset.taxonomy.categories))


def one_hot(category_id: int, num_categories: int) -> np.ndarray:
    row = np.zeros(num_categories, dtype=np.float64)
    row[category_id] = 1.0
    return row
