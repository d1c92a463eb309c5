"""Annotation I/O, slide tiling, train/val and k-fold splits, and augmentations."""
from __future__ import annotations

import json
import zlib
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .boxgeom import BBox

IMAGE_SUFFIXES = (".png", ".ppm")
CLIP_TOL = 1e-6
MIN_KEEP_FRACTION = 0.25


class ParseError(ValueError):
    """Malformed annotation record."""


class ValidationError(ValueError):
    """Annotation values outside their allowed range."""


class ProtocolError(ValueError):
    """Wrong number or kind of inputs for an operation."""


@dataclass
class Sample:
    image_id: str
    boxes: list[BBox] = field(default_factory=list)
    image: np.ndarray | None = None  # H x W x 3, uint8
    path: Path | None = None
    width: int | None = None
    height: int | None = None

    def __post_init__(self):
        if self.image is not None:
            self.height, self.width = self.image.shape[:2]

    def load(self) -> np.ndarray:
        if self.image is None:
            if self.path is None:
                raise ValueError(f"sample {self.image_id} has neither raster nor path")
            self.image = read_image(self.path)
            self.height, self.width = self.image.shape[:2]
        return self.image

    def boxes_px(self) -> list[BBox]:
        return [b.to_px(self.width, self.height) for b in self.boxes]


# ---------------------------------------------------------------------------
# raster and annotation I/O
# ---------------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_image(path, image: np.ndarray) -> None:
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() == ".ppm" else "PNG"
    Image.fromarray(np.asarray(image, dtype=np.uint8), "RGB").save(path, format=fmt)


def validate_box(b: BBox, where: str = "") -> BBox:
    """Reject normalized boxes outside [0, 1] (beyond tolerance), clip the rest."""
    vals = (b.cx, b.cy, b.w, b.h)
    if any(v < -CLIP_TOL or v > 1 + CLIP_TOL for v in vals):
        raise ValidationError(f"{where}box {vals} outside [0, 1]")
    if b.w <= 0 or b.h <= 0:
        raise ValidationError(f"{where}box {vals} has non-positive extent")
    return b.clipped()


def parse_yolo_line(line: str, where: str = "") -> BBox:
    parts = line.split()
    if len(parts) not in (5, 6):
        raise ParseError(f"{where}expected 'class cx cy w h', got {line!r}")
    try:
        cls = int(parts[0])
        cx, cy, w, h = (float(v) for v in parts[1:5])
        conf = float(parts[5]) if len(parts) == 6 else None
    except ValueError as exc:
        raise ParseError(f"{where}{exc}") from None
    if w <= 0 or h <= 0:
        raise ValidationError(f"{where}non-positive extent in {line!r}")
    return validate_box(BBox(cx, cy, w, h, class_id=cls, confidence=conf), where)


def format_yolo(boxes: Sequence[BBox]) -> str:
    lines = []
    for b in boxes:
        s = f"{b.class_id} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}"
        if b.confidence is not None:
            s += f" {b.confidence:.6f}"
        lines.append(s)
    return "".join(line + "\n" for line in lines)


def read_yolo_file(path) -> list[BBox]:
    path = Path(path)
    out = []
    for i, line in enumerate(path.read_text().splitlines(), start=1):
        if line.strip():
            out.append(parse_yolo_line(line, f"{path}:{i}: "))
    return out


def write_yolo_file(path, boxes: Sequence[BBox]) -> None:
    Path(path).write_text(format_yolo(boxes))


def _find_image(directory: Path, stem: str) -> Path | None:
    for suf in IMAGE_SUFFIXES:
        p = directory / (stem + suf)
        if p.exists():
            return p
    return None


def load_annotations(directory, fmt: str = "yolo-txt") -> list[Sample]:
    """Read a directory of annotations into samples sorted by image id.

    ``yolo-txt``: one ``<id>.txt`` per image with normalized
    ``class cx cy w h`` lines, image alongside as ``<id>.png`` or ``.ppm``.
    ``coco-json``: a single ``*.json`` with pixel ``[x, y, w, h]`` boxes.
    """
    directory = Path(directory)
    if fmt == "yolo-txt":
        samples = []
        for txt in sorted(directory.glob("*.txt")):
            img = _find_image(directory, txt.stem)
            s = Sample(txt.stem, read_yolo_file(txt), path=img)
            if img is not None:
                with Image.open(img) as im:
                    s.width, s.height = im.size
            samples.append(s)
        return samples
    if fmt == "coco-json":
        files = sorted(directory.glob("*.json"))
        if len(files) != 1:
            raise ParseError(f"{directory}: expected exactly one COCO json, found {len(files)}")
        return coco_to_samples(json.loads(files[0].read_text()), directory, str(files[0]))
    raise ParseError(f"unknown annotation format {fmt!r}")


def coco_to_samples(doc: dict, directory: Path | None = None, where: str = "coco"
                    ) -> list[Sample]:
    images = {}
    for im in doc.get("images", []):
        images[im["id"]] = im
    boxes: dict = {k: [] for k in images}
    cat_index = {c["id"]: i for i, c in enumerate(sorted(doc.get("categories", []),
                                                        key=lambda c: c["id"]))}
    for n, ann in enumerate(doc.get("annotations", [])):
        im = images.get(ann.get("image_id"))
        if im is None:
            raise ParseError(f"{where}: annotation {n} refers to unknown image")
        try:
            x, y, w, h = (float(v) for v in ann["bbox"])
        except (KeyError, ValueError, TypeError):
            raise ParseError(f"{where}: annotation {n} has malformed bbox") from None
        W, H = im["width"], im["height"]
        if w <= 0 or h <= 0:
            raise ValidationError(f"{where}: annotation {n} has non-positive extent")
        b = BBox((x + w / 2) / W, (y + h / 2) / H, w / W, h / H,
                 class_id=cat_index.get(ann.get("category_id"), 0))
        boxes[ann["image_id"]].append(validate_box(b, f"{where}: annotation {n}: "))
    out = []
    for k, im in images.items():
        stem = Path(im["file_name"]).stem
        path = directory / im["file_name"] if directory is not None else None
        out.append(Sample(stem, boxes[k], path=path if path and path.exists() else None,
                          width=im["width"], height=im["height"]))
    return sorted(out, key=lambda s: s.image_id)


def samples_to_coco(samples: Sequence[Sample]) -> dict:
    images, anns = [], []
    for i, s in enumerate(sorted(samples, key=lambda s: s.image_id), start=1):
        images.append({"id": i, "file_name": f"{s.image_id}.png",
                       "width": s.width, "height": s.height})
        for b in s.boxes:
            p = b.to_px(s.width, s.height)
            anns.append({"id": len(anns) + 1, "image_id": i, "category_id": b.class_id,
                         "bbox": [p.cx - p.w / 2, p.cy - p.h / 2, p.w, p.h],
                         "area": p.w * p.h, "iscrowd": 0})
    return {"images": images, "annotations": anns,
            "categories": [{"id": 0, "name": "dual_positive"}]}


# ---------------------------------------------------------------------------
# tiling
# ---------------------------------------------------------------------------

def _clip_px(b: BBox, x0, y0, x1, y1) -> tuple[float, float, float, float] | None:
    bx0, by0, bx1, by1 = b.corners()
    cx0, cy0 = max(bx0, x0), max(by0, y0)
    cx1, cy1 = min(bx1, x1), min(by1, y1)
    if cx1 <= cx0 or cy1 <= cy0:
        return None
    if (cx1 - cx0) * (cy1 - cy0) < MIN_KEEP_FRACTION * b.w * b.h:
        return None
    return cx0, cy0, cx1, cy1


def tile_image(slide: Sample, tile: int = 1024) -> list[Sample]:
    """Cut a slide into a non-overlapping grid of ``tile``-sized patches.

    Right/bottom remainders are padded with white.  Boxes are clipped to each
    tile and kept only if at least a quarter of their area survives.
    """
    img = slide.load()
    H, W = img.shape[:2]
    boxes = slide.boxes_px()
    tiles = []
    for r in range(-(-H // tile)):
        for c in range(-(-W // tile)):
            y0, x0 = r * tile, c * tile
            patch = np.full((tile, tile, 3), 255, dtype=np.uint8)
            part = img[y0:y0 + tile, x0:x0 + tile]
            patch[:part.shape[0], :part.shape[1]] = part
            kept = []
            for b in boxes:
                cl = _clip_px(b, x0, y0, x0 + tile, y0 + tile)
                if cl is not None:
                    a0, b0, a1, b1 = cl
                    kept.append(BBox.from_corners((a0 - x0) / tile, (b0 - y0) / tile,
                                                  (a1 - x0) / tile, (b1 - y0) / tile,
                                                  class_id=b.class_id))
            tiles.append(Sample(f"{slide.image_id}_r{r:03d}_c{c:03d}", kept, image=patch))
    return tiles


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def _ids(samples) -> list[str]:
    ids = [s.image_id if isinstance(s, Sample) else str(s) for s in samples]
    return sorted(ids)


@dataclass
class SplitPlan:
    seed: int
    train: list[str] = field(default_factory=list)
    val: list[str] = field(default_factory=list)
    folds: list[list[str]] | None = None

    def iter_folds(self) -> Iterator[tuple[list[str], list[str]]]:
        if self.folds is None:
            yield self.train, self.val
            return
        for i, val in enumerate(self.folds):
            train = sorted(x for j, f in enumerate(self.folds) if j != i for x in f)
            yield train, sorted(val)

    def to_json(self) -> str:
        doc = {"seed": self.seed}
        if self.folds is None:
            doc.update(train=self.train, val=self.val)
        else:
            doc.update(k=len(self.folds), folds=self.folds)
        return json.dumps(doc, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> SplitPlan:
        d = json.loads(text)
        return cls(d["seed"], d.get("train", []), d.get("val", []), d.get("folds"))


def split_dataset(samples, ratio: tuple[int, int] = (8, 2), seed: int = 0) -> SplitPlan:
    """Seeded shuffle (of id-sorted samples) then prefix split; val size floored."""
    ids = _ids(samples)
    if len(ids) < 2:
        raise ProtocolError("need at least two samples to split")
    perm = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    n_val = len(ids) * ratio[1] // (ratio[0] + ratio[1])
    n_train = len(ids) - n_val
    return SplitPlan(seed, shuffled[:n_train], shuffled[n_train:])


def kfold_split(samples, k: int = 5, seed: int = 0) -> SplitPlan:
    """Seeded partition into k folds; the first ``n % k`` folds get one extra."""
    ids = _ids(samples)
    if k < 2 or len(ids) < k:
        raise ProtocolError(f"k-fold needs k >= 2 and at least k samples (k={k}, n={len(ids)})")
    perm = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    base, extra = divmod(len(ids), k)
    folds, start = [], 0
    for i in range(k):
        n = base + (1 if i < extra else 0)
        folds.append(shuffled[start:start + n])
        start += n
    return SplitPlan(seed, folds=folds)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def sample_rng(seed: int, image_id: str) -> np.random.Generator:
    """Per-sample stream derived from the master seed and the sample id."""
    return np.random.default_rng([seed, zlib.crc32(image_id.encode())])


def _resize(img: np.ndarray, w: int, h: int) -> np.ndarray:
    if img.shape[1] == w and img.shape[0] == h:
        return img
    return np.asarray(Image.fromarray(img).resize((w, h), Image.BILINEAR))


def hflip(s: Sample) -> Sample:
    img = s.load()
    boxes = [replace(b, cx=1.0 - b.cx) for b in s.boxes]
    new_id = s.image_id[:-6] if s.image_id.endswith("_hflip") else s.image_id + "_hflip"
    return Sample(new_id, boxes, image=img[:, ::-1].copy())


def mosaic(samples: Sequence[Sample], rng: np.random.Generator) -> Sample:
    """Four half-scale images meeting at a jittered center on a white canvas."""
    if len(samples) != 4:
        raise ProtocolError(f"mosaic needs 4 samples, got {len(samples)}")
    first = samples[0].load()
    H, W = first.shape[:2]
    canvas = np.full((H, W, 3), 255, dtype=np.uint8)
    xc = int(rng.uniform(0.25, 0.75) * W)
    yc = int(rng.uniform(0.25, 0.75) * H)
    hw, hh = W // 2, H // 2
    boxes = []
    for q, s in enumerate(samples):
        img = _resize(s.load(), hw, hh)
        # placement of the scaled image's top-left corner
        ox = xc - hw if q in (0, 2) else xc
        oy = yc - hh if q in (0, 1) else yc
        x0, y0 = max(ox, 0), max(oy, 0)
        x1, y1 = min(ox + hw, W), min(oy + hh, H)
        canvas[y0:y1, x0:x1] = img[y0 - oy:y1 - oy, x0 - ox:x1 - ox]
        for b in s.boxes:
            pb = BBox(ox + b.cx * hw, oy + b.cy * hh, b.w * hw, b.h * hh,
                      class_id=b.class_id, unit="px")
            cl = _clip_px(pb, x0, y0, x1, y1)
            if cl is not None:
                a0, c0, a1, c1 = cl
                boxes.append(BBox.from_corners(a0 / W, c0 / H, a1 / W, c1 / H,
                                               class_id=b.class_id).clipped())
    return Sample("mosaic_" + "_".join(s.image_id for s in samples), boxes, image=canvas)


def mixup(samples: Sequence[Sample], rng: np.random.Generator, alpha: float = 8.0) -> Sample:
    """Pixel blend with lambda ~ Beta(alpha, alpha); box lists are concatenated."""
    if len(samples) != 2:
        raise ProtocolError(f"mixup needs 2 samples, got {len(samples)}")
    a = samples[0].load()
    b = _resize(samples[1].load(), a.shape[1], a.shape[0])
    lam = rng.beta(alpha, alpha)
    img = np.clip(np.rint(lam * a.astype(np.float64) + (1 - lam) * b), 0, 255).astype(np.uint8)
    return Sample(f"mixup_{samples[0].image_id}_{samples[1].image_id}",
                  list(samples[0].boxes) + list(samples[1].boxes), image=img)


def augment(samples, op: str, seed: int = 0) -> Sample:
    """Apply ``hflip`` (1 sample), ``mosaic`` (4) or ``mixup`` (2)."""
    if isinstance(samples, Sample):
        samples = [samples]
    samples = list(samples)
    arity = {"hflip": 1, "mosaic": 4, "mixup": 2}
    if op not in arity:
        raise ProtocolError(f"unknown augmentation {op!r}")
    if len(samples) != arity[op]:
        raise ProtocolError(f"{op} needs {arity[op]} samples, got {len(samples)}")
    rng = sample_rng(seed, "|".join(s.image_id for s in samples))
    if op == "hflip":
        out = hflip(samples[0])
    elif op == "mosaic":
        out = mosaic(samples, rng)
    else:
        out = mixup(samples, rng)
    out.boxes = [validate_box(b) for b in out.boxes]
    return out
