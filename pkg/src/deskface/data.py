"""Annotation parsing, synthetic data, augmentation, corpus statistics.

Two text formats are understood.  Box annotations: an image path line, a
face-count line, then one ``x y w h`` line per face (extra trailing fields
are ignored).  Ellipse annotations: an image path line, a count line, then
one ``major minor angle cx cy score`` line per face, angles in radians.

The synthetic generator draws grayscale scenes whose "faces" are bright
ellipses wearing a dark hair cap and a neck bar below — the surrounding
context that a context-fusing detector is supposed to exploit — plus
context-free clutter shapes as distractors.

Augmentations take an explicit ``numpy.random.Generator``; there is no
hidden global randomness, so a seeded chain is bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import ContractError, ParseError
from .geometry import Box, jaccard

SIZE_BUCKET_EDGES = (10.0, 40.0, 92.0, 192.0)
SIZE_BUCKET_LABELS = ("<10", "10-40", "40-92", "92-192", ">=192")


class AnnotatedImage:
    """An image raster with its ground-truth boxes.

    ``image`` is (C,H,W) float64 in [0,1] with C of 1 or 3; it may be None
    for annotation-only records (statistics paths), in which case the box
    placement cannot be validated against the raster.
    """

    __slots__ = ("image", "boxes", "source_id")

    def __init__(self, image: np.ndarray | None, boxes: Sequence[Box],
                 source_id: str = ""):
        if image is not None:
            image = np.asarray(image, dtype=np.float64)
            if image.ndim != 3 or image.shape[0] not in (1, 3):
                raise ContractError(
                    f"image must be (C,H,W) with C in {{1,3}}, got {image.shape}"
                )
            if image.min() < 0.0 or image.max() > 1.0:
                raise ContractError("image values must lie in [0, 1]")
            h, w = image.shape[1], image.shape[2]
            for b in boxes:
                ix = min(b.x2, w) - max(b.x1, 0.0)
                iy = min(b.y2, h) - max(b.y1, 0.0)
                if ix <= 0.0 or iy <= 0.0:
                    raise ContractError(
                        f"box {b.as_tuple()} does not intersect the image"
                    )
        self.image = image
        self.boxes = list(boxes)
        self.source_id = source_id

    @property
    def dims(self) -> tuple[int, int]:
        """(H, W) of the raster."""
        if self.image is None:
            raise ContractError("record has no raster")
        return self.image.shape[1], self.image.shape[2]


@dataclass(frozen=True)
class EllipseAnnotation:
    """Rotated ellipse: semi-axes, major-axis angle from x (radians)."""

    major_radius: float
    minor_radius: float
    angle: float
    cx: float
    cy: float
    score: float = 1.0

    def __post_init__(self):
        if not (self.major_radius >= self.minor_radius > 0.0):
            raise ContractError(
                f"ellipse radii must satisfy major >= minor > 0, got "
                f"({self.major_radius}, {self.minor_radius})"
            )


def ellipse_to_box(e: EllipseAnnotation) -> Box:
    """Tight axis-aligned bounds of a rotated ellipse."""
    a, b, th = e.major_radius, e.minor_radius, e.angle
    half_w = math.sqrt(a * a * math.cos(th) ** 2 + b * b * math.sin(th) ** 2)
    half_h = math.sqrt(a * a * math.sin(th) ** 2 + b * b * math.cos(th) ** 2)
    return Box(e.cx - half_w, e.cy - half_h, e.cx + half_w, e.cy + half_h)


# ---------------------------------------------------------------------------
# image IO
# ---------------------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """Read a PNG/PGM image into (C,H,W) float64 scaled to [0,1]."""
    with Image.open(path) as im:
        if im.mode in ("L", "I;16", "I"):
            arr = np.asarray(im.convert("L"), dtype=np.float64)[None, :, :]
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64).transpose(2, 0, 1)
    return arr / 255.0


def save_image(path, image: np.ndarray) -> None:
    """Write a (C,H,W) float [0,1] array as 8-bit PNG/PGM."""
    arr = np.clip(np.asarray(image) * 255.0, 0.0, 255.0).round().astype(np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    else:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def read_image_dims(path) -> tuple[int, int]:
    """(H, W) from the image header without decoding pixels."""
    with Image.open(path) as im:
        return im.height, im.width


# ---------------------------------------------------------------------------
# annotation formats
# ---------------------------------------------------------------------------


def parse_wider(text: str, image_root=None) -> Iterator[AnnotatedImage]:
    """Stream box-annotated records; load rasters when a root is given.

    A missing image file raises ``FileNotFoundError`` naming the path;
    malformed lines raise :class:`ParseError` with their line number.
    """
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        rel_path = lines[i].strip()
        if i + 1 >= len(lines):
            raise ParseError(f"missing face count after {rel_path!r}", line=i + 1)
        try:
            count = int(lines[i + 1].strip())
        except ValueError:
            raise ParseError(
                f"expected face count, got {lines[i + 1]!r}", line=i + 2
            ) from None
        if count < 0:
            raise ParseError(f"negative face count {count}", line=i + 2)
        boxes = []
        for j in range(count):
            ln = i + 2 + j
            if ln >= len(lines):
                raise ParseError("annotation ends mid-record", line=len(lines))
            fields = lines[ln].split()
            if len(fields) < 4:
                raise ParseError(
                    f"expected at least 4 fields, got {len(fields)}", line=ln + 1
                )
            try:
                x, y, w, h = (float(v) for v in fields[:4])
            except ValueError:
                raise ParseError(f"non-numeric box in {lines[ln]!r}", line=ln + 1) from None
            try:
                boxes.append(Box(x, y, x + w, y + h))
            except ContractError as exc:
                raise ParseError(str(exc), line=ln + 1) from None
        i += 2 + count
        image = None
        if image_root is not None:
            full = Path(image_root) / rel_path
            if not full.exists():
                raise FileNotFoundError(f"image file not found: {full}")
            image = load_image(full)
        yield AnnotatedImage(image, boxes, source_id=rel_path)


def serialize_wider(records: Iterable[AnnotatedImage]) -> str:
    """Inverse of :func:`parse_wider` over box lists (x y w h per face)."""
    chunks = []
    for rec in records:
        chunks.append(rec.source_id)
        chunks.append(str(len(rec.boxes)))
        for b in rec.boxes:
            chunks.append(f"{b.x1:.6f} {b.y1:.6f} {b.w:.6f} {b.h:.6f}")
    return "\n".join(chunks) + ("\n" if chunks else "")


def parse_fddb(text: str) -> Iterator[tuple[str, list[EllipseAnnotation]]]:
    """Stream (image id, ellipse list) records from ellipse annotations."""
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        image_id = lines[i].strip()
        if i + 1 >= len(lines):
            raise ParseError(f"missing face count after {image_id!r}", line=i + 1)
        try:
            count = int(lines[i + 1].strip())
        except ValueError:
            raise ParseError(
                f"expected face count, got {lines[i + 1]!r}", line=i + 2
            ) from None
        ellipses = []
        for j in range(count):
            ln = i + 2 + j
            if ln >= len(lines):
                raise ParseError("annotation ends mid-record", line=len(lines))
            fields = lines[ln].split()
            if len(fields) != 6:
                raise ParseError(
                    f"expected 6 fields (major minor angle cx cy score), "
                    f"got {len(fields)}",
                    line=ln + 1,
                )
            try:
                major, minor, angle, cx, cy, score = (float(v) for v in fields)
            except ValueError:
                raise ParseError(f"non-numeric field in {lines[ln]!r}", line=ln + 1) from None
            try:
                ellipses.append(EllipseAnnotation(major, minor, angle, cx, cy, score))
            except ContractError as exc:
                raise ParseError(str(exc), line=ln + 1) from None
        i += 2 + count
        yield image_id, ellipses


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


def _fill_ellipse(img: np.ndarray, cx, cy, rx, ry, angle, value, y_above=None):
    """Paint a rotated ellipse; y_above restricts to rows above that line."""
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    xs = (xx + 0.5) - cx
    ys = (yy + 0.5) - cy
    ct, st = math.cos(angle), math.sin(angle)
    u = xs * ct + ys * st
    v = -xs * st + ys * ct
    mask = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    if y_above is not None:
        mask &= (yy + 0.5) < y_above
    img[mask] = value


def _fill_rect(img: np.ndarray, x1, y1, x2, y2, value):
    h, w = img.shape
    xa, xb = int(max(0, round(x1))), int(min(w, round(x2)))
    ya, yb = int(max(0, round(y1))), int(min(h, round(y2)))
    if xb > xa and yb > ya:
        img[ya:yb, xa:xb] = value


def _render_face(img, rng, cx, cy, rx, ry, angle):
    # neck bar below the chin, hair cap above: the context cues
    nw = 0.55 * rx
    _fill_rect(img, cx - nw, cy + 0.55 * ry, cx + nw, cy + 1.25 * ry,
               rng.uniform(0.5, 0.6))
    _fill_ellipse(img, cx, cy - 0.18 * ry, 1.25 * rx, 1.05 * ry, angle,
                  rng.uniform(0.08, 0.16), y_above=cy - 0.05 * ry)
    # dark rim, then the bright fill: a crisp boundary on any background
    _fill_ellipse(img, cx, cy, rx + 1.0, ry + 1.0, angle, rng.uniform(0.02, 0.08))
    _fill_ellipse(img, cx, cy, rx, ry, angle, rng.uniform(0.76, 0.84))


def _face_geometry(rng, size: float):
    """Radii/angle whose bounding box has max dimension exactly ``size``."""
    aspect = rng.uniform(0.95, 1.4)  # faces run taller than wide
    angle = rng.uniform(-0.25, 0.25)
    rx0, ry0 = 1.0, aspect
    hw = math.sqrt(rx0**2 * math.cos(angle) ** 2 + ry0**2 * math.sin(angle) ** 2)
    hh = math.sqrt(rx0**2 * math.sin(angle) ** 2 + ry0**2 * math.cos(angle) ** 2)
    f = size / (2.0 * max(hw, hh))
    return rx0 * f, ry0 * f, angle


def synth_generate(
    count: int,
    image_size: int = 128,
    faces_range: tuple[int, int] = (0, 3),
    size_range: tuple[float, float] = (8.0, 48.0),
    seed: int = 0,
) -> Iterator[AnnotatedImage]:
    """Yield ``count`` deterministic synthetic scenes with ground truth.

    Every ground-truth box has max dimension inside ``size_range``; images
    with zero faces are legal negatives when the range allows them.
    """
    if size_range[1] > image_size:
        raise ContractError("face size range exceeds the image")
    for idx in range(count):
        rng = np.random.default_rng([seed, idx])
        base = rng.uniform(0.25, 0.45)
        coarse = rng.uniform(-0.07, 0.07, size=(8, 8))
        img = base + np.kron(coarse, np.ones((image_size // 8, image_size // 8)))
        img += rng.uniform(-0.02, 0.02, size=(image_size, image_size))

        for _ in range(int(rng.integers(3, 8))):
            kind = rng.integers(0, 3)
            val = rng.uniform(0.15, 0.7)
            cx, cy = rng.uniform(0, image_size, size=2)
            if kind == 0:
                w, h = rng.uniform(6, 40, size=2)
                _fill_rect(img, cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, val)
            elif kind == 1:
                rx, ry = rng.uniform(3, 20, size=2)
                _fill_ellipse(img, cx, cy, rx, ry, rng.uniform(0, math.pi), val)
            else:
                w = rng.uniform(10, 60)
                _fill_rect(img, cx - w / 2, cy - 2, cx + w / 2, cy + 2, val)

        boxes: list[Box] = []
        n_faces = int(rng.integers(faces_range[0], faces_range[1] + 1))
        for _ in range(n_faces):
            size = rng.uniform(*size_range)
            rx, ry, angle = _face_geometry(rng, size)
            ell0 = EllipseAnnotation(max(rx, ry), min(rx, ry),
                                     angle if rx >= ry else angle + math.pi / 2,
                                     0.0, 0.0)
            proto = ellipse_to_box(ell0)
            margin_x = proto.w / 2 + 2.0
            margin_top = proto.h / 2 + 0.12 * proto.h + 2.0   # room for hair
            margin_bot = proto.h / 2 + 0.30 * proto.h + 2.0   # room for neck
            placed = None
            for _try in range(25):
                cx = rng.uniform(margin_x, image_size - margin_x)
                cy = rng.uniform(margin_top, image_size - margin_bot)
                cand = Box(cx + proto.x1, cy + proto.y1, cx + proto.x2, cy + proto.y2)
                if all(jaccard(cand, b) <= 0.15 for b in boxes):
                    placed = (cx, cy, cand)
                    break
            if placed is None:
                continue
            cx, cy, cand = placed
            _render_face(img, rng, cx, cy, rx, ry, angle)
            boxes.append(cand)

        np.clip(img, 0.0, 1.0, out=img)
        yield AnnotatedImage(img[None, :, :], boxes, source_id=f"synth-{idx:05d}")


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

CROP_SCALES = (0.3, 0.5, 0.7, 0.9, 1.0)
CROP_MIN_OVERLAPS = (0.5, 0.7, 0.9)


def random_crop_sample(img: AnnotatedImage, rng: np.random.Generator,
                       max_tries: int = 50) -> AnnotatedImage:
    """Crop a random patch, keeping enough of at least one face.

    The linear crop scale comes from {0.3, 0.5, 0.7, 0.9, 1.0}; when faces
    exist, a placement must leave some face with at least a sampled
    fraction {0.5, 0.7, 0.9} of itself inside the crop (measured as IoU of
    the face with its cropped part).  After ``max_tries`` failures the
    image passes through unchanged.  Surviving boxes are those whose
    centers fall in the crop; they are translated and clipped.
    """
    h, w = img.dims
    scale = float(rng.choice(CROP_SCALES))
    if scale == 1.0:
        return img
    ch = max(1, int(round(h * scale)))
    cw = max(1, int(round(w * scale)))
    constraint = float(rng.choice(CROP_MIN_OVERLAPS)) if img.boxes else None

    for _ in range(max_tries):
        x0 = int(rng.integers(0, w - cw + 1))
        y0 = int(rng.integers(0, h - ch + 1))
        crop = Box(x0, y0, x0 + cw, y0 + ch)
        if constraint is not None:
            ok = False
            for b in img.boxes:
                ix1, iy1 = max(b.x1, crop.x1), max(b.y1, crop.y1)
                ix2, iy2 = min(b.x2, crop.x2), min(b.y2, crop.y2)
                if ix2 > ix1 and iy2 > iy1 and \
                        jaccard(b, Box(ix1, iy1, ix2, iy2)) >= constraint:
                    ok = True
                    break
            if not ok:
                continue
        kept = []
        for b in img.boxes:
            if x0 <= b.cx < x0 + cw and y0 <= b.cy < y0 + ch:
                kept.append(Box(
                    max(b.x1 - x0, 0.0), max(b.y1 - y0, 0.0),
                    min(b.x2 - x0, float(cw)), min(b.y2 - y0, float(ch)),
                ))
        patch = img.image[:, y0:y0 + ch, x0:x0 + cw].copy()
        return AnnotatedImage(patch, kept, img.source_id)
    return img


def horizontal_flip(img: AnnotatedImage, p: float,
                    rng: np.random.Generator) -> AnnotatedImage:
    """Mirror columns and box x-coordinates with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ContractError("flip probability must lie in [0, 1]")
    if rng.random() >= p:
        return img
    _, w = img.dims
    flipped = img.image[:, :, ::-1].copy()
    boxes = [Box(w - b.x2, b.y1, w - b.x1, b.y2) for b in img.boxes]
    return AnnotatedImage(flipped, boxes, img.source_id)


def photometric_distort(img: AnnotatedImage, rng: np.random.Generator,
                        brightness: float = 0.125,
                        contrast: tuple[float, float] = (0.75, 1.25)) -> AnnotatedImage:
    """Brightness shift then contrast scale, clamped back into [0,1]."""
    shift = rng.uniform(-brightness, brightness)
    gain = rng.uniform(contrast[0], contrast[1])
    out = np.clip((img.image + shift) * gain, 0.0, 1.0)
    return AnnotatedImage(out, img.boxes, img.source_id)


def _bilinear_resize(chw: np.ndarray, th: int, tw: int) -> np.ndarray:
    c, h, w = chw.shape
    if (h, w) == (th, tw):
        return chw.copy()
    ys = (np.arange(th) + 0.5) * (h / th) - 0.5
    xs = (np.arange(tw) + 0.5) * (w / tw) - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    tl = chw[:, y0[:, None], x0[None, :]]
    tr = chw[:, y0[:, None], x1[None, :]]
    bl = chw[:, y1[:, None], x0[None, :]]
    br = chw[:, y1[:, None], x1[None, :]]
    top = tl * (1 - wx) + tr * wx
    bot = bl * (1 - wx) + br * wx
    return top * (1 - wy) + bot * wy


def resize_with_boxes(img: AnnotatedImage, target) -> AnnotatedImage:
    """Bilinear resize; boxes scale per axis (aspect distortion allowed)."""
    if isinstance(target, int):
        th = tw = target
    else:
        th, tw = target
    if th < 1 or tw < 1:
        raise ContractError("resize target must be positive")
    h, w = img.dims
    out = _bilinear_resize(img.image, th, tw)
    sx, sy = tw / w, th / h
    boxes = [Box(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy) for b in img.boxes]
    return AnnotatedImage(np.clip(out, 0.0, 1.0), boxes, img.source_id)


def augment(img: AnnotatedImage, rng: np.random.Generator,
            input_size: int) -> AnnotatedImage:
    """The training chain: crop, flip(0.5), photometric, resize."""
    out = random_crop_sample(img, rng)
    out = horizontal_flip(out, 0.5, rng)
    out = photometric_distort(out, rng)
    return resize_with_boxes(out, input_size)


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SizeHistogram:
    """Counts and fractions of face sizes over the fixed pixel buckets."""

    counts: tuple[int, ...]
    fractions: tuple[float, ...]

    @property
    def total(self) -> int:
        return sum(self.counts)

    @property
    def labels(self) -> tuple[str, ...]:
        return SIZE_BUCKET_LABELS


def face_size(box: Box) -> float:
    """A face's size is the larger of its box width and height."""
    return max(box.w, box.h)


def _bucket_index(size: float) -> int:
    for i, edge in enumerate(SIZE_BUCKET_EDGES):
        if size < edge:
            return i
    return len(SIZE_BUCKET_EDGES)


def size_histogram(boxes: Iterable[Box]) -> SizeHistogram:
    counts = [0] * (len(SIZE_BUCKET_EDGES) + 1)
    for b in boxes:
        counts[_bucket_index(face_size(b))] += 1
    total = sum(counts)
    if total == 0:
        fractions = tuple(0.0 for _ in counts)
    else:
        fractions = tuple(c / total for c in counts)
    return SizeHistogram(counts=tuple(counts), fractions=fractions)


def top_size_table(
    records: Iterable[tuple[Sequence[Box], tuple[int, int]]],
    top: int = 3,
) -> list[tuple[str, tuple[int, int], float]]:
    """Most frequent (H, W) image dimensions per face-size bucket.

    ``records`` pairs each image's boxes with its (H, W).  Rows come out
    bucket by bucket, sorted by percentage descending with ties broken by
    dimension; percentages are of the bucket's face count.
    """
    per_bucket: list[dict[tuple[int, int], int]] = [
        {} for _ in range(len(SIZE_BUCKET_EDGES) + 1)
    ]
    for boxes, dims in records:
        dims = (int(dims[0]), int(dims[1]))
        for b in boxes:
            bucket = per_bucket[_bucket_index(face_size(b))]
            bucket[dims] = bucket.get(dims, 0) + 1
    rows: list[tuple[str, tuple[int, int], float]] = []
    for label, bucket in zip(SIZE_BUCKET_LABELS, per_bucket):
        total = sum(bucket.values())
        if total == 0:
            continue
        ranked = sorted(bucket.items(), key=lambda kv: (-kv[1], kv[0]))
        for dims, count in ranked[:top]:
            rows.append((label, dims, 100.0 * count / total))
    return rows
