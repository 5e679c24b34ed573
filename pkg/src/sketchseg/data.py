"""Canonical sketch model plus corpus parsing, normalization, labeling and synthesis.

A sketch is an ordered sequence of strokes (polylines) on a square canvas of
side ``resolution``; a labeled sketch additionally assigns one part index per
stroke.  The native on-disk format is NDJSON, one labeled sketch per line:

    {"category": str, "resolution": int,
     "strokes": [[[x, y], ...], ...],
     "labels": [int, ...] | null,
     "vocab": [str, ...]}

QuickDraw-style lines ({"drawing": [[xs...], [ys...]] per stroke}) are accepted
for conversion; they carry no labels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from . import ConfigError, DataError


class Point2D(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class Stroke:
    """One pen-down-to-pen-up polyline; the atomic labeling unit."""

    id: int
    points: tuple[Point2D, ...]

    def __post_init__(self):
        if len(self.points) < 1:
            raise DataError(f"stroke {self.id} has no points")
        for p in self.points:
            if not (math.isfinite(p.x) and math.isfinite(p.y)):
                raise DataError(f"stroke {self.id} has a non-finite point {p}")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=np.float64).reshape(-1, 2)


@dataclass(frozen=True)
class Sketch:
    strokes: tuple[Stroke, ...]
    category: str = ""
    resolution: int = 256

    def __post_init__(self):
        if len(self.strokes) < 1:
            raise DataError("sketch has no strokes")
        if self.resolution <= 0:
            raise DataError(f"resolution must be positive, got {self.resolution}")
        for i, s in enumerate(self.strokes):
            if s.id != i:
                raise DataError(f"stroke ids must be contiguous from 0, got {s.id} at index {i}")
            for p in s.points:
                if not (0 <= p.x < self.resolution and 0 <= p.y < self.resolution):
                    raise DataError(
                        f"stroke {s.id} point {p} outside canvas [0, {self.resolution})"
                    )


@dataclass(frozen=True)
class PartVocabulary:
    """Part names plus the order in which the decoder emits them."""

    names: tuple[str, ...]
    order: tuple[str, ...] = ()

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise DataError("part names must be unique")
        if not self.order:
            object.__setattr__(self, "order", tuple(self.names))
        if sorted(self.order) != sorted(self.names):
            raise DataError("decode order must be a permutation of the part names")

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class LabeledSketch:
    """Sketch with one part index per stroke; ``labels is None`` marks unlabeled data."""

    sketch: Sketch
    labels: tuple[int, ...] | None
    vocab: PartVocabulary = PartVocabulary(())

    def __post_init__(self):
        if self.labels is None:
            return
        if len(self.labels) != len(self.sketch.strokes):
            raise DataError(
                f"{len(self.labels)} labels for {len(self.sketch.strokes)} strokes"
            )
        for lab in self.labels:
            if not 0 <= lab < len(self.vocab.names):
                raise DataError(
                    f"label {lab} outside vocabulary of size {len(self.vocab.names)}"
                )

    @property
    def is_labeled(self) -> bool:
        return self.labels is not None

    def label_names(self) -> tuple[str, ...]:
        if self.labels is None:
            raise DataError("sketch is unlabeled")
        return tuple(self.vocab.names[i] for i in self.labels)

    def part_strokes(self, name: str) -> tuple[int, ...]:
        """Ids of the strokes carrying the given part label."""
        if self.labels is None:
            raise DataError("sketch is unlabeled")
        idx = self.vocab.index(name)
        return tuple(i for i, lab in enumerate(self.labels) if lab == idx)


# ---------------------------------------------------------------------------
# geometry helpers shared by normalization, augmentation and the invariance
# harness

def stroke_bbox(points: Iterable[Point2D]) -> tuple[float, float, float, float]:
    xs = [p.x for p in points]
    ys = [p.y for p in points]
    return min(xs), min(ys), max(xs), max(ys)


def sketch_bbox(sketch: Sketch) -> tuple[float, float, float, float]:
    boxes = [stroke_bbox(s.points) for s in sketch.strokes]
    return (
        min(b[0] for b in boxes),
        min(b[1] for b in boxes),
        max(b[2] for b in boxes),
        max(b[3] for b in boxes),
    )


def clamp_point(x: float, y: float, resolution: int) -> tuple[float, float]:
    """Pull a coordinate pair back into the half-open canvas [0, resolution)."""
    hi = float(np.nextafter(resolution, 0.0))
    return min(max(x, 0.0), hi), min(max(y, 0.0), hi)


def clamp_points(points: Iterable[Point2D], resolution: int) -> tuple[Point2D, ...]:
    return tuple(Point2D(*clamp_point(p.x, p.y, resolution)) for p in points)


def map_sketch(sketch: Sketch, fn: Callable[[float, float], tuple[float, float]],
               clamp: bool = False) -> Sketch:
    """Apply a point transform to every stroke, keeping ids and metadata.

    Sketches validate their points at construction, so a transform that can
    push points off the canvas must pass ``clamp=True``.
    """
    if clamp:
        res = sketch.resolution
        raw = fn
        fn = lambda x, y: clamp_point(*raw(x, y), res)
    strokes = tuple(
        Stroke(s.id, tuple(Point2D(*fn(p.x, p.y)) for p in s.points))
        for s in sketch.strokes
    )
    return replace(sketch, strokes=strokes)


def clamp_to_canvas(sketch: Sketch) -> Sketch:
    return map_sketch(sketch, lambda x, y: (x, y), clamp=True)


def rotate_sketch(sketch: Sketch, degrees: float, center: tuple[float, float] | None = None) -> Sketch:
    """Rotate every point about ``center`` (canvas center by default), then clamp."""
    if degrees == 0.0:
        # keep the zero rotation bit-exact; cx + (x - cx) rounds in general
        return sketch
    if center is None:
        c = sketch.resolution / 2.0
        center = (c, c)
    cx, cy = center
    a = math.radians(degrees)
    ca, sa = math.cos(a), math.sin(a)

    def rot(x, y):
        dx, dy = x - cx, y - cy
        return cx + ca * dx - sa * dy, cy + sa * dx + ca * dy

    return map_sketch(sketch, rot, clamp=True)


# ---------------------------------------------------------------------------
# parsing / serialization

NATIVE_FORMAT = "native-json"
QUICKDRAW_FORMAT = "ndjson-quickdraw"


def _sketch_from_native(obj: dict, lineno: int) -> LabeledSketch:
    try:
        strokes = tuple(
            Stroke(i, tuple(Point2D(float(x), float(y)) for x, y in pts))
            for i, pts in enumerate(obj["strokes"])
        )
        sketch = Sketch(
            strokes=strokes,
            category=str(obj.get("category", "")),
            resolution=int(obj.get("resolution", 256)),
        )
        vocab = PartVocabulary(tuple(obj.get("vocab", ())))
        labels = obj.get("labels")
        labels = None if labels is None else tuple(int(v) for v in labels)
        return LabeledSketch(sketch, labels, vocab)
    except DataError as exc:
        raise DataError(f"line {lineno}: {exc}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"line {lineno}: malformed record ({exc})") from None


def _sketch_from_quickdraw(obj: dict, lineno: int) -> LabeledSketch:
    try:
        raw = obj["drawing"]
        pts_per_stroke = []
        for xs, ys in raw:
            if len(xs) != len(ys):
                raise DataError("x/y length mismatch")
            pts_per_stroke.append([(float(x), float(y)) for x, y in zip(xs, ys)])
        if not pts_per_stroke:
            raise DataError("drawing has no strokes")
        # QuickDraw coordinates may sit anywhere; shift to non-negative and
        # pick a canvas that contains them, so the Sketch invariants hold
        # before any separate normalization pass.
        allpts = [p for pts in pts_per_stroke for p in pts]
        if not allpts:
            raise DataError("drawing has an empty stroke")
        minx = min(p[0] for p in allpts)
        miny = min(p[1] for p in allpts)
        shift_x = -minx if minx < 0 else 0.0
        shift_y = -miny if miny < 0 else 0.0
        maxc = max(max(p[0] + shift_x, p[1] + shift_y) for p in allpts)
        resolution = max(256, int(math.floor(maxc)) + 1)
        strokes = tuple(
            Stroke(i, tuple(Point2D(x + shift_x, y + shift_y) for x, y in pts))
            for i, pts in enumerate(pts_per_stroke)
        )
        sketch = Sketch(strokes=strokes, category=str(obj.get("word", "")), resolution=resolution)
        return LabeledSketch(sketch, None, PartVocabulary(()))
    except DataError as exc:
        raise DataError(f"line {lineno}: {exc}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"line {lineno}: malformed record ({exc})") from None


def parse_corpus(data: bytes, format: str = NATIVE_FORMAT) -> list[LabeledSketch]:
    """Parse an NDJSON corpus; raises :class:`DataError` naming the offending line."""
    if format not in (NATIVE_FORMAT, QUICKDRAW_FORMAT):
        raise ConfigError(f"unknown corpus format {format!r}")
    out: list[LabeledSketch] = []
    for lineno, line in enumerate(data.decode("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"line {lineno}: invalid JSON ({exc.msg})") from None
        if format == NATIVE_FORMAT:
            out.append(_sketch_from_native(obj, lineno))
        else:
            out.append(_sketch_from_quickdraw(obj, lineno))
    return out


def serialize_corpus(corpus: Sequence[LabeledSketch]) -> bytes:
    lines = []
    for ls in corpus:
        obj = {
            "category": ls.sketch.category,
            "resolution": ls.sketch.resolution,
            "strokes": [[[p.x, p.y] for p in s.points] for s in ls.sketch.strokes],
            "labels": list(ls.labels) if ls.labels is not None else None,
            "vocab": list(ls.vocab.names),
        }
        lines.append(json.dumps(obj, separators=(",", ":")))
    return ("\n".join(lines) + "\n" if lines else "").encode("utf-8")


# ---------------------------------------------------------------------------
# normalization

NORMALIZE_MARGIN = 4


def normalize_sketch(sketch: Sketch, resolution: int, margin: int = NORMALIZE_MARGIN) -> Sketch:
    """Uniformly scale + translate so the bbox fits [margin, resolution-margin).

    The longer bbox axis spans the full target range; the shorter axis is
    centered.  Aspect ratio is preserved.  Idempotent to within float
    round-off.
    """
    minx, miny, maxx, maxy = sketch_bbox(sketch)
    w, h = maxx - minx, maxy - miny
    span = resolution - 2 * margin
    if span <= 0:
        raise ConfigError(f"margin {margin} too large for resolution {resolution}")
    longest = max(w, h)
    if longest <= 0:
        raise DataError("degenerate sketch: all points coincident")
    scale = span / longest
    offx = margin + (span - w * scale) / 2.0
    offy = margin + (span - h * scale) / 2.0

    mapped = map_sketch(
        sketch, lambda x, y: (offx + (x - minx) * scale, offy + (y - miny) * scale)
    )
    return replace(mapped, resolution=resolution)


def normalize_corpus(corpus: Sequence[LabeledSketch], resolution: int,
                     margin: int = NORMALIZE_MARGIN) -> list[LabeledSketch]:
    return [
        replace(ls, sketch=normalize_sketch(ls.sketch, resolution, margin)) for ls in corpus
    ]


# ---------------------------------------------------------------------------
# labels: merging and decode order

def merge_parts(
    ls: LabeledSketch, mapping: Mapping[str, str], vocab: PartVocabulary
) -> tuple[LabeledSketch, PartVocabulary]:
    """Remap part labels through ``mapping``; geometry is untouched.

    ``mapping`` must cover every name in ``vocab``; the merged vocabulary keeps
    first-appearance order of the merged names.
    """
    if not ls.is_labeled:
        raise DataError("cannot merge parts of an unlabeled sketch")
    for name in vocab.names:
        if name not in mapping:
            raise DataError(f"part name {name!r} missing from merge map")
    merged_names: list[str] = []
    for name in vocab.names:
        tgt = mapping[name]
        if tgt not in merged_names:
            merged_names.append(tgt)
    new_vocab = PartVocabulary(tuple(merged_names))
    new_labels = tuple(
        merged_names.index(mapping[vocab.names[lab]]) for lab in ls.labels
    )
    return LabeledSketch(ls.sketch, new_labels, new_vocab), new_vocab


def part_stroke_counts(corpus: Sequence[LabeledSketch], vocab: PartVocabulary) -> dict[str, int]:
    counts = {name: 0 for name in vocab.names}
    for ls in corpus:
        if not ls.is_labeled:
            continue
        for lab in ls.labels:
            counts[vocab.names[lab]] += 1
    return counts


def part_decode_order(
    corpus: Sequence[LabeledSketch],
    vocab: PartVocabulary,
    mode: str = "freq-desc",
    seed: int | None = None,
) -> PartVocabulary:
    """Fix the decode order over parts: by stroke frequency or seeded-random.

    Ties break lexicographically so the order is reproducible.
    """
    if not corpus:
        raise DataError("empty corpus")
    counts = part_stroke_counts(corpus, vocab)
    if mode == "freq-desc":
        order = sorted(vocab.names, key=lambda n: (-counts[n], n))
    elif mode == "freq-asc":
        order = sorted(vocab.names, key=lambda n: (counts[n], n))
    elif mode == "random":
        rng = np.random.default_rng(seed)
        order = [vocab.names[i] for i in rng.permutation(len(vocab.names))]
    else:
        raise ConfigError(f"unknown decode-order mode {mode!r}")
    return PartVocabulary(vocab.names, tuple(order))


# ---------------------------------------------------------------------------
# synthetic corpus

@dataclass(frozen=True)
class SynthConfig:
    template: str = "face"
    count: int = 100
    resolution: int = 64
    presence: Mapping[str, float] = field(default_factory=dict)
    center_jitter: float = 0.03     # fraction of resolution
    scale_jitter: float = 0.12      # radii drawn from U[1-s, 1+s]
    point_noise: float = 0.005      # per-point Gaussian sigma, fraction of resolution
    seed: int = 0

    def __post_init__(self):
        if self.count < 0:
            raise ConfigError("count must be >= 0")
        if self.resolution < 8:
            raise ConfigError("resolution must be >= 8")
        for name, p in self.presence.items():
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"presence probability for {name!r} outside [0, 1]")


def _circle(cx: float, cy: float, r: float, n: int, phase: float) -> list[tuple[float, float]]:
    ts = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False) + phase
    pts = [(cx + r * math.cos(t), cy + r * math.sin(t)) for t in ts]
    pts.append(pts[0])
    return pts


def _polyline(vertices: list[tuple[float, float]], per_edge: int) -> list[tuple[float, float]]:
    pts: list[tuple[float, float]] = []
    for (x0, y0), (x1, y1) in zip(vertices, vertices[1:]):
        for i in range(per_edge):
            t = i / per_edge
            pts.append((x0 + t * (x1 - x0), y0 + t * (y1 - y0)))
    pts.append(vertices[-1])
    return pts


def _face_instance(cfg: SynthConfig, rng: np.random.Generator) -> list[tuple[str, list]]:
    res = cfg.resolution
    cj, sj = cfg.center_jitter * res, cfg.scale_jitter

    def jit():
        return rng.uniform(-cj, cj)

    def scl():
        return rng.uniform(1.0 - sj, 1.0 + sj)

    parts: list[tuple[str, list]] = []
    parts.append(
        ("head", _circle(0.5 * res + jit(), 0.5 * res + jit(), 0.36 * res * scl(), 40, rng.uniform(0, 2 * math.pi)))
    )
    presence = dict(cfg.presence)
    if rng.random() < presence.get("eye", 0.9):
        for side in (-1.0, 1.0):
            parts.append(
                ("eye", _circle((0.5 + 0.14 * side) * res + jit(), 0.40 * res + jit(),
                                0.055 * res * scl(), 12, rng.uniform(0, 2 * math.pi)))
            )
    if rng.random() < presence.get("mouth", 0.9):
        parts.append(
            ("mouth", _circle(0.5 * res + jit(), 0.66 * res + jit(),
                              0.06 * res * scl(), 14, rng.uniform(0, 2 * math.pi)))
        )
    return parts


def _rocket_instance(cfg: SynthConfig, rng: np.random.Generator) -> list[tuple[str, list]]:
    res = cfg.resolution
    cj, sj = cfg.center_jitter * res, cfg.scale_jitter

    def jit():
        return rng.uniform(-cj, cj)

    s = rng.uniform(1.0 - sj, 1.0 + sj)
    ox, oy = jit(), jit()

    def at(x, y):
        return (0.5 * res + (x - 0.5) * res * s + ox, 0.5 * res + (y - 0.5) * res * s + oy)

    parts: list[tuple[str, list]] = []
    body = [at(0.5, 0.12), at(0.38, 0.30), at(0.38, 0.78), at(0.62, 0.78), at(0.62, 0.30), at(0.5, 0.12)]
    parts.append(("body", _polyline(body, 7)))
    presence = dict(cfg.presence)
    if rng.random() < presence.get("fin", 0.9):
        left = [at(0.38, 0.60), at(0.26, 0.82), at(0.38, 0.82), at(0.38, 0.60)]
        right = [at(0.62, 0.60), at(0.74, 0.82), at(0.62, 0.82), at(0.62, 0.60)]
        parts.append(("fin", _polyline(left, 5)))
        parts.append(("fin", _polyline(right, 5)))
    if rng.random() < presence.get("window", 0.85):
        wx, wy = at(0.5, 0.40)
        parts.append(("window", _circle(wx, wy, 0.06 * res * rng.uniform(1 - sj, 1 + sj), 12,
                                        rng.uniform(0, 2 * math.pi))))
    return parts


_TEMPLATES = {
    "face": (_face_instance, ("head", "eye", "mouth")),
    "rocket": (_rocket_instance, ("body", "fin", "window")),
}


def synth_corpus(cfg: SynthConfig) -> list[LabeledSketch]:
    """Generate a labeled corpus from a named template; bit-reproducible per seed."""
    if cfg.template not in _TEMPLATES:
        raise ConfigError(f"unknown template {cfg.template!r}")
    build, names = _TEMPLATES[cfg.template]
    vocab = PartVocabulary(tuple(names))
    res = cfg.resolution
    hi = float(np.nextafter(res, 0.0))
    out: list[LabeledSketch] = []
    for i in range(cfg.count):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, i)))
        parts = build(cfg, rng)
        # shuffle stroke order so stroke position in the sequence carries no
        # label information
        perm = rng.permutation(len(parts))
        noise = cfg.point_noise * res
        strokes = []
        labels = []
        for new_id, j in enumerate(perm):
            name, pts = parts[j]
            arr = np.asarray(pts, dtype=np.float64)
            if noise > 0:
                arr = arr + rng.normal(0.0, noise, size=arr.shape)
            arr = np.clip(arr, 0.0, hi)
            strokes.append(Stroke(new_id, tuple(Point2D(float(x), float(y)) for x, y in arr)))
            labels.append(vocab.index(name))
        sketch = Sketch(tuple(strokes), category=cfg.template, resolution=res)
        out.append(LabeledSketch(sketch, tuple(labels), vocab))
    return out
