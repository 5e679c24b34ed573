"""Stroke- and sketch-level augmentation, plus semantic-aware copy-paste.

Copy-paste targets class imbalance: a part that appears in few sketches is
transplanted from donor sketches into sketches that lack it, scaled and
jittered, under a containment rule (the pasted part's bbox must land inside a
named anchor part's bbox, e.g. eyes inside the head).  Pasting continues
until the part's corpus-wide occurrence reaches the configured target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import DataError
from .data import (
    LabeledSketch,
    PartVocabulary,
    Point2D,
    Stroke,
    clamp_points,
    stroke_bbox,
)


@dataclass(frozen=True)
class AugmentConfig:
    stroke_rotation: float = 10.0       # degrees, +/- range
    stroke_scale: tuple = (0.9, 1.1)
    stroke_jitter: float = 3.0          # px, +/- range per axis
    stroke_prob: float = 0.5            # chance each stroke is transformed
    sketch_rotation: float = 15.0
    sketch_scale: tuple = (0.85, 1.15)
    drop_prob: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stroke_scale", tuple(self.stroke_scale))
        object.__setattr__(self, "sketch_scale", tuple(self.sketch_scale))
        for name in ("stroke_rotation", "stroke_jitter", "sketch_rotation"):
            if getattr(self, name) < 0:
                raise DataError(f"{name} must be >= 0")
        for name in ("stroke_scale", "sketch_scale"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise DataError(f"{name} must satisfy 0 < lo <= hi, got ({lo}, {hi})")
        for name in ("stroke_prob", "drop_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise DataError(f"{name} must be in [0, 1]")


def _transform_points(points, center, degrees: float, scale: float,
                      dx: float, dy: float):
    if degrees == 0.0 and scale == 1.0 and dx == 0.0 and dy == 0.0:
        return points  # bit-exact identity for zero-range configs
    cx, cy = center
    a = math.radians(degrees)
    ca, sa = math.cos(a), math.sin(a)
    out = []
    for p in points:
        ox, oy = (p.x - cx) * scale, (p.y - cy) * scale
        out.append(Point2D(cx + ca * ox - sa * oy + dx, cy + sa * ox + ca * oy + dy))
    return tuple(out)


def augment_stroke_level(ls: LabeledSketch, cfg: AugmentConfig,
                         rng: np.random.Generator | None = None) -> LabeledSketch:
    """Rotate/scale/translate a random subset of strokes about their own
    centroids; labels and stroke count are untouched."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.stroke_scale
    strokes = []
    for s in ls.sketch.strokes:
        if rng.random() >= cfg.stroke_prob:
            strokes.append(s)
            continue
        deg = rng.uniform(-cfg.stroke_rotation, cfg.stroke_rotation)
        scale = rng.uniform(lo, hi)
        dx, dy = rng.uniform(-cfg.stroke_jitter, cfg.stroke_jitter, size=2)
        cx = sum(p.x for p in s.points) / len(s.points)
        cy = sum(p.y for p in s.points) / len(s.points)
        pts = _transform_points(s.points, (cx, cy), deg, scale, dx, dy)
        strokes.append(Stroke(s.id, clamp_points(pts, ls.sketch.resolution)))
    return replace(ls, sketch=replace(ls.sketch, strokes=tuple(strokes)))


def augment_sketch_level(ls: LabeledSketch, cfg: AugmentConfig,
                         rng: np.random.Generator | None = None) -> LabeledSketch:
    """Whole-sketch rotation/scale about the canvas center, then independent
    stroke dropping (at least one stroke always survives)."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.sketch_scale
    deg = rng.uniform(-cfg.sketch_rotation, cfg.sketch_rotation)
    scale = rng.uniform(lo, hi)
    c = ls.sketch.resolution / 2.0
    pts_of = {
        s.id: clamp_points(_transform_points(s.points, (c, c), deg, scale, 0.0, 0.0),
                           ls.sketch.resolution)
        for s in ls.sketch.strokes
    }
    keep = rng.random(len(ls.sketch.strokes)) >= cfg.drop_prob
    if not keep.any():
        keep[0] = True  # floor rule: never drop the whole sketch
    strokes = []
    labels = [] if ls.labels is not None else None
    for s in ls.sketch.strokes:
        if not keep[s.id]:
            continue
        strokes.append(Stroke(len(strokes), pts_of[s.id]))
        if labels is not None:
            labels.append(ls.labels[s.id])
    sk = replace(ls.sketch, strokes=tuple(strokes))
    return LabeledSketch(sk, tuple(labels) if labels is not None else None, ls.vocab)


# ---------------------------------------------------------------------------
# semantic-aware copy-paste

@dataclass(frozen=True)
class SemanticPasteRule:
    rare: str
    anchor: str
    target_occurrence: float = 0.5
    scale_range: tuple = (0.25, 0.40)   # fraction of the anchor bbox's shorter side
    rotation_jitter: float = 10.0
    offset_jitter: float = 3.0
    inner_fraction: float = 0.6         # placement sampled in this central bbox fraction

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(self.scale_range))
        if self.rare == self.anchor:
            raise DataError("rare and anchor part must differ")
        if not 0.0 < self.target_occurrence <= 1.0:
            raise DataError("target_occurrence must be in (0, 1]")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise DataError(f"scale_range must satisfy 0 < lo <= hi, got ({lo}, {hi})")
        if not 0.0 < self.inner_fraction <= 1.0:
            raise DataError("inner_fraction must be in (0, 1]")


MAX_PASTE_ATTEMPTS = 16


def _part_bbox(ls: LabeledSketch, part_idx: int):
    pts = [p for i, s in enumerate(ls.sketch.strokes) if ls.labels[i] == part_idx
           for p in s.points]
    if not pts:
        return None
    return stroke_bbox(pts)


def _try_paste(target: LabeledSketch, donor_strokes, rare_idx: int,
               rule: SemanticPasteRule, anchor_idx: int,
               rng: np.random.Generator) -> LabeledSketch | None:
    ab = _part_bbox(target, anchor_idx)
    if ab is None:
        return None
    ax0, ay0, ax1, ay1 = ab
    aw, ah = ax1 - ax0, ay1 - ay0
    acx, acy = (ax0 + ax1) / 2.0, (ay0 + ay1) / 2.0
    donor_pts = [p for s in donor_strokes for p in s.points]
    rx0, ry0, rx1, ry1 = stroke_bbox(donor_pts)
    rcx, rcy = (rx0 + rx1) / 2.0, (ry0 + ry1) / 2.0
    rspan = max(rx1 - rx0, ry1 - ry0, 1e-9)
    for _ in range(MAX_PASTE_ATTEMPTS):
        frac = rng.uniform(*rule.scale_range)
        scale = frac * min(aw, ah) / rspan
        px = rng.uniform(acx - rule.inner_fraction * aw / 2.0,
                         acx + rule.inner_fraction * aw / 2.0)
        py = rng.uniform(acy - rule.inner_fraction * ah / 2.0,
                         acy + rule.inner_fraction * ah / 2.0)
        deg = rng.uniform(-rule.rotation_jitter, rule.rotation_jitter)
        dx, dy = ((0.0, 0.0) if rule.offset_jitter == 0.0 else
                  rng.uniform(-rule.offset_jitter, rule.offset_jitter, size=2))
        a = math.radians(deg)
        ca, sa = math.cos(a), math.sin(a)
        pasted = []
        for s in donor_strokes:
            pts = []
            for p in s.points:
                ox, oy = (p.x - rcx) * scale, (p.y - rcy) * scale
                pts.append(Point2D(px + ca * ox - sa * oy + dx,
                                   py + sa * ox + ca * oy + dy))
            pasted.append(tuple(pts))
        allx = [p.x for pts in pasted for p in pts]
        ally = [p.y for pts in pasted for p in pts]
        if min(allx) < ax0 or max(allx) > ax1 or min(ally) < ay0 or max(ally) > ay1:
            continue  # containment violated; resample jitter and placement
        base = len(target.sketch.strokes)
        new_strokes = tuple(target.sketch.strokes) + tuple(
            Stroke(base + i, pts) for i, pts in enumerate(pasted)
        )
        new_labels = tuple(target.labels) + (rare_idx,) * len(pasted)
        sk = replace(target.sketch, strokes=new_strokes)
        return LabeledSketch(sk, new_labels, target.vocab)
    return None


def semantic_copy_paste(
    corpus: Sequence[LabeledSketch],
    rule: SemanticPasteRule,
    vocab: PartVocabulary,
    seed: int = 0,
):
    """Raise the rare part's sketch occurrence to the rule's target.

    Donors come from the sketches that have the part; targets are sketches
    with the anchor part but without the rare part, visited in corpus order.
    Each paste rescales the donor part to a fraction of the anchor bbox and
    must land fully inside it (jitter resampled up to 16 times, else the
    target is skipped).  Donor sketches are never modified.
    Returns (new corpus, report dict).
    """
    if rule.rare not in vocab.names or rule.anchor not in vocab.names:
        raise DataError(f"rule parts {rule.rare!r}/{rule.anchor!r} not in vocabulary")
    rare_idx = vocab.index(rule.rare)
    anchor_idx = vocab.index(rule.anchor)
    for ls in corpus:
        if not ls.is_labeled:
            raise DataError("copy-paste needs a labeled corpus")
    donors = [i for i, ls in enumerate(corpus) if rare_idx in ls.labels]
    targets = [i for i, ls in enumerate(corpus)
               if rare_idx not in ls.labels and anchor_idx in ls.labels]
    if not donors:
        raise DataError(f"no sketch contains the rare part {rule.rare!r}")
    if not targets:
        raise DataError(f"no sketch is eligible to receive {rule.rare!r}")
    n = len(corpus)
    goal = round(rule.target_occurrence * n)
    needed = goal - len(donors)
    out = list(corpus)
    pastes = 0
    skipped = []
    rng = np.random.default_rng(seed)
    report = {
        "part": rule.rare,
        "occurrence_before": len(donors) / n,
        "goal_count": goal,
    }
    if needed > 0:
        for ti in targets:
            if pastes >= needed:
                break
            donor = corpus[donors[int(rng.integers(len(donors)))]]
            donor_strokes = [donor.sketch.strokes[i]
                             for i in donor.part_strokes(rule.rare)]
            result = _try_paste(out[ti], donor_strokes, rare_idx, rule, anchor_idx, rng)
            if result is None:
                skipped.append(ti)
                continue
            out[ti] = result
            pastes += 1
    report["pastes"] = pastes
    report["skipped_targets"] = skipped
    report["occurrence_after"] = (len(donors) + pastes) / n
    return out, report


def occurrence_report(corpus: Sequence[LabeledSketch], vocab: PartVocabulary) -> dict:
    """Per part: fraction of sketches containing it, and its share of all
    strokes (shares sum to 1)."""
    if not corpus:
        raise DataError("empty corpus")
    sketch_count = {name: 0 for name in vocab.names}
    stroke_count = {name: 0 for name in vocab.names}
    total_strokes = 0
    for ls in corpus:
        if not ls.is_labeled:
            raise DataError("occurrence report needs a labeled corpus")
        present = set(ls.labels)
        for idx in present:
            sketch_count[vocab.names[idx]] += 1
        for lab in ls.labels:
            stroke_count[vocab.names[lab]] += 1
            total_strokes += 1
    n = len(corpus)
    return {
        "sketch_occurrence": {k: v / n for k, v in sketch_count.items()},
        "stroke_share": {k: v / total_strokes for k, v in stroke_count.items()},
    }
