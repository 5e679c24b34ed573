"""Segmentation quality metrics and perturbation-robustness harnesses.

All metrics operate on binary stroke-by-part matrices: ground truth M (one
part per stroke) versus prediction M'.  Stroke accuracy is the fraction of
strokes whose row matches; grouping accuracy is one minus the mean elementwise
absolute difference; component accuracy counts (sketch, part) components with
at least 75% of their strokes labeled correctly, boundary inclusive.

The rotation and offset harnesses re-run a predictor on perturbed copies of a
corpus and tabulate the metrics per perturbation level plus average and
standard deviation rows.  The unperturbed level is passed through untouched,
so its row must match the base evaluation bit for bit.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import DataError
from .data import (
    LabeledSketch,
    Point2D,
    Sketch,
    Stroke,
    clamp_points,
    rotate_sketch,
    sketch_bbox,
)

ROTATION_ANGLES = (-45.0, -30.0, -15.0, 0.0, 15.0, 30.0, 45.0)
OFFSET_SIGMAS = (0.0, 0.05, 0.10, 0.15, 0.20)
COMPONENT_CORRECT_FRACTION = 0.75


def membership_matrix(labels: Sequence[int], n_parts: int) -> np.ndarray:
    """One-hot (S, C) matrix from per-stroke part indices."""
    labels = np.asarray(labels, dtype=np.intp)
    if labels.size and (labels.min() < 0 or labels.max() >= n_parts):
        raise DataError(f"labels outside part range [0, {n_parts})")
    m = np.zeros((labels.size, n_parts), dtype=np.uint8)
    m[np.arange(labels.size), labels] = 1
    return m


def _check_pair(gt: np.ndarray, pred: np.ndarray):
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise DataError(f"matrix shapes differ: {gt.shape} vs {pred.shape}")
    if gt.ndim != 2:
        raise DataError("label matrices must be 2-D")
    return gt, pred


def stroke_accuracy(gt: np.ndarray, pred: np.ndarray) -> float:
    """Fraction of strokes whose full label row matches the ground truth."""
    gt, pred = _check_pair(gt, pred)
    if not np.all(gt.sum(axis=1) == 1):
        raise DataError("ground truth must assign exactly one part per stroke")
    if gt.shape[0] == 0:
        return 1.0
    return float(np.all(gt == pred, axis=1).mean())


def grouping_accuracy(gt: np.ndarray, pred: np.ndarray) -> float:
    """1 - mean |M - M'| over all cells; symmetric in its arguments."""
    gt, pred = _check_pair(gt, pred)
    if gt.size == 0:
        return 1.0
    return float(1.0 - np.abs(gt.astype(np.float64) - pred.astype(np.float64)).mean())


def component_counts(gt: np.ndarray, pred: np.ndarray) -> tuple[int, int]:
    """(correct, total) components; a component is a part with >= 1 ground-truth
    stroke, correct iff >= 75% of those strokes have matching rows."""
    gt, pred = _check_pair(gt, pred)
    correct = total = 0
    row_ok = np.all(gt == pred, axis=1)
    for part in range(gt.shape[1]):
        members = gt[:, part] == 1
        k = int(members.sum())
        if k == 0:
            continue
        total += 1
        if row_ok[members].sum() / k >= COMPONENT_CORRECT_FRACTION:
            correct += 1
    return correct, total


def component_accuracy(gt: np.ndarray, pred: np.ndarray) -> float:
    correct, total = component_counts(gt, pred)
    return correct / total if total else 1.0


# ---------------------------------------------------------------------------
# corpus evaluation

@dataclass(frozen=True)
class EvalReport:
    sacc: float
    gacc: float
    cacc: float
    per_part_sacc: dict
    n_sketches: int
    n_strokes: int
    n_components: int

    def __post_init__(self):
        for name in ("sacc", "gacc", "cacc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DataError(f"{name} outside [0, 1]: {v}")

    def as_dict(self) -> dict:
        return {
            "sacc": self.sacc,
            "gacc": self.gacc,
            "cacc": self.cacc,
            "per_part_sacc": dict(self.per_part_sacc),
            "n_sketches": self.n_sketches,
            "n_strokes": self.n_strokes,
            "n_components": self.n_components,
        }


def evaluate_corpus(predict_fn: Callable[[Sketch], Sequence[int]],
                    corpus: Sequence[LabeledSketch]) -> EvalReport:
    """Run the predictor on every sketch and pool the three metrics.

    Stroke and component accuracy pool over all strokes/components of the
    corpus; grouping accuracy averages the per-sketch value (matrix sizes
    differ between sketches).
    """
    if not corpus:
        raise DataError("empty corpus")
    vocab = corpus[0].vocab
    n_parts = len(vocab.names)
    ok_strokes = 0
    n_strokes = 0
    gacc_sum = 0.0
    comp_ok = 0
    comp_total = 0
    part_ok = {name: 0 for name in vocab.names}
    part_n = {name: 0 for name in vocab.names}
    for ls in corpus:
        if not ls.is_labeled:
            raise DataError("evaluation needs labeled sketches")
        pred_labels = list(predict_fn(ls.sketch))
        if len(pred_labels) != len(ls.sketch.strokes):
            raise DataError(
                f"predictor returned {len(pred_labels)} labels for "
                f"{len(ls.sketch.strokes)} strokes"
            )
        gt = membership_matrix(ls.labels, n_parts)
        pred = membership_matrix(pred_labels, n_parts)
        row_ok = np.all(gt == pred, axis=1)
        ok_strokes += int(row_ok.sum())
        n_strokes += gt.shape[0]
        gacc_sum += grouping_accuracy(gt, pred)
        c_ok, c_tot = component_counts(gt, pred)
        comp_ok += c_ok
        comp_total += c_tot
        for i, lab in enumerate(ls.labels):
            name = vocab.names[lab]
            part_n[name] += 1
            part_ok[name] += int(row_ok[i])
    per_part = {
        name: (part_ok[name] / part_n[name]) if part_n[name] else None
        for name in vocab.names
    }
    return EvalReport(
        sacc=ok_strokes / n_strokes,
        gacc=gacc_sum / len(corpus),
        cacc=comp_ok / comp_total if comp_total else 1.0,
        per_part_sacc=per_part,
        n_sketches=len(corpus),
        n_strokes=n_strokes,
        n_components=comp_total,
    )


# ---------------------------------------------------------------------------
# perturbation harnesses

@dataclass(frozen=True)
class InvarianceReport:
    mode: str
    levels: tuple
    reports: tuple
    average: dict
    std: dict

    def rows(self):
        return list(zip(self.levels, self.reports))


def _summarize(mode: str, levels, reports) -> InvarianceReport:
    avg = {}
    std = {}
    for metric in ("sacc", "gacc", "cacc"):
        vals = np.array([getattr(r, metric) for r in reports], dtype=np.float64)
        avg[metric] = float(vals.mean())
        std[metric] = float(vals.std())  # population std over the levels
    return InvarianceReport(mode=mode, levels=tuple(levels),
                            reports=tuple(reports), average=avg, std=std)


def rotation_invariance_test(
    predict_fn: Callable[[Sketch], Sequence[int]],
    corpus: Sequence[LabeledSketch],
    angles: Sequence[float] = ROTATION_ANGLES,
) -> InvarianceReport:
    """Evaluate after whole-sketch rotation about the canvas center, one row
    per angle; the 0-degree row is the untouched base evaluation."""
    reports = []
    for angle in angles:
        perturbed = [
            replace(ls, sketch=rotate_sketch(ls.sketch, angle)) for ls in corpus
        ]
        reports.append(evaluate_corpus(predict_fn, perturbed))
    return _summarize("rotation", [f"{a:g}" for a in angles], reports)


def bbox_diagonal(sketch: Sketch) -> float:
    x0, y0, x1, y1 = sketch_bbox(sketch)
    return math.hypot(x1 - x0, y1 - y0)


def offset_sketch(ls: LabeledSketch, sigma_frac: float, rng: np.random.Generator,
                  distribution: str = "gaussian") -> LabeledSketch:
    """Translate each stroke by a random per-stroke offset.

    Gaussian offsets are N(0, (sigma_frac * d)^2) per axis with d the sketch
    bbox diagonal; the uniform alternative draws from [-sigma_frac*d, +sigma_frac*d].
    """
    if sigma_frac == 0.0:
        return ls
    d = bbox_diagonal(ls.sketch)
    scale = sigma_frac * d
    res = ls.sketch.resolution
    strokes = []
    for s in ls.sketch.strokes:
        if distribution == "gaussian":
            dx, dy = rng.normal(0.0, scale, size=2)
        elif distribution == "uniform":
            dx, dy = rng.uniform(-scale, scale, size=2)
        else:
            raise DataError(f"unknown offset distribution {distribution!r}")
        pts = clamp_points((Point2D(p.x + dx, p.y + dy) for p in s.points), res)
        strokes.append(Stroke(s.id, pts))
    return replace(ls, sketch=replace(ls.sketch, strokes=tuple(strokes)))


def offset_invariance_test(
    predict_fn: Callable[[Sketch], Sequence[int]],
    corpus: Sequence[LabeledSketch],
    sigmas: Sequence[float] = OFFSET_SIGMAS,
    seed: int = 0,
    distribution: str = "gaussian",
) -> InvarianceReport:
    """Evaluate under per-stroke random offsets at each noise level (fractions
    of the sketch bbox diagonal).  Level 0 is the untouched base evaluation;
    each (level, sketch) pair draws from its own seeded stream."""
    reports = []
    for li, sigma in enumerate(sigmas):
        perturbed = []
        for si, ls in enumerate(corpus):
            rng = np.random.default_rng(np.random.SeedSequence((seed, li, si)))
            perturbed.append(offset_sketch(ls, sigma, rng, distribution))
        reports.append(evaluate_corpus(predict_fn, perturbed))
    return _summarize("offset", [f"{s:g}" for s in sigmas], reports)


# ---------------------------------------------------------------------------
# report files

def write_eval_report(report: EvalReport, csv_path=None, json_path=None) -> None:
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            part_cols = [f"sacc[{name}]" for name in report.per_part_sacc]
            w.writerow(["sacc", "gacc", "cacc", "n_sketches", "n_strokes",
                        "n_components", *part_cols])
            part_vals = ["" if v is None else f"{v:.6f}"
                         for v in report.per_part_sacc.values()]
            w.writerow([f"{report.sacc:.6f}", f"{report.gacc:.6f}", f"{report.cacc:.6f}",
                        report.n_sketches, report.n_strokes, report.n_components,
                        *part_vals])
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump(report.as_dict(), fh, indent=2)
            fh.write("\n")


def write_invariance_report(report: InvarianceReport, csv_path=None, json_path=None) -> None:
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["level", "sacc", "gacc", "cacc"])
            for label, rep in report.rows():
                w.writerow([label, f"{rep.sacc:.6f}", f"{rep.gacc:.6f}", f"{rep.cacc:.6f}"])
            w.writerow(["Average", f"{report.average['sacc']:.6f}",
                        f"{report.average['gacc']:.6f}", f"{report.average['cacc']:.6f}"])
            w.writerow(["Standard Deviation", f"{report.std['sacc']:.6f}",
                        f"{report.std['gacc']:.6f}", f"{report.std['cacc']:.6f}"])
    if json_path is not None:
        payload = {
            "mode": report.mode,
            "rows": [
                {"level": label, **rep.as_dict()} for label, rep in report.rows()
            ],
            "average": report.average,
            "std": report.std,
        }
        with open(json_path, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
