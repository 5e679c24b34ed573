import numpy as np
import pytest

from sketchseg.data import (
    LabeledSketch,
    PartVocabulary,
    Point2D,
    Sketch,
    Stroke,
    SynthConfig,
    synth_corpus,
)


def make_sketch(stroke_points, resolution=64, category="test"):
    strokes = tuple(
        Stroke(i, tuple(Point2D(float(x), float(y)) for x, y in pts))
        for i, pts in enumerate(stroke_points)
    )
    return Sketch(strokes, category, resolution)


def make_labeled(stroke_points, labels, names, resolution=64):
    return LabeledSketch(
        make_sketch(stroke_points, resolution),
        tuple(labels),
        PartVocabulary(tuple(names)),
    )


@pytest.fixture(scope="session")
def face_corpus():
    return synth_corpus(SynthConfig(template="face", count=8, resolution=64, seed=3))


@pytest.fixture(scope="session")
def tiny_face_corpus():
    # 16x16 keeps embedding training in the millisecond range
    return synth_corpus(SynthConfig(template="face", count=4, resolution=16, seed=1))


class StubEmbedder:
    """Deterministic stand-in for the trained encoder: one fixed random
    vector per stroke subset.  Fast enough for thousands of inference runs."""

    def __init__(self, dim=16, salt=0):
        self.dim = dim
        self.salt = salt

    def _vec(self, key):
        rng = np.random.default_rng(np.random.SeedSequence((self.salt,) + key))
        return rng.standard_normal(self.dim).astype(np.float64)

    def embed_group(self, sketch, member_ids):
        return self._vec(tuple(sorted(int(i) for i in member_ids)))

    def embed_strokes(self, sketch):
        return np.stack([self._vec((s.id,)) for s in sketch.strokes])

    def embed_empty(self):
        return self._vec(())
