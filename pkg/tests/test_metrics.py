import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import linalg

from story_adapter.metrics import (
    CSV_COLUMNS,
    FeatureSet,
    ToyTextEmbedder,
    accs,
    accs_from_embeddings,
    afid,
    clip_t,
    cosine,
    evaluate,
    frechet_distance,
    story_afid,
    write_report,
)
from story_adapter.reference_encoder import ToyImageEncoder
from story_adapter.story_model import Frame, FrameSet

# toy encoders, fixture below; recomputed with plain loops and frozen
CLIP_T_FIXTURE = 0.03510407218243913


class Lookup:
    """Embedder returning a preset vector per image, keyed by pixel bytes."""

    def __init__(self, pairs):
        self.table = {Frame.from_pixels(1, 0, px).pixels.tobytes(): np.asarray(v, float) for px, v in pairs}

    def encode(self, pixels):
        return self.table[np.asarray(pixels).tobytes()]


def flat_frames(values, iteration=0):
    return FrameSet(iteration, tuple(
        Frame.from_pixels(k, iteration, np.full((4, 4, 3), v)) for k, v in enumerate(values, start=1)
    ))


def lookup_for(fs, vectors):
    return Lookup([(f.pixels, v) for f, v in zip(fs.frames, vectors)])


def fixture_frames():
    r = np.random.default_rng(11)
    return FrameSet(0, tuple(Frame.from_pixels(k, 0, r.random((16, 16, 3))) for k in (1, 2, 3)))


FIXTURE_PROMPTS = ["a snowman in a forest", "a red fox", "a frozen lake at night"]


def loop_cosine(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    return dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))


def test_clip_t_identity_and_orthogonal():
    fs = flat_frames([0.1, 0.2])
    same = lookup_for(fs, [[1, 0], [0, 1]])
    assert clip_t(fs, ["a", "b"], same, {"a": [1, 0], "b": [0, 1]}.get) == 1.0
    assert clip_t(fs, ["a", "b"], same, {"a": [0, 1], "b": [1, 0]}.get) == 0.0


def test_clip_t_toy_fixture():
    fs = fixture_frames()
    img, txt = ToyImageEncoder(), ToyTextEmbedder()
    oracle = sum(
        loop_cosine(list(img.encode(f.pixels)), list(txt.encode(p))) for f, p in zip(fs.frames, FIXTURE_PROMPTS)
    ) / 3
    assert abs(oracle - CLIP_T_FIXTURE) < 1e-15
    assert abs(clip_t(fs, FIXTURE_PROMPTS, img, txt) - CLIP_T_FIXTURE) < 1e-12


def test_clip_t_count_mismatch():
    with pytest.raises(ValueError):
        clip_t(flat_frames([0.1, 0.2]), ["a"], ToyImageEncoder(grid=1), ToyTextEmbedder(3))


def test_accs_trivial_cases():
    same = FrameSet(0, tuple(Frame.from_pixels(k, 0, np.full((8, 8, 3), 0.9)) for k in (1, 2, 3)))
    assert accs(same, ToyImageEncoder()) == 1.0
    fs = flat_frames([0.1, 0.2])
    assert accs(fs, lookup_for(fs, [[1, 0, 0], [0, 0, 2]])) == 0.0
    with pytest.raises(ValueError):
        accs(flat_frames([0.3]), ToyImageEncoder(grid=1))


def test_accs_four_frame_fixture_brute_force():
    vectors = [[3, 4], [4, 3], [5, 0], [0, 5]]
    fs = flat_frames([0.1, 0.2, 0.3, 0.4])
    value = accs(fs, lookup_for(fs, vectors))
    pairs = [(a, b) for i, a in enumerate(vectors) for b in vectors[i + 1:]]
    assert len(pairs) == 6
    assert value == math.fsum(loop_cosine(a, b) for a, b in pairs) / 6
    exact = sum(Fraction(a[0] * b[0] + a[1] * b[1], 25) for a, b in pairs) / 6
    assert abs(value - float(exact)) < 1e-15


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(0, 10_000))
def test_accs_order_invariant(n, seed):
    r = np.random.default_rng(seed)
    vecs = list(r.standard_normal((n, 5)))
    shuffled = [vecs[i] for i in r.permutation(n)]
    assert abs(accs_from_embeddings(vecs) - accs_from_embeddings(shuffled)) < 1e-12


def test_cosine_of_zero_vector():
    assert cosine(np.zeros(3), np.ones(3)) == 0.0


def test_frechet_identical_is_zero(rng):
    a = FeatureSet(rng.standard_normal((50, 6)))
    assert frechet_distance(a, a) < 1e-6


def scipy_frechet(a, b, shrinkage=1e-6):
    mu_a, mu_b = a.mean(0), b.mean(0)
    ca = np.cov(a, rowvar=False) + shrinkage * np.eye(a.shape[1])
    cb = np.cov(b, rowvar=False) + shrinkage * np.eye(a.shape[1])
    root = linalg.sqrtm(ca @ cb)
    return float(np.sum((mu_a - mu_b) ** 2) + np.trace(ca + cb - 2 * np.real(root)))


@pytest.mark.parametrize("seed", range(5))
def test_frechet_matches_scipy(seed):
    r = np.random.default_rng(seed)
    a = r.standard_normal((40, 5)) @ r.standard_normal((5, 5))
    b = r.standard_normal((60, 5)) + r.standard_normal(5)
    assert abs(frechet_distance(FeatureSet(a), FeatureSet(b)) - scipy_frechet(a, b)) < 1e-6


def test_frechet_one_dimensional_closed_form(rng):
    a = rng.normal(1.0, 2.0, 200)[:, None]
    b = rng.normal(-0.5, 0.7, 300)[:, None]
    sa, sb = a.std(ddof=1), b.std(ddof=1)
    expected = (a.mean() - b.mean()) ** 2 + (sa - sb) ** 2
    assert abs(frechet_distance(FeatureSet(a), FeatureSet(b), shrinkage=0.0) - expected) < 1e-10


def test_frechet_two_gaussians_large_n():
    r = np.random.default_rng(0)
    a = FeatureSet(r.standard_normal((10_000, 2)))
    b = FeatureSet(r.standard_normal((10_000, 2)) + [1.0, 1.0])
    assert abs(frechet_distance(a, b) - 2.0) / 2.0 < 0.05


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(0, 10_000))
def test_frechet_symmetric_and_nonnegative(d, seed):
    r = np.random.default_rng(seed)
    a = FeatureSet(r.standard_normal((d + 3, d)))
    b = FeatureSet(r.standard_normal((d + 5, d)) * 2)
    ab, ba = frechet_distance(a, b), frechet_distance(b, a)
    assert ab >= 0
    assert abs(ab - ba) < 1e-8 * max(1.0, ab)


def test_frechet_dim_mismatch(rng):
    with pytest.raises(ValueError):
        frechet_distance(FeatureSet(rng.random((3, 2))), FeatureSet(rng.random((3, 3))))


def test_afid_identical_story_is_zero():
    fs = FrameSet(0, tuple(Frame.from_pixels(k, 0, np.full((8, 8, 3), 0.2)) for k in range(1, 7)))
    assert story_afid(fs, ToyImageEncoder()) < 1e-6


def test_afid_interleaved_populations_closed_form():
    # odd frames ~ N(2, 1), even frames ~ N(-1, 0.5^2): distance 3^2 + 0.5^2
    r = np.random.default_rng(3)
    b = 6000
    values = np.where(np.arange(1, b + 1) % 2 == 1, r.normal(2.0, 1.0, b), r.normal(-1.0, 0.5, b))
    # frame k carries k in its pixels so the extractor can look its value up
    fs = FrameSet(0, tuple(
        Frame.from_pixels(k, 0, np.array([[[k // 65536, (k // 256) % 256, k % 256]]]) / 255) for k in range(1, b + 1)
    ))

    def extractor(px):
        c = np.rint(px[0, 0] * 255).astype(int)
        return np.array([values[c[0] * 65536 + c[1] * 256 + c[2] - 1]])

    assert abs(story_afid(fs, extractor) - 9.25) / 9.25 < 0.05


def test_afid_single_story_and_minimum_length():
    fs = fixture_frames()
    with pytest.raises(ValueError, match="at least 4"):
        story_afid(fs, ToyImageEncoder())
    r = np.random.default_rng(1)
    story = FrameSet(0, tuple(Frame.from_pixels(k, 0, r.random((8, 8, 3))) for k in range(1, 7)))
    assert afid([story], ToyImageEncoder()) == story_afid(story, ToyImageEncoder())
    with pytest.raises(ValueError):
        afid([], ToyImageEncoder())


def test_evaluate_and_report(tmp_path):
    r = np.random.default_rng(2)
    fs = FrameSet(3, tuple(Frame.from_pixels(k, 3, r.random((8, 8, 3))) for k in range(1, 5)))
    rep = evaluate(fs, ["a", "b", "c", "d"], story_id="s1")
    assert -1 <= rep.accs <= 1 and rep.afid >= 0
    write_report(rep.per_story, tmp_path / "m.csv", tmp_path / "m.json")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert lines[1].startswith("s1,3,")
    assert json.loads((tmp_path / "m.json").read_text())[0]["story_id"] == "s1"
    small = evaluate(FrameSet(0, (Frame.from_pixels(1, 0, fs.frames[0].pixels),)), ["a"])
    assert small.accs is None and small.afid is None
