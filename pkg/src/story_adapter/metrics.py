"""Consistency and alignment metrics over generated stories.

* ``clip_t``: mean cosine similarity between each frame and its prompt.
* ``accs``: mean cosine similarity over all unordered frame pairs.
* ``afid``: Frechet distance between Gaussian fits of the odd-indexed and
  the even-indexed frames of a story, averaged over stories.

The embedders are pluggable; the toy ones below need no weights and only
make sense relative to each other.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffusion_backend import ToyTextEncoder
from .reference_encoder import ToyImageEncoder
from .story_model import FrameSet

SHRINKAGE = 1e-6


@dataclass(frozen=True, eq=False)
class FeatureSet:
    vectors: np.ndarray
    labels: tuple = ()

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError("a FeatureSet needs at least one vector")
        if not np.all(np.isfinite(v)):
            raise ValueError("features must be finite")
        object.__setattr__(self, "vectors", v)

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class MetricReport:
    clip_t: float | None
    accs: float | None
    afid: float | None
    per_story: list[dict] = field(default_factory=list)


class ToyTextEmbedder:
    """Hashed bag-of-words embedding in the toy image-embedding space."""

    def __init__(self, dim: int = ToyImageEncoder().dim):
        self.dim = dim
        self._words = ToyTextEncoder(length=64, dim=dim, salt="toy-clip-text")

    def encode(self, prompt: str) -> np.ndarray:
        vec = self._words(prompt).sum(axis=0)
        norm = np.linalg.norm(vec)
        return vec / norm if norm else vec


def _encode(embedder, item) -> np.ndarray:
    fn = getattr(embedder, "encode", embedder)
    return np.asarray(fn(item), dtype=np.float64).reshape(-1)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity clipped to [-1, 1]; zero when either vector is zero."""
    na = math.sqrt(float(np.dot(a, a)))
    nb = math.sqrt(float(np.dot(b, b)))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return min(1.0, max(-1.0, float(np.dot(a, b)) / (na * nb)))


def _images(frames) -> list[np.ndarray]:
    if isinstance(frames, FrameSet):
        return [f.pixels for f in frames.frames]
    return [getattr(f, "pixels", f) for f in frames]


def clip_t(frames, prompts: Sequence[str], image_embedder, text_embedder) -> float:
    images = _images(frames)
    if len(images) != len(prompts):
        raise ValueError(f"{len(images)} frames but {len(prompts)} prompts")
    if not images:
        raise ValueError("no frames")
    sims = [cosine(_encode(image_embedder, img), _encode(text_embedder, p)) for img, p in zip(images, prompts)]
    return math.fsum(sims) / len(sims)


def accs_from_embeddings(embeddings: Sequence[np.ndarray]) -> float:
    if len(embeddings) < 2:
        raise ValueError("aCCS needs at least two frames")
    sims = [cosine(a, b) for a, b in itertools.combinations(embeddings, 2)]
    return math.fsum(sims) / len(sims)


def accs(frames, image_embedder) -> float:
    return accs_from_embeddings([_encode(image_embedder, img) for img in _images(frames)])


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: FeatureSet, b: FeatureSet, shrinkage: float = SHRINKAGE) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`` for Gaussian fits.

    Covariances are unbiased sample covariances plus ``shrinkage * I``. The
    trace of ``(S_a S_b)^(1/2)`` is computed as the trace of the symmetric
    ``(S_a^(1/2) S_b S_a^(1/2))^(1/2)``, which has the same eigenvalues;
    tiny negative eigenvalues from round-off are clamped to zero.
    """
    if a.dim != b.dim:
        raise ValueError(f"feature dims differ: {a.dim} vs {b.dim}")
    mu_a = a.vectors.mean(axis=0)
    mu_b = b.vectors.mean(axis=0)
    eye = np.eye(a.dim)
    cov_a = _covariance(a.vectors) + shrinkage * eye
    cov_b = _covariance(b.vectors) + shrinkage * eye
    for name, cov in (("A", cov_a), ("B", cov_b)):
        if np.linalg.eigvalsh(cov).min() < 0:
            raise ValueError(f"covariance of {name} is not positive semi-definite")
    root_a = _sqrt_psd(cov_a)
    cross = root_a @ cov_b @ root_a
    w = np.linalg.eigvalsh((cross + cross.T) / 2)
    tr_cross = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    diff = mu_a - mu_b
    value = float(diff @ diff) + float(np.trace(cov_a) + np.trace(cov_b)) - 2.0 * tr_cross
    return max(value, 0.0)


def _covariance(x: np.ndarray) -> np.ndarray:
    if x.shape[0] < 2:
        return np.zeros((x.shape[1], x.shape[1]))
    return np.atleast_2d(np.cov(x, rowvar=False))


def story_split(fs: FrameSet, extractor) -> tuple[FeatureSet, FeatureSet]:
    """Features of odd (1, 3, ...) and even (2, 4, ...) story indices."""
    odd = [f for f in fs.frames if f.story_index % 2 == 1]
    even = [f for f in fs.frames if f.story_index % 2 == 0]
    feats = lambda frames: FeatureSet(
        np.stack([_encode(extractor, f.pixels) for f in frames]), tuple(f.story_index for f in frames)
    )
    return feats(odd), feats(even)


def story_afid(fs: FrameSet, extractor) -> float:
    if len(fs) < 4:
        raise ValueError(f"aFID needs at least 4 frames per story, got {len(fs)}")
    return frechet_distance(*story_split(fs, extractor))


def afid(runs: Sequence[FrameSet], extractor) -> float:
    if not runs:
        raise ValueError("no stories")
    values = [story_afid(fs, extractor) for fs in runs]
    return math.fsum(values) / len(values)


def evaluate(
    fs: FrameSet,
    prompts: Sequence[str],
    image_embedder=None,
    text_embedder=None,
    story_id: str = "story",
) -> MetricReport:
    """All three metrics for one story at one iteration; undefined ones are None."""
    image_embedder = image_embedder or ToyImageEncoder()
    text_embedder = text_embedder or ToyTextEmbedder(getattr(image_embedder, "dim", 48))
    ct = clip_t(fs, prompts, image_embedder, text_embedder)
    ac = accs(fs, image_embedder) if len(fs) >= 2 else None
    af = story_afid(fs, image_embedder) if len(fs) >= 4 else None
    row = {"story_id": story_id, "iteration": fs.iteration, "clip_t": ct, "accs": ac, "afid": af}
    return MetricReport(ct, ac, af, [row])


CSV_COLUMNS = ("story_id", "iteration", "clip_t", "accs", "afid")


def write_report(rows: Sequence[dict], csv_path: str | Path, json_path: str | Path | None = None) -> None:
    csv_path = Path(csv_path)
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in CSV_COLUMNS})
    if json_path is not None:
        Path(json_path).write_text(json.dumps(list(rows), indent=2) + "\n", encoding="utf-8")
