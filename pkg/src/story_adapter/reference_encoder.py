"""Global image embeddings and their projection into reference tokens."""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .story_model import FrameSet


class ImageEncoder(Protocol):
    dim: int

    def encode(self, pixels: np.ndarray) -> np.ndarray:
        """Map an ``H x W x 3`` image in [0, 1] to a length-``dim`` vector."""


class EncoderError(RuntimeError):
    def __init__(self, frame_index: int, cause: Exception):
        self.frame_index = frame_index
        super().__init__(f"encoder failed on frame {frame_index}: {cause}")


class ToyImageEncoder:
    """Deterministic stand-in for a pretrained vision encoder.

    The image is cut into a ``grid x grid`` patch grid; the per-channel mean
    of each patch, centred at mid-grey (minus 0.5), gives ``3 * grid**2``
    features which are then L2-normalised. A uniform mid-grey image has no
    direction and maps to the zero vector. The all-black image maps to
    ``-1/sqrt(dim)`` in every coordinate.
    """

    def __init__(self, grid: int = 4):
        if grid < 1:
            raise ValueError("grid must be positive")
        self.grid = grid
        self.dim = 3 * grid * grid

    def encode(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 image, got {pixels.shape}")
        h, w, _ = pixels.shape
        g = self.grid
        if h % g or w % g:
            raise ValueError(f"image size {h}x{w} not divisible by grid {g}")
        patches = pixels.reshape(g, h // g, g, w // g, 3).mean(axis=(1, 3))
        vec = (patches - 0.5).reshape(-1)
        norm = np.linalg.norm(vec)
        if norm == 0:
            return np.zeros(self.dim)
        return vec / norm


class PretrainedEncoderAdapter:
    """Wraps any callable ``fn(pixels) -> vector`` (e.g. a CLIP image tower).

    Normalisation is left to the wrapped model.
    """

    def __init__(self, fn, dim: int):
        self.fn = fn
        self.dim = dim

    def encode(self, pixels: np.ndarray) -> np.ndarray:
        vec = np.asarray(self.fn(pixels), dtype=np.float64).reshape(-1)
        if vec.shape != (self.dim,):
            raise ValueError(f"adapter returned shape {vec.shape}, expected ({self.dim},)")
        return vec


@dataclass(frozen=True, eq=False)
class GlobalEmbedding:
    vector: np.ndarray
    source_frame: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.vector)):
            raise ValueError(f"embedding of frame {self.source_frame} is not finite")


def embed_frames(fs: FrameSet, encoder: ImageEncoder) -> list[GlobalEmbedding]:
    out = []
    for frame in fs.frames:
        try:
            vec = np.asarray(encoder.encode(frame.pixels), dtype=np.float64)
        except Exception as exc:  # surfaced with the frame index
            raise EncoderError(frame.story_index, exc) from exc
        out.append(GlobalEmbedding(vec, frame.story_index))
    return out


@dataclass(frozen=True, eq=False)
class ProjectionWeights:
    """``d x (n*e)`` matrix turning one global embedding into ``n`` tokens of dim ``e``."""

    w_c: np.ndarray
    tokens_per_reference: int
    token_dim: int

    def __post_init__(self):
        d, ne = self.w_c.shape
        if ne != self.tokens_per_reference * self.token_dim:
            raise ValueError(
                f"W_c has {ne} columns, expected n*e = "
                f"{self.tokens_per_reference}*{self.token_dim}"
            )
        self.w_c.setflags(write=False)

    @property
    def embed_dim(self) -> int:
        return self.w_c.shape[0]

    @classmethod
    def from_seed(cls, seed: int, embed_dim: int, tokens_per_reference: int, token_dim: int):
        """Random projection with orthonormal rows (or columns, if wider than tall).

        Scaled by ``sqrt(n*e / d)`` so a unit-norm embedding yields tokens
        with entries of order one.
        """
        ne = tokens_per_reference * token_dim
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x57C]))
        a = rng.standard_normal((max(embed_dim, ne), min(embed_dim, ne)))
        q, r = np.linalg.qr(a)
        q = q * np.sign(np.diag(r))
        w = q if embed_dim >= ne else q.T
        return cls(w * np.sqrt(ne / embed_dim), tokens_per_reference, token_dim)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        np.save(buf, np.asarray(self.w_c), allow_pickle=False)
        header = np.array([self.tokens_per_reference, self.token_dim], dtype=np.int64)
        np.save(buf, header, allow_pickle=False)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ProjectionWeights":
        buf = io.BytesIO(blob)
        w = np.load(buf, allow_pickle=False)
        n, e = np.load(buf, allow_pickle=False).tolist()
        return cls(np.array(w), int(n), int(e))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ProjectionWeights":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass(frozen=True, eq=False)
class ReferenceTokenSet:
    tokens: np.ndarray  # 1 x (B*n) x e
    count: int  # B
    tokens_per_reference: int = 1

    def __post_init__(self):
        if self.tokens.ndim != 3 or self.tokens.shape[0] != 1:
            raise ValueError(f"tokens must be 1 x (B*n) x e, got {self.tokens.shape}")
        if self.tokens.shape[1] != self.count * self.tokens_per_reference:
            raise ValueError("token count must equal B*n")
        if not np.all(np.isfinite(self.tokens)):
            raise ValueError("reference tokens are not finite")
        self.tokens.setflags(write=False)

    @property
    def length(self) -> int:
        return self.tokens.shape[1]

    @property
    def token_dim(self) -> int:
        return self.tokens.shape[2]

    def zeros_like(self) -> "ReferenceTokenSet":
        return ReferenceTokenSet(np.zeros_like(self.tokens), self.count, self.tokens_per_reference)


def project_and_flatten(embs: Sequence[GlobalEmbedding], w: ProjectionWeights) -> ReferenceTokenSet:
    """Project each embedding to ``n`` tokens and concatenate, frame-major."""
    if not embs:
        raise ValueError("no embeddings to project")
    for emb in embs:
        if emb.vector.shape != (w.embed_dim,):
            raise ValueError(
                f"embedding of frame {emb.source_frame} has shape {emb.vector.shape}, "
                f"expected ({w.embed_dim},)"
            )
    c = np.stack([emb.vector for emb in embs]) @ w.w_c
    n, e = w.tokens_per_reference, w.token_dim
    tokens = c.reshape(1, len(embs) * n, e)
    return ReferenceTokenSet(tokens, len(embs), n)


def build_reference_tokens(fs: FrameSet, encoder: ImageEncoder, w: ProjectionWeights) -> ReferenceTokenSet:
    return project_and_flatten(embed_frames(fs, encoder), w)
