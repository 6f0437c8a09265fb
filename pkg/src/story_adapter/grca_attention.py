"""Scaled dot-product attention, reference cross-attention, and the merge
with text cross-attention.

All arithmetic on the attention path goes through ``_matmul``, ``_scale``,
``_softmax`` and ``_axpy`` so that :func:`count_ops` can tally the
floating-point work actually executed (see ``cost_model``).
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass

import numpy as np

# exp, max-compare, subtract, accumulate, divide
SOFTMAX_FLOPS_PER_ELEMENT = 5


class OpCounter:
    """Tallies flops by category while active."""

    def __init__(self):
        self.by_kind: dict[str, int] = {}

    def add(self, kind: str, flops: int) -> None:
        self.by_kind[kind] = self.by_kind.get(kind, 0) + int(flops)

    @property
    def total(self) -> int:
        return sum(self.by_kind.values())


_counter: contextvars.ContextVar[OpCounter | None] = contextvars.ContextVar("op_counter", default=None)


@contextlib.contextmanager
def count_ops():
    counter = OpCounter()
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


def _record(kind: str, flops: int) -> None:
    counter = _counter.get()
    if counter is not None:
        counter.add(kind, flops)


def _matmul(a: np.ndarray, b: np.ndarray, kind: str = "matmul") -> np.ndarray:
    out = a @ b
    # one multiply and one add per inner-product term
    _record(kind, 2 * out.size * a.shape[-1])
    return out


def _scale(x: np.ndarray, factor: float) -> np.ndarray:
    _record("scale", x.size)
    return x * factor


def _softmax(x: np.ndarray) -> np.ndarray:
    _record("softmax", SOFTMAX_FLOPS_PER_ELEMENT * x.size)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _axpy(alpha: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """y + alpha * x."""
    _record("merge", 2 * x.size)
    return y + alpha * x


def _check_finite(name: str, x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")


def attend(q, k, v, heads: int = 1) -> np.ndarray:
    """Multi-head softmax attention on already-projected queries, keys and values.

    ``q`` is ``(q_len, dim)``, ``k`` and ``v`` are ``(kv_len, dim)``. The
    feature dimension is split into ``heads`` contiguous slices; each slice is
    scaled by ``1/sqrt(dim/heads)`` and the per-head outputs are concatenated
    back in order.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("attend expects 2-D queries, keys and values")
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"query dim {q.shape[1]} != key dim {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"key length {k.shape[0]} != value length {v.shape[0]}")
    if k.shape[0] == 0:
        raise ValueError("attention over an empty key set")
    if q.shape[1] % heads or v.shape[1] % heads:
        raise ValueError(f"feature dims not divisible by heads={heads}")
    for name, x in (("queries", q), ("keys", k), ("values", v)):
        _check_finite(name, x)

    q_len, dim = q.shape
    kv_len = k.shape[0]
    hd = dim // heads
    vd = v.shape[1] // heads
    qh = q.reshape(q_len, heads, hd).transpose(1, 0, 2)
    kh = k.reshape(kv_len, heads, hd).transpose(1, 2, 0)
    vh = v.reshape(kv_len, heads, vd).transpose(1, 0, 2)
    scores = _scale(_matmul(qh, kh, "scores"), 1.0 / np.sqrt(hd))
    probs = _softmax(scores)
    out = _matmul(probs, vh, "values")
    return out.transpose(1, 0, 2).reshape(q_len, heads * vd)


@dataclass(frozen=True, eq=False)
class AttentionWeights:
    """Projection matrices of one cross-attention layer.

    ``w_k``/``w_v`` map reference tokens (dim ``e``), ``w_k_text``/``w_v_text``
    map text tokens. ``w_o`` is the shared output projection applied after
    the text and reference branches are merged.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_k_text: np.ndarray
    w_v_text: np.ndarray
    w_o: np.ndarray
    heads: int = 1

    def __post_init__(self):
        model_dim, attn_dim = self.w_q.shape
        if attn_dim % self.heads:
            raise ValueError(f"attn_dim {attn_dim} not divisible by heads {self.heads}")
        for name in ("w_k", "w_v", "w_k_text", "w_v_text"):
            if getattr(self, name).shape[1] != attn_dim:
                raise ValueError(f"{name} output dim must equal attn_dim {attn_dim}")
        if self.w_k.shape != self.w_v.shape or self.w_k_text.shape != self.w_v_text.shape:
            raise ValueError("key and value projections must have matching shapes")
        if self.w_o.shape != (attn_dim, model_dim):
            raise ValueError(f"w_o must be {(attn_dim, model_dim)}, got {self.w_o.shape}")
        for name in ("w_q", "w_k", "w_v", "w_k_text", "w_v_text", "w_o"):
            arr = getattr(self, name)
            _check_finite(name, arr)
            arr.setflags(write=False)

    @property
    def model_dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def attn_dim(self) -> int:
        return self.w_q.shape[1]

    @property
    def token_dim(self) -> int:
        return self.w_k.shape[0]

    @property
    def text_dim(self) -> int:
        return self.w_k_text.shape[0]

    @classmethod
    def random(
        cls,
        rng: np.random.Generator,
        model_dim: int,
        attn_dim: int,
        token_dim: int,
        text_dim: int,
        heads: int = 1,
    ) -> "AttentionWeights":
        def glorot(fan_in, fan_out):
            return rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)

        return cls(
            w_q=glorot(model_dim, attn_dim),
            w_k=glorot(token_dim, attn_dim),
            w_v=glorot(token_dim, attn_dim),
            w_k_text=glorot(text_dim, attn_dim),
            w_v_text=glorot(text_dim, attn_dim),
            w_o=glorot(attn_dim, model_dim),
            heads=heads,
        )


def _tokens(refs) -> np.ndarray:
    """Accept a ReferenceTokenSet or a raw ``(1, L, e)`` / ``(L, e)`` array."""
    tokens = getattr(refs, "tokens", refs)
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim == 3:
        if tokens.shape[0] != 1:
            raise ValueError("reference tokens must have a leading batch dim of 1")
        tokens = tokens[0]
    if tokens.ndim != 2:
        raise ValueError(f"reference tokens must be 2-D or 3-D, got shape {tokens.shape}")
    return tokens


def _reference_branch(q: np.ndarray, refs, w: AttentionWeights) -> np.ndarray:
    tokens = _tokens(refs)
    if tokens.shape[1] != w.token_dim:
        raise ValueError(f"reference token dim {tokens.shape[1]} != W_k input dim {w.token_dim}")
    k = _matmul(tokens, w.w_k, "kv_proj")
    v = _matmul(tokens, w.w_v, "kv_proj")
    return attend(q, k, v, w.heads)


def _text_branch(q: np.ndarray, text_tokens, w: AttentionWeights) -> np.ndarray:
    text = np.asarray(text_tokens, dtype=np.float64)
    if text.ndim != 2 or text.shape[1] != w.text_dim:
        raise ValueError(f"text tokens must be (len, {w.text_dim}), got {text.shape}")
    k = _matmul(text, w.w_k_text, "kv_proj")
    v = _matmul(text, w.w_v_text, "kv_proj")
    return attend(q, k, v, w.heads)


def _queries(features, w: AttentionWeights) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != w.model_dim:
        raise ValueError(f"latent features must be (seq_len, {w.model_dim}), got {x.shape}")
    _check_finite("latent features", x)
    return _matmul(x, w.w_q, "q_proj")


def grca(features, refs, w: AttentionWeights) -> np.ndarray:
    """Cross-attention of latent features onto the reference tokens.

    The key/value sequence is exactly the ``B*n`` reference tokens, whatever
    the spatial size of ``features``.
    """
    q = _queries(features, w)
    return _matmul(_reference_branch(q, refs, w), w.w_o, "out_proj")


def text_attention(features, text_tokens, w: AttentionWeights) -> np.ndarray:
    q = _queries(features, w)
    return _matmul(_text_branch(q, text_tokens, w), w.w_o, "out_proj")


def merged_attention(features, text_tokens, refs, lam: float, w: AttentionWeights) -> np.ndarray:
    """Text cross-attention plus ``lam`` times reference cross-attention.

    The query projection and output projection are shared by both branches.
    With ``refs=None`` or ``lam == 0`` the reference branch is skipped
    entirely, which is bit-identical to text-only attention.
    """
    if not lam >= 0:
        raise ValueError(f"balance factor must be >= 0, got {lam}")
    q = _queries(features, w)
    out = _text_branch(q, text_tokens, w)
    if refs is not None and lam != 0:
        out = _axpy(float(lam), _reference_branch(q, refs, w), out)
    return _matmul(out, w.w_o, "out_proj")
