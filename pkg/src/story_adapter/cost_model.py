"""Analytic attention cost of generating one image, GRCA vs concatenated
self-attention (CSA) over all reference frames.

Counting convention: a multiply-add is 2 flops; the score scaling is one
flop per score; softmax is ``SOFTMAX_FLOPS_PER_ELEMENT`` flops per score;
merging the reference branch into the text branch (``y + lam * x``) is 2
flops per output element. Biases, norms and residual adds are not counted.

Per denoising step and layer the two modes are:

* GRCA: self-attention over the frame's own ``q_len`` tokens, plus text
  cross-attention merged with reference cross-attention over ``B*n`` tokens
  (query and output projections shared).
* CSA: self-attention whose keys/values are all ``B`` frames' tokens
  (``B*q_len``), plus plain text cross-attention.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .diffusion_backend import BackendDescriptor, LayerDescriptor
from .grca_attention import SOFTMAX_FLOPS_PER_ELEMENT, AttentionWeights, count_ops, merged_attention

KV_SOURCES = ("self", "text", "grca", "csa")


@dataclass(frozen=True)
class AttentionLayerSpec:
    q_len: int
    model_dim: int
    attn_dim: int
    heads: int
    kv_source: str
    # input dim of the key/value projections
    context_dim: int

    def __post_init__(self):
        for name in ("q_len", "model_dim", "attn_dim", "heads", "context_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.kv_source not in KV_SOURCES:
            raise ValueError(f"kv_source must be one of {KV_SOURCES}")


def projection_flops(rows: int, in_dim: int, out_dim: int) -> int:
    return 2 * rows * in_dim * out_dim


def kv_branch_flops(spec: AttentionLayerSpec, kv_len: int) -> int:
    """Key/value projections plus scores, scaling, softmax and weighted sum."""
    if kv_len <= 0:
        raise ValueError("kv_len must be positive")
    q, a, h = spec.q_len, spec.attn_dim, spec.heads
    kv_proj = 2 * projection_flops(kv_len, spec.context_dim, a)
    scores = 2 * q * kv_len * a
    scale = h * q * kv_len
    softmax = SOFTMAX_FLOPS_PER_ELEMENT * h * q * kv_len
    weighted_sum = 2 * q * kv_len * a
    return kv_proj + scores + scale + softmax + weighted_sum


def attention_flops(spec: AttentionLayerSpec, kv_len: int) -> int:
    """Q projection + K/V projections + QK^T + scale + softmax + AV + output projection."""
    q_proj = projection_flops(spec.q_len, spec.model_dim, spec.attn_dim)
    out_proj = projection_flops(spec.q_len, spec.attn_dim, spec.model_dim)
    return q_proj + kv_branch_flops(spec, kv_len) + out_proj


def merged_attention_flops(text: AttentionLayerSpec, grca: AttentionLayerSpec, text_len: int, ref_len: int) -> int:
    """Text cross-attention with a reference branch sharing its Q and output projections."""
    return attention_flops(text, text_len) + kv_branch_flops(grca, ref_len) + 2 * grca.q_len * grca.attn_dim


def layer_specs(layer: LayerDescriptor) -> dict[str, AttentionLayerSpec]:
    base = dict(q_len=layer.seq_len, model_dim=layer.model_dim, attn_dim=layer.attn_dim, heads=layer.heads)
    return {
        "self": AttentionLayerSpec(kv_source="self", context_dim=layer.model_dim, **base),
        "csa": AttentionLayerSpec(kv_source="csa", context_dim=layer.model_dim, **base),
        "text": AttentionLayerSpec(kv_source="text", context_dim=layer.text_dim, **base),
        "grca": AttentionLayerSpec(kv_source="grca", context_dim=layer.token_dim, **base),
    }


@dataclass(frozen=True)
class CostReport:
    reference_count: int
    tokens_per_reference: int
    steps: int
    grca_per_layer: tuple[int, ...]
    csa_per_layer: tuple[int, ...]

    @property
    def grca_total(self) -> int:
        return sum(self.grca_per_layer) * self.steps

    @property
    def csa_total(self) -> int:
        return sum(self.csa_per_layer) * self.steps


def layer_costs(layer: LayerDescriptor, references: int, tokens_per_reference: int) -> tuple[int, int]:
    """(GRCA-mode, CSA-mode) flops of one layer for one denoiser evaluation."""
    specs = layer_specs(layer)
    grca_mode = attention_flops(specs["self"], layer.seq_len) + merged_attention_flops(
        specs["text"], specs["grca"], layer.text_len, references * tokens_per_reference
    )
    csa_mode = attention_flops(specs["csa"], references * layer.seq_len) + attention_flops(
        specs["text"], layer.text_len
    )
    return grca_mode, csa_mode


def compare_modes(
    descriptor: BackendDescriptor,
    references: Iterable[int],
    tokens_per_reference: int = 4,
    token_dim: int | None = None,
    steps: int = 1,
) -> list[CostReport]:
    """Cost of one image for each reference count in ``references``.

    ``token_dim`` overrides the reference token width ``e`` of every layer.
    """
    refs = list(references)
    if not refs:
        raise ValueError("empty reference range")
    if tokens_per_reference < 1 or steps < 1 or any(b < 1 for b in refs):
        raise ValueError("reference counts, tokens per reference and steps must be positive")
    layers = descriptor.layers
    if token_dim is not None:
        layers = tuple(replace(layer, token_dim=token_dim) for layer in layers)
    reports = []
    for b in refs:
        costs = [layer_costs(layer, b, tokens_per_reference) for layer in layers]
        reports.append(CostReport(
            reference_count=b,
            tokens_per_reference=tokens_per_reference,
            steps=steps,
            grca_per_layer=tuple(c[0] for c in costs),
            csa_per_layer=tuple(c[1] for c in costs),
        ))
    return reports


def fitted_slopes(reports: Sequence[CostReport]) -> tuple[float, float]:
    """Least-squares slopes of (GRCA total, CSA total) against B."""
    b = np.array([r.reference_count for r in reports], dtype=np.float64)
    grca = np.array([r.grca_total for r in reports], dtype=np.float64)
    csa = np.array([r.csa_total for r in reports], dtype=np.float64)
    return float(np.polyfit(b, grca, 1)[0]), float(np.polyfit(b, csa, 1)[0])


def instrumented_attention_flops(spec: AttentionLayerSpec, kv_len: int, seed: int = 0) -> int:
    """Flops counted while actually running one attention with these shapes."""
    rng = np.random.default_rng(seed)
    w = AttentionWeights.random(rng, spec.model_dim, spec.attn_dim, spec.context_dim, spec.context_dim, spec.heads)
    x = rng.standard_normal((spec.q_len, spec.model_dim))
    ctx = rng.standard_normal((kv_len, spec.context_dim))
    with count_ops() as counter:
        merged_attention(x, ctx, None, 0.0, w)
    return counter.total


def instrumented_merged_flops(layer: LayerDescriptor, ref_len: int, weights=None, seed: int = 0) -> int:
    """Flops counted while running the reference-merged cross-attention of one layer."""
    rng = np.random.default_rng(seed)
    if weights is None:
        weights = AttentionWeights.random(
            rng, layer.model_dim, layer.attn_dim, layer.token_dim, layer.text_dim, layer.heads
        )
    x = rng.standard_normal((layer.seq_len, layer.model_dim))
    text = rng.standard_normal((layer.text_len, layer.text_dim))
    refs = rng.standard_normal((1, ref_len, layer.token_dim))
    with count_ops() as counter:
        merged_attention(x, text, refs, 0.5, weights)
    return counter.total


def write_csv(reports: Sequence[CostReport], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["B", "grca_flops", "csa_flops"])
        for r in reports:
            writer.writerow([r.reference_count, r.grca_total, r.csa_total])
    return path


def plot(reports: Sequence[CostReport], path: str | Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    b = [r.reference_count for r in reports]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(b, [r.grca_total / 1e9 for r in reports], label="GRCA")
    ax.plot(b, [r.csa_total / 1e9 for r in reports], label="CSA")
    ax.set_xlabel("reference images")
    ax.set_ylabel("GFLOPs per image")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
