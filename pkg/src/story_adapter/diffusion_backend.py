"""Sampler and denoiser backends.

``sample_frame`` runs one full denoising trajectory for one story frame. A
backend supplies the noise predictor for a single (conditional or
unconditional) branch; classifier-free guidance and the update rule live
here so every backend gets exactly the same sampler.

The update at step ``j`` (counting down from ``J-1`` to ``0``) is::

    I_{j-1} = (I_j - (1 - a_j) * eps / sqrt(1 - a_j)) / sqrt(a_j) + sigma_j * z

with ``z = 0`` on the final step. ``a_j`` are cumulative signal fractions,
so the deterministic update maps the current latent to the predicted clean
latent at every step.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import SamplingError
from .grca_attention import AttentionWeights, merged_attention
from .reference_encoder import ProjectionWeights, ReferenceTokenSet
from .story_model import Frame

TOY_LATENT_SHAPE = (4, 32, 32)
TOY_MODEL_DIM = 64
TOY_LAYERS = 2
TOY_TEXT_LEN = 8
TOY_TEXT_DIM = 32
TOY_TOKEN_DIM = 32
TOY_HEADS = 4
TOY_DEFAULT_STEPS = 8
EXTERNAL_DEFAULT_STEPS = 50

_COSINE_OFFSET = 0.008


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    alphas: np.ndarray
    sigmas: np.ndarray
    mode: str = "deterministic"

    def __post_init__(self):
        if self.alphas.shape != self.sigmas.shape or self.alphas.ndim != 1:
            raise ValueError("alphas and sigmas must be 1-D arrays of equal length")
        if not np.all((self.alphas > 0) & (self.alphas < 1)):
            raise ValueError("alphas must lie in (0, 1)")
        if np.any(np.diff(self.alphas) >= 0):
            raise ValueError("alphas must be strictly decreasing in the step index")
        if np.any(self.sigmas < 0):
            raise ValueError("sigmas must be non-negative")

    @property
    def steps(self) -> int:
        return len(self.alphas)


def make_noise_schedule(steps: int, mode: str = "deterministic") -> NoiseSchedule:
    """Cosine-spaced cumulative schedule with ``steps`` entries.

    ``alpha_j = f(t_j) / f(0)`` with ``f(t) = cos((t + 0.008) / 1.008 * pi/2)**2``
    at ``t_j = (j + 1) / (steps + 1)``; the offset grid keeps every alpha
    strictly inside (0, 1). Ancestral mode uses the DDPM posterior scale
    ``sigma_j = sqrt(1 - alpha_j / alpha_{j-1})``; ``sigma_0`` is zero because
    the last step adds no noise.
    """
    if isinstance(steps, bool) or not isinstance(steps, (int, np.integer)) or steps < 1:
        raise ValueError(f"steps must be a positive integer, got {steps!r}")
    if mode not in ("deterministic", "ancestral"):
        raise ValueError(f"unknown noise mode {mode!r}")

    def f(t):
        return np.cos((t + _COSINE_OFFSET) / (1 + _COSINE_OFFSET) * np.pi / 2) ** 2

    t = np.arange(1, steps + 1) / (steps + 1)
    alphas = f(t) / f(0.0)
    sigmas = np.zeros(steps)
    if mode == "ancestral":
        sigmas[1:] = np.sqrt(1.0 - alphas[1:] / alphas[:-1])
    return NoiseSchedule(alphas, sigmas, mode)


def update_step(latent: np.ndarray, eps: np.ndarray, alpha: float, sigma: float, z) -> np.ndarray:
    out = (1.0 / np.sqrt(alpha)) * (latent - (1.0 - alpha) * eps / np.sqrt(1.0 - alpha))
    if z is not None:
        out = out + sigma * z
    return out


@dataclass(frozen=True)
class LayerDescriptor:
    seq_len: int
    model_dim: int
    attn_dim: int
    heads: int
    text_len: int
    text_dim: int
    token_dim: int


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    latent_shape: tuple[int, ...]
    layers: tuple[LayerDescriptor, ...]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a backend descriptor needs at least one attention layer")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "latent_shape": list(self.latent_shape),
            "layers": [vars(layer).copy() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BackendDescriptor":
        try:
            return cls(
                name=str(data["name"]),
                latent_shape=tuple(int(x) for x in data["latent_shape"]),
                layers=tuple(LayerDescriptor(**layer) for layer in data["layers"]),
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"invalid backend descriptor: {exc}") from exc


@dataclass(frozen=True, eq=False)
class DenoiserContext:
    text_tokens: np.ndarray
    null_text_tokens: np.ndarray
    refs: ReferenceTokenSet | None = None
    lam: float = 0.0
    guidance_scale: float = 7.5

    def unconditional(self) -> "DenoiserContext":
        """Empty-text branch with the reference contribution zeroed out."""
        refs = None if self.refs is None else self.refs.zeros_like()
        return DenoiserContext(
            self.null_text_tokens, self.null_text_tokens, refs, self.lam, self.guidance_scale
        )


class DiffusionBackend(Protocol):
    descriptor: BackendDescriptor
    default_steps: int

    def encode_text(self, prompt: str) -> np.ndarray: ...

    def predict_noise(
        self, latent: np.ndarray, step: int, alpha: float, text_tokens, refs, lam: float
    ) -> np.ndarray: ...

    def decode(self, latent: np.ndarray) -> np.ndarray: ...


def make_context(backend, prompt: str, refs=None, lam: float = 0.0, guidance_scale: float = 7.5):
    return DenoiserContext(
        backend.encode_text(prompt), backend.encode_text(""), refs, lam, guidance_scale
    )


def guided_noise(backend, latent, step: int, alpha: float, ctx: DenoiserContext):
    """Classifier-free guided prediction ``eps_u + s * (eps_c - eps_u)``.

    Returns ``(eps, eps_uncond, eps_cond)``.
    """
    uncond = ctx.unconditional()
    eps_u = backend.predict_noise(latent, step, alpha, uncond.text_tokens, uncond.refs, ctx.lam)
    eps_c = backend.predict_noise(latent, step, alpha, ctx.text_tokens, ctx.refs, ctx.lam)
    return eps_u + ctx.guidance_scale * (eps_c - eps_u), eps_u, eps_c


def frame_rng(seed) -> np.random.Generator:
    """Generator for one trajectory. ``seed`` is an int or a tuple like (global_seed, k, i)."""
    entropy = list(seed) if isinstance(seed, (tuple, list)) else [seed]
    return np.random.default_rng(np.random.SeedSequence([int(x) for x in entropy]))


def sample_frame(
    seed,
    ctx: DenoiserContext,
    sched: NoiseSchedule,
    backend,
    story_index: int = 1,
    iteration: int = 0,
    trace: Callable[[dict], None] | None = None,
) -> Frame:
    """Run ``sched.steps`` guided denoising updates from fresh noise and decode.

    ``trace``, when given, receives a dict per step with the latent before
    the update, the guided and per-branch predictions, and the latent after.
    """
    if ctx.refs is not None:
        expected = backend.descriptor.layers[0].token_dim
        if ctx.refs.token_dim != expected:
            raise ValueError(f"reference token dim {ctx.refs.token_dim} != backend token dim {expected}")
    rng = frame_rng(seed)
    latent = rng.standard_normal(backend.descriptor.latent_shape)
    for j in reversed(range(sched.steps)):
        alpha = float(sched.alphas[j])
        sigma = float(sched.sigmas[j])
        eps, eps_u, eps_c = guided_noise(backend, latent, j, alpha, ctx)
        z = rng.standard_normal(latent.shape) if (sched.mode == "ancestral" and j > 0) else None
        new = update_step(latent, eps, alpha, sigma, z)
        if not np.all(np.isfinite(new)):
            raise SamplingError(j)
        if trace is not None:
            trace({"step": j, "latent": latent, "eps": eps, "eps_uncond": eps_u,
                   "eps_cond": eps_c, "z": z, "next": new})
        latent = new
    return Frame.from_pixels(story_index, iteration, backend.decode(latent))


_WORD = re.compile(r"[a-z0-9']+")


def _hash_seed(text: str, salt: str) -> int:
    return int.from_bytes(hashlib.blake2b(f"{salt}:{text}".encode(), digest_size=8).digest(), "little")


class ToyTextEncoder:
    """Bag-of-words token embedder: each word hashes to a fixed Gaussian vector.

    Prompts are lower-cased, split into words, truncated or padded to
    ``length`` tokens. The empty prompt is all padding.
    """

    def __init__(self, length: int = TOY_TEXT_LEN, dim: int = TOY_TEXT_DIM, salt: str = "toy-text"):
        self.length = length
        self.dim = dim
        self.salt = salt

    def word_vector(self, word: str) -> np.ndarray:
        rng = np.random.default_rng(_hash_seed(word, self.salt))
        return rng.standard_normal(self.dim)

    def __call__(self, prompt: str) -> np.ndarray:
        words = _WORD.findall(prompt.lower())[: self.length]
        words += ["<pad>"] * (self.length - len(words))
        return np.stack([self.word_vector(w) for w in words])


class ToyBackend:
    """Small fixed-weight latent denoiser for desk-scale runs.

    Per branch: latent pixels become tokens, are RMS-normalised and lifted
    to ``model_dim`` by a linear mixing layer on top of a fixed positional
    embedding; each attention layer adds ``merged_attention`` as a residual;
    an output projection and ``tanh`` give the predicted clean latent, which
    is converted to a noise prediction for the current ``alpha``. The
    decoder is a per-pixel linear map to RGB through a sigmoid.

    The toy also ships its own reference adapter (``image_projection``): the
    value path of every reference branch is built so that an evenly spread
    read over the reference tokens lands, after output projection, readout
    and decoding, on the mean centred colour of the reference frames as
    seen by ``ToyImageEncoder(encoder_grid)``, scaled by
    ``reference_strength``. That stands in for trained adapter weights,
    which map an image prompt back to matching content. Everything is drawn
    once from ``seed``.
    """

    default_steps = TOY_DEFAULT_STEPS

    def __init__(
        self,
        seed: int = 0,
        latent_shape: tuple[int, int, int] = TOY_LATENT_SHAPE,
        model_dim: int = TOY_MODEL_DIM,
        n_layers: int = TOY_LAYERS,
        heads: int = TOY_HEADS,
        text_len: int = TOY_TEXT_LEN,
        text_dim: int = TOY_TEXT_DIM,
        token_dim: int = TOY_TOKEN_DIM,
        encoder_grid: int = 4,
        mix_scale: float = 2.0,
        decoder_gain: float = 0.2,
        reference_strength: float = 3.0,
    ):
        self.seed = seed
        self.latent_shape = tuple(latent_shape)
        self.model_dim = model_dim
        self.mix_scale = mix_scale
        self.decoder_gain = decoder_gain
        self.encoder_grid = encoder_grid
        self.embed_dim = 3 * encoder_grid * encoder_grid
        if token_dim > self.embed_dim:
            raise ValueError("token_dim must not exceed the encoder embedding dim")
        c, h, w = self.latent_shape
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x70F]))

        def glorot(fan_in, fan_out):
            return rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)

        self.w_in = glorot(c, model_dim)
        self.pos = rng.standard_normal((h * w, model_dim))
        self.w_out = glorot(model_dim, c)
        self.w_dec = glorot(c, 3)

        # orthonormal token basis whose span contains the mean-colour readout
        colour = np.zeros((3, self.embed_dim))
        for ch in range(3):
            colour[ch, ch::3] = 1.0 / (encoder_grid * encoder_grid)
        basis, _ = np.linalg.qr(np.hstack([colour.T, rng.standard_normal((self.embed_dim, token_dim - 3))]))
        self._token_basis = basis
        readout = self.w_out @ self.w_dec

        self.layers = []
        for _ in range(n_layers):
            w_o = glorot(model_dim, model_dim)
            colour_to_attn = reference_strength * np.linalg.pinv(w_o @ readout)
            self.layers.append(AttentionWeights(
                w_q=glorot(model_dim, model_dim),
                w_k=glorot(token_dim, model_dim),
                w_v=basis.T @ colour.T @ colour_to_attn,
                w_k_text=glorot(text_dim, model_dim),
                w_v_text=glorot(text_dim, model_dim),
                w_o=w_o,
                heads=heads,
            ))
        for arr in (self.w_in, self.pos, self.w_out, self.w_dec, self._token_basis):
            arr.setflags(write=False)
        self.text_encoder = ToyTextEncoder(text_len, text_dim)
        layer = LayerDescriptor(
            seq_len=h * w, model_dim=model_dim, attn_dim=model_dim, heads=heads,
            text_len=text_len, text_dim=text_dim, token_dim=token_dim,
        )
        self.descriptor = BackendDescriptor("toy", self.latent_shape, (layer,) * n_layers)

    def image_projection(self, tokens_per_reference: int) -> ProjectionWeights:
        """Adapter projection: ``n`` token blocks that average to the shared basis.

        Each block is the basis plus a seeded perturbation; perturbations sum
        to zero across blocks, so the mean token of a reference does not
        depend on ``n``.
        """
        n = tokens_per_reference
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xADA, n]))
        noise = rng.standard_normal((n,) + self._token_basis.shape) / np.sqrt(self.embed_dim)
        noise -= noise.mean(axis=0)
        blocks = [self._token_basis + noise[t] for t in range(n)]
        return ProjectionWeights(np.hstack(blocks), n, self._token_basis.shape[1])

    def encode_text(self, prompt: str) -> np.ndarray:
        return self.text_encoder(prompt)

    def _tokens(self, latent: np.ndarray) -> np.ndarray:
        c = self.latent_shape[0]
        return latent.reshape(c, -1).T

    def predict_clean(self, latent: np.ndarray, text_tokens, refs, lam: float) -> np.ndarray:
        if latent.shape != self.latent_shape:
            raise ValueError(f"latent shape {latent.shape} != {self.latent_shape}")
        x = self._tokens(latent)
        x = x / np.sqrt(np.mean(x * x) + 1e-12)
        h = self.pos + self.mix_scale * (x @ self.w_in)
        for weights in self.layers:
            h = h + merged_attention(h, text_tokens, refs, lam, weights)
        x0 = np.tanh(h @ self.w_out)
        return x0.T.reshape(self.latent_shape)

    def predict_noise(self, latent, step, alpha, text_tokens, refs, lam):
        x0 = self.predict_clean(latent, text_tokens, refs, lam)
        return (latent - np.sqrt(alpha) * x0) / np.sqrt(1.0 - alpha)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        _, h, w = self.latent_shape
        rgb = self._tokens(latent) @ self.w_dec
        return (1.0 / (1.0 + np.exp(-self.decoder_gain * rgb))).reshape(h, w, 3)


def toy_denoiser(backend: ToyBackend, latent, step: int, alpha: float, ctx: DenoiserContext):
    """Single conditional-branch noise prediction of the toy backend."""
    return backend.predict_noise(latent, step, alpha, ctx.text_tokens, ctx.refs, ctx.lam)


@dataclass
class ExternalBackend:
    """Adapter for an external latent-diffusion model.

    ``unet(latent, step, alpha, text_tokens, attention_hook)`` must return a
    noise prediction and call ``attention_hook(features, weights)`` in place
    of each text cross-attention layer it wants conditioned on references;
    the hook returns ``merged_attention(features, text_tokens, refs, lam,
    weights)``. ``text_encoder(prompt)`` and ``decoder(latent)`` complete the
    model. No weights ship with this package.
    """

    unet: Callable
    text_encoder: Callable[[str], np.ndarray]
    decoder: Callable[[np.ndarray], np.ndarray]
    descriptor: BackendDescriptor
    default_steps: int = EXTERNAL_DEFAULT_STEPS
    hook_calls: list = field(default_factory=list, repr=False)

    def encode_text(self, prompt: str) -> np.ndarray:
        return np.asarray(self.text_encoder(prompt), dtype=np.float64)

    def predict_noise(self, latent, step, alpha, text_tokens, refs, lam):
        def hook(features, weights: AttentionWeights):
            self.hook_calls.append((step, np.shape(features), None if refs is None else refs.length))
            return merged_attention(features, text_tokens, refs, lam, weights)

        eps = np.asarray(self.unet(latent, step, alpha, text_tokens, hook), dtype=np.float64)
        if eps.shape != latent.shape:
            raise ValueError(f"unet returned shape {eps.shape}, expected {latent.shape}")
        return eps

    def decode(self, latent):
        return np.asarray(self.decoder(latent), dtype=np.float64)


def toy_descriptor(seq_len: int | None = None) -> BackendDescriptor:
    """Descriptor of the default toy backend, optionally rescaled to ``seq_len`` tokens."""
    base = ToyBackend().descriptor
    if seq_len is None:
        return base
    layers = tuple(
        LayerDescriptor(seq_len, l.model_dim, l.attn_dim, l.heads, l.text_len, l.text_dim, l.token_dim)
        for l in base.layers
    )
    return BackendDescriptor(base.name, base.latent_shape, layers)


def available_backends() -> Sequence[str]:
    return ("toy",)
