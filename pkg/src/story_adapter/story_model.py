"""Stories, frames, run configuration, and their on-disk layout.

Run directory layout::

    <run>/iteration_{i}/frame_{k:03}.png
    <run>/iteration_{i}/metadata.json
    <run>/iteration_{i}/.partial        # only while (or if interrupted while) writing
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from PIL import Image

from .errors import ManifestError, PersistenceError

PARTIAL_SENTINEL = ".partial"
METADATA_FILE = "metadata.json"

INIT_MODES = ("text_only", "external_references")
LAMBDA_MODES = ("linear", "fixed")
NOISE_MODES = ("deterministic", "ancestral")


@dataclass(frozen=True)
class RunConfig:
    iterations: int = 10
    lambda_start: float = 0.3
    lambda_end: float = 0.5
    lambda_mode: str = "linear"
    # only read when lambda_mode == "fixed"
    lambda_value: float = 0.3
    # None defers to the backend's own default (50 for real models, 8 for the toy)
    diffusion_steps: int | None = None
    guidance_scale: float = 7.5
    tokens_per_reference: int = 4
    grca_enabled: bool = True
    init_mode: str = "text_only"
    noise_mode: str = "deterministic"
    workers: int = 1

    def __post_init__(self):
        if not isinstance(self.iterations, int) or self.iterations < 0:
            raise ManifestError("config.iterations", "must be a non-negative integer")
        for name in ("lambda_start", "lambda_end", "lambda_value"):
            value = getattr(self, name)
            if not 0.0 <= float(value) <= 1.0:
                raise ManifestError(f"config.{name}", f"{value} outside [0, 1]")
        if self.lambda_mode not in LAMBDA_MODES:
            raise ManifestError("config.lambda_mode", f"expected one of {LAMBDA_MODES}")
        if self.lambda_mode == "linear" and self.lambda_start > self.lambda_end:
            raise ManifestError("config.lambda_start", "must not exceed lambda_end in linear mode")
        if self.diffusion_steps is not None and self.diffusion_steps < 1:
            raise ManifestError("config.diffusion_steps", "must be positive")
        if self.guidance_scale < 0:
            raise ManifestError("config.guidance_scale", "must be non-negative")
        if self.tokens_per_reference < 1:
            raise ManifestError("config.tokens_per_reference", "must be positive")
        if self.init_mode not in INIT_MODES:
            raise ManifestError("config.init_mode", f"expected one of {INIT_MODES}")
        if self.noise_mode not in NOISE_MODES:
            raise ManifestError("config.noise_mode", f"expected one of {NOISE_MODES}")
        if self.workers < 1:
            raise ManifestError("config.workers", "must be positive")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any], prefix: str = "config") -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ManifestError(f"{prefix}.{unknown[0]}", "unknown config key")
        return cls(**data)


@dataclass(frozen=True)
class StoryManifest:
    prompts: tuple[str, ...]
    title: str = ""
    style_suffix: str = ""
    global_seed: int = 0
    config: RunConfig = field(default_factory=RunConfig)
    # images used as iteration 0 when config.init_mode == "external_references"
    reference_images: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.prompts) == 0:
            raise ManifestError("prompts", "empty prompt list")
        for k, prompt in enumerate(self.prompts):
            if not isinstance(prompt, str) or not prompt.strip():
                raise ManifestError(f"prompts[{k}]", "prompt is empty")
        if not isinstance(self.global_seed, int) or self.global_seed < 0:
            raise ManifestError("seed", "must be an unsigned integer")

    @property
    def length(self) -> int:
        return len(self.prompts)

    def full_prompt(self, k: int) -> str:
        """Prompt for 1-based story index ``k`` with the style suffix applied."""
        prompt = self.prompts[k - 1].strip()
        if self.style_suffix:
            prompt = f"{prompt}, {self.style_suffix.strip()}"
        return prompt

    def to_dict(self) -> dict[str, Any]:
        out = {
            "title": self.title,
            "style_suffix": self.style_suffix,
            "seed": self.global_seed,
            "prompts": list(self.prompts),
            "config": self.config.to_dict(),
        }
        if self.reference_images:
            out["reference_images"] = list(self.reference_images)
        return out

    @classmethod
    def from_dict(cls, data: Any) -> "StoryManifest":
        if not isinstance(data, dict):
            raise ManifestError("<root>", "manifest must be an object")
        if "prompts" not in data:
            raise ManifestError("prompts", "missing required key")
        prompts = data["prompts"]
        if not isinstance(prompts, list):
            raise ManifestError("prompts", "must be an array of strings")
        for k, p in enumerate(prompts):
            if not isinstance(p, str):
                raise ManifestError(f"prompts[{k}]", "must be a string")
        title = data.get("title", "")
        if not isinstance(title, str):
            raise ManifestError("title", "must be a string")
        style = data.get("style_suffix", "") or ""
        if not isinstance(style, str):
            raise ManifestError("style_suffix", "must be a string")
        seed = data.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise ManifestError("seed", "must be an integer")
        config = data.get("config", {}) or {}
        if not isinstance(config, dict):
            raise ManifestError("config", "must be an object")
        refs = data.get("reference_images", []) or []
        if not isinstance(refs, list) or not all(isinstance(r, str) for r in refs):
            raise ManifestError("reference_images", "must be an array of paths")
        try:
            run_config = RunConfig.from_dict(config)
        except TypeError as exc:
            raise ManifestError("config", str(exc)) from exc
        return cls(
            prompts=tuple(prompts),
            title=title,
            style_suffix=style,
            global_seed=seed,
            config=run_config,
            reference_images=tuple(refs),
        )


def load_manifest(path: str | Path) -> StoryManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError("<file>", f"manifest not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError("<file>", f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    manifest = StoryManifest.from_dict(data)
    if manifest.reference_images:
        resolved = tuple(str((path.parent / p).resolve()) for p in manifest.reference_images)
        manifest = dataclasses.replace(manifest, reference_images=resolved)
    return manifest


def save_manifest(manifest: StoryManifest, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(manifest.to_dict(), indent=2) + "\n", encoding="utf-8")
    return path


def quantize_pixels(pixels) -> np.ndarray:
    """Clamp to [0, 1] and snap to the 8-bit grid so PNG round-trips are exact."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 pixels, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("pixels contain non-finite values")
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0) / 255.0


def pixels_to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(pixels * 255.0).astype(np.uint8)


def pixel_digest(pixels: np.ndarray) -> str:
    data = pixels_to_uint8(pixels)
    h = hashlib.sha256()
    h.update(repr(data.shape).encode())
    h.update(data.tobytes())
    return h.hexdigest()


@dataclass(frozen=True, eq=False)
class Frame:
    story_index: int
    iteration: int
    pixels: np.ndarray
    latent_digest: str

    @classmethod
    def from_pixels(cls, story_index: int, iteration: int, pixels) -> "Frame":
        if story_index < 1:
            raise ValueError("story_index is 1-based")
        if iteration < 0:
            raise ValueError("iteration must be >= 0")
        arr = quantize_pixels(pixels)
        arr.setflags(write=False)
        return cls(story_index, iteration, arr, pixel_digest(arr))

    @property
    def digest(self) -> str:
        return self.latent_digest


@dataclass(frozen=True)
class FrameSet:
    iteration: int
    frames: tuple[Frame, ...]

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if not self.frames:
            raise ValueError("a FrameSet needs at least one frame")
        for pos, frame in enumerate(self.frames, start=1):
            if frame.story_index != pos:
                raise ValueError(f"frame at position {pos} has story_index {frame.story_index}")
            if frame.iteration != self.iteration:
                raise ValueError(
                    f"frame {frame.story_index} is from iteration {frame.iteration}, "
                    f"expected {self.iteration}"
                )

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, k: int) -> Frame:
        return self.frames[k]

    @property
    def digests(self) -> list[str]:
        return [f.latent_digest for f in self.frames]

    @property
    def pixels(self) -> np.ndarray:
        return np.stack([f.pixels for f in self.frames])


def iteration_dir(root: str | Path, iteration: int) -> Path:
    return Path(root) / f"iteration_{iteration}"


def frame_filename(k: int) -> str:
    return f"frame_{k:03d}.png"


def save_frame_set(
    fs: FrameSet,
    root: str | Path,
    lambda_used: float | None = None,
    config: RunConfig | dict | None = None,
) -> list[Path]:
    """Write the frames and metadata of one iteration under ``root``.

    A ``.partial`` sentinel exists for the duration of the write and is only
    removed once every file is on disk, so an interrupted write is visible
    to resume logic. Calling twice with the same input rewrites the same bytes.
    """
    out_dir = iteration_dir(root, fs.iteration)
    sentinel = out_dir / PARTIAL_SENTINEL
    if isinstance(config, RunConfig):
        config = config.to_dict()
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        sentinel.touch()
        written = []
        for frame in fs.frames:
            path = out_dir / frame_filename(frame.story_index)
            Image.fromarray(pixels_to_uint8(frame.pixels), mode="RGB").save(path, format="PNG")
            written.append(path)
        metadata = {
            "iteration": fs.iteration,
            "lambda_used": lambda_used,
            "frames": [
                {"index": f.story_index, "file": frame_filename(f.story_index), "digest": f.latent_digest}
                for f in fs.frames
            ],
            "config": config,
        }
        meta_path = out_dir / METADATA_FILE
        meta_path.write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        written.append(meta_path)
        sentinel.unlink()
    except OSError as exc:
        raise PersistenceError(f"cannot write frame set to {out_dir}: {exc}") from exc
    return written


def is_complete(root: str | Path, iteration: int) -> bool:
    d = iteration_dir(root, iteration)
    return (d / METADATA_FILE).is_file() and not (d / PARTIAL_SENTINEL).exists()


def read_metadata(root: str | Path, iteration: int) -> dict[str, Any]:
    path = iteration_dir(root, iteration) / METADATA_FILE
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise PersistenceError(f"cannot read {path}: {exc}") from exc


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def load_frame_set(root: str | Path, iteration: int) -> FrameSet:
    d = iteration_dir(root, iteration)
    if not d.is_dir():
        raise PersistenceError(f"missing iteration directory: {d}")
    if (d / PARTIAL_SENTINEL).exists():
        raise PersistenceError(f"iteration directory was only partially written: {d}")
    meta = read_metadata(root, iteration)
    frames = []
    for entry in meta["frames"]:
        frame = Frame.from_pixels(entry["index"], iteration, load_image(d / entry["file"]))
        if frame.latent_digest != entry["digest"]:
            raise PersistenceError(f"digest mismatch for {d / entry['file']}")
        frames.append(frame)
    return FrameSet(iteration, tuple(frames))


def frame_set_from_images(images: Sequence[str | Path], iteration: int = 0) -> FrameSet:
    return FrameSet(
        iteration,
        tuple(Frame.from_pixels(k, iteration, load_image(p)) for k, p in enumerate(images, start=1)),
    )
