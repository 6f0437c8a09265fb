"""Story-level orchestration: initialise from text, then refine the whole
story for ``config.iterations`` rounds, each round conditioned on every
frame of the round before.

A run directory holds everything needed to resume or evaluate it::

    <run>/manifest.json        effective manifest, config included
    <run>/backend.json         backend descriptor
    <run>/projection.npy       reference projection weights
    <run>/iteration_{i}/...    frames + metadata (see story_model)
    <run>/run_summary.json     per-iteration lambda, wall time, metrics
"""

from __future__ import annotations

import json
import logging
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import metrics as metrics_mod
from .diffusion_backend import DenoiserContext, make_noise_schedule, sample_frame
from .errors import ResumeError, StoryAdapterError
from .reference_encoder import ProjectionWeights, ReferenceTokenSet, ToyImageEncoder, build_reference_tokens
from .story_model import (
    PARTIAL_SENTINEL,
    Frame,
    FrameSet,
    RunConfig,
    StoryManifest,
    frame_set_from_images,
    is_complete,
    load_frame_set,
    load_manifest,
    save_frame_set,
    save_manifest,
)
from .weight_schedule import schedule_for

log = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
BACKEND_FILE = "backend.json"
PROJECTION_FILE = "projection.npy"
SUMMARY_FILE = "run_summary.json"


class IterationError(StoryAdapterError):
    def __init__(self, iteration: int, failures: dict[int, Exception]):
        self.iteration = iteration
        self.failures = failures
        detail = ", ".join(f"frame {k}: {exc}" for k, exc in sorted(failures.items()))
        super().__init__(f"iteration {iteration} failed ({detail})")


@dataclass
class RunState:
    manifest: StoryManifest
    config: RunConfig
    run_dir: Path | None = None
    completed: list[int] = field(default_factory=list)
    reference_iteration: int | None = None
    frame_sets: dict[int, FrameSet] = field(default_factory=dict)
    summary: list[dict] = field(default_factory=list)

    @property
    def final(self) -> FrameSet:
        return self.frame_sets[self.completed[-1]]


def frame_seed(manifest: StoryManifest, k: int, iteration: int) -> tuple[int, int, int]:
    return (manifest.global_seed, k, iteration)


def steps_for(config: RunConfig, backend) -> int:
    return config.diffusion_steps or backend.default_steps


def projection_for(manifest: StoryManifest, config: RunConfig, backend, encoder) -> ProjectionWeights:
    """The backend's own adapter projection if it has one, else a seeded random one."""
    if hasattr(backend, "image_projection"):
        return backend.image_projection(config.tokens_per_reference)
    token_dim = backend.descriptor.layers[0].token_dim
    return ProjectionWeights.from_seed(manifest.global_seed, encoder.dim, config.tokens_per_reference, token_dim)


def _generate(
    iteration: int,
    manifest: StoryManifest,
    config: RunConfig,
    backend,
    refs: ReferenceTokenSet | None,
    lam: float,
) -> FrameSet:
    sched = make_noise_schedule(steps_for(config, backend), config.noise_mode)
    null_text = backend.encode_text("")

    def one(k: int):
        ctx = DenoiserContext(
            backend.encode_text(manifest.full_prompt(k)), null_text, refs, lam, config.guidance_scale
        )
        return sample_frame(frame_seed(manifest, k, iteration), ctx, sched, backend, k, iteration)

    indices = range(1, manifest.length + 1)
    results, failures = {}, {}
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        futures = {k: pool.submit(one, k) for k in indices}
        for k, fut in futures.items():
            try:
                results[k] = fut.result()
            except Exception as exc:
                failures[k] = exc
    if failures:
        raise IterationError(iteration, failures)
    return FrameSet(iteration, tuple(results[k] for k in indices))


def initialize(
    manifest: StoryManifest,
    config: RunConfig,
    backend,
    run_dir: str | Path | None = None,
    references: FrameSet | None = None,
) -> FrameSet:
    """Iteration 0: text-only generation, or ingest supplied reference images."""
    if config.init_mode == "external_references":
        if references is None:
            if not manifest.reference_images:
                raise StoryAdapterError("init_mode=external_references needs reference images")
            references = frame_set_from_images(manifest.reference_images, 0)
        if len(references) != manifest.length:
            raise StoryAdapterError(
                f"{len(references)} reference images supplied for a story of length {manifest.length}"
            )
        fs = frame_set_from_pixels(references, 0)
    else:
        fs = _generate(0, manifest, config, backend, None, 0.0)
    if run_dir is not None:
        save_frame_set(fs, run_dir, None, config)
    return fs


def frame_set_from_pixels(fs: FrameSet, iteration: int = 0) -> FrameSet:
    return FrameSet(iteration, tuple(Frame.from_pixels(f.story_index, iteration, f.pixels) for f in fs.frames))


def run_iteration(
    i: int,
    prev: FrameSet,
    lam: float,
    manifest: StoryManifest,
    config: RunConfig,
    backend,
    encoder=None,
    projection: ProjectionWeights | None = None,
    run_dir: str | Path | None = None,
) -> FrameSet:
    """Regenerate every frame with references built once from all of ``prev``."""
    if prev.iteration != i - 1:
        raise ValueError(f"iteration {i} needs the frames of iteration {i - 1}, got {prev.iteration}")
    if len(prev) != manifest.length:
        raise ValueError(f"previous iteration has {len(prev)} frames, story has {manifest.length}")
    refs = None
    if config.grca_enabled:
        encoder = encoder or ToyImageEncoder()
        projection = projection or projection_for(manifest, config, backend, encoder)
        refs = build_reference_tokens(prev, encoder, projection)
    fs = _generate(i, manifest, config, backend, refs, lam)
    if run_dir is not None:
        save_frame_set(fs, run_dir, lam, _metadata_config(config, prev))
    return fs


def _metadata_config(config: RunConfig, prev: FrameSet | None) -> dict:
    snapshot = config.to_dict()
    if prev is not None:
        snapshot["reference_iteration"] = prev.iteration
        snapshot["reference_digests"] = prev.digests if config.grca_enabled else []
    return snapshot


def _write_run_files(run_dir: Path, manifest: StoryManifest, config: RunConfig, backend, projection) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    effective = StoryManifest(
        manifest.prompts, manifest.title, manifest.style_suffix, manifest.global_seed, config,
        manifest.reference_images,
    )
    save_manifest(effective, run_dir / MANIFEST_FILE)
    descriptor = backend.descriptor.to_dict()
    descriptor["diffusion_steps"] = steps_for(config, backend)
    (run_dir / BACKEND_FILE).write_text(json.dumps(descriptor, indent=2) + "\n", encoding="utf-8")
    if projection is not None:
        projection.save(run_dir / PROJECTION_FILE)


def _summary_row(fs: FrameSet, lam, seconds: float, manifest: StoryManifest, with_metrics: bool) -> dict:
    row = {"iteration": fs.iteration, "lambda": lam, "wall_time_s": round(seconds, 4)}
    if with_metrics:
        report = metrics_mod.evaluate(fs, [manifest.full_prompt(k) for k in range(1, len(fs) + 1)])
        row.update(clip_t=report.clip_t, accs=report.accs, afid=report.afid)
    return row


def _write_summary(state: RunState) -> None:
    if state.run_dir is None:
        return
    payload = {
        "title": state.manifest.title,
        "story_length": state.manifest.length,
        "completed_iterations": state.completed,
        "iterations": state.summary,
    }
    (state.run_dir / SUMMARY_FILE).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def run(
    manifest: StoryManifest,
    config: RunConfig | None = None,
    backend=None,
    encoder=None,
    run_dir: str | Path | None = None,
    with_metrics: bool = True,
    on_iteration: Callable[[FrameSet, RunState], None] | None = None,
    projection: ProjectionWeights | None = None,
    _start: RunState | None = None,
) -> RunState:
    """Initialise, then refine for ``config.iterations`` rounds.

    ``on_iteration`` is called after each iteration is persisted; an
    exception raised from it stops the run after that iteration, which is
    how interruption is simulated in tests.
    """
    from .diffusion_backend import ToyBackend

    config = config or manifest.config
    backend = backend or ToyBackend()
    encoder = encoder or ToyImageEncoder()
    run_dir = Path(run_dir) if run_dir is not None else None
    if projection is None and config.grca_enabled:
        projection = projection_for(manifest, config, backend, encoder)
    schedule = schedule_for(config)

    if _start is None:
        state = RunState(manifest, config, run_dir)
        if run_dir is not None:
            _write_run_files(run_dir, manifest, config, backend, projection)
        t0 = time.perf_counter()
        fs = initialize(manifest, config, backend, run_dir)
        _record(state, fs, None, time.perf_counter() - t0, with_metrics, on_iteration)
    else:
        state = _start

    prev = state.frame_sets[state.completed[-1]]
    for i in range(prev.iteration + 1, config.iterations + 1):
        lam = schedule[i - 1]
        t0 = time.perf_counter()
        fs = run_iteration(i, prev, lam, manifest, config, backend, encoder, projection, run_dir)
        state.reference_iteration = prev.iteration
        _record(state, fs, lam, time.perf_counter() - t0, with_metrics, on_iteration)
        log.info("iteration %d done (lambda=%.4f)", i, lam)
        prev = fs
    return state


def _record(state: RunState, fs: FrameSet, lam, seconds, with_metrics, on_iteration) -> None:
    state.completed.append(fs.iteration)
    state.frame_sets[fs.iteration] = fs
    state.summary.append(_summary_row(fs, lam, seconds, state.manifest, with_metrics))
    _write_summary(state)
    if on_iteration is not None:
        on_iteration(fs, state)


def completed_iterations(run_dir: str | Path) -> list[int]:
    """Contiguous completed iterations from 0; stops at the first gap."""
    done = []
    i = 0
    while is_complete(run_dir, i):
        done.append(i)
        i += 1
    return done


def partial_iterations(run_dir: str | Path) -> list[int]:
    out = []
    for d in sorted(Path(run_dir).glob("iteration_*")):
        if (d / PARTIAL_SENTINEL).exists():
            out.append(int(d.name.split("_", 1)[1]))
    return sorted(out)


def load_run_manifest(run_dir: str | Path) -> StoryManifest:
    path = Path(run_dir) / MANIFEST_FILE
    if not path.is_file():
        raise ResumeError(f"{run_dir} is not a run directory (no {MANIFEST_FILE})")
    return load_manifest(path)


def resume(
    run_dir: str | Path,
    backend=None,
    encoder=None,
    repair: bool = False,
    with_metrics: bool = True,
    on_iteration=None,
    config: RunConfig | None = None,
) -> RunState:
    """Continue a run from its last completed iteration.

    Refuses to touch a run containing a partially written iteration unless
    ``repair`` is set, in which case that iteration and everything after it
    is discarded and regenerated.
    """
    from .diffusion_backend import ToyBackend

    run_dir = Path(run_dir)
    manifest = load_run_manifest(run_dir)
    config = config or manifest.config
    backend = backend or ToyBackend()
    partial = partial_iterations(run_dir)
    if partial and not repair:
        raise ResumeError(
            f"iteration {partial[0]} in {run_dir} was only partially written; rerun with repair to regenerate it"
        )
    done = completed_iterations(run_dir)
    for d in run_dir.glob("iteration_*"):
        idx = int(d.name.split("_", 1)[1])
        if idx not in done or idx > config.iterations:
            shutil.rmtree(d)
    if not done:
        return run(manifest, config, backend, encoder, run_dir, with_metrics, on_iteration)

    state = RunState(manifest, config, run_dir)
    summary_path = run_dir / SUMMARY_FILE
    old_rows = {}
    if summary_path.is_file():
        old_rows = {r["iteration"]: r for r in json.loads(summary_path.read_text())["iterations"]}
    for i in done:
        if i > config.iterations:
            break
        fs = load_frame_set(run_dir, i)
        state.completed.append(i)
        state.frame_sets[i] = fs
        state.summary.append(old_rows.get(i, {"iteration": i}))
    if len(state.completed) > 1:
        state.reference_iteration = state.completed[-2]
    projection = None
    if config.grca_enabled and (run_dir / PROJECTION_FILE).is_file():
        projection = ProjectionWeights.load(run_dir / PROJECTION_FILE)
    log.info("resuming %s after iteration %d", run_dir, state.completed[-1])
    return run(
        manifest, config, backend, encoder, run_dir, with_metrics, on_iteration,
        projection=projection, _start=state,
    )
