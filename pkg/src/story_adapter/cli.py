"""Command-line entry point: ``story-adapter {run,resume,eval,cost,grid}``.

Config precedence, lowest first: manifest ``config`` object, environment
variables ``STORY_ADAPTER_<FLAG>`` (flag name upper-cased, dashes as
underscores, e.g. ``STORY_ADAPTER_LAMBDA_START=0.2``), command-line flags.

Exit codes: 0 success, 1 user error, 2 internal error. Failures print one
JSON line ``{"error": ..., "message": ...}`` to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import importlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import cost_model, metrics, pipeline
from .diffusion_backend import BackendDescriptor, ToyBackend, toy_descriptor
from .errors import ManifestError, PersistenceError, ResumeError
from .reference_encoder import ToyImageEncoder
from .story_model import RunConfig, load_frame_set, load_manifest, pixels_to_uint8

ENV_PREFIX = "STORY_ADAPTER_"

EXIT_OK = 0
EXIT_USER = 1
EXIT_INTERNAL = 2

# flag dest -> (RunConfig field, parser)
_OVERRIDES = {
    "iterations": ("iterations", int),
    "lambda_start": ("lambda_start", float),
    "lambda_end": ("lambda_end", float),
    "lambda_mode": ("lambda_mode", str),
    "lambda_value": ("lambda_value", float),
    "steps": ("diffusion_steps", int),
    "guidance": ("guidance_scale", float),
    "tokens_per_reference": ("tokens_per_reference", int),
    "init_mode": ("init_mode", str),
    "noise_mode": ("noise_mode", str),
    "workers": ("workers", int),
}

_ENV_NAMES = {
    "lambda_value": "LAMBDA",
    "no_grca": "NO_GRCA",
    "seed": "SEED",
}


class UserError(Exception):
    pass


def _env_name(dest: str) -> str:
    return ENV_PREFIX + _ENV_NAMES.get(dest, dest.upper())


def _truthy(value: str) -> bool:
    return value.strip().lower() in ("1", "true", "yes", "on")


def effective_config(base: RunConfig, args: argparse.Namespace, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    changes = {}
    for dest, (field_name, parse) in _OVERRIDES.items():
        env = environ.get(_env_name(dest))
        if env is not None:
            try:
                changes[field_name] = parse(env)
            except ValueError as exc:
                raise UserError(f"{_env_name(dest)}: {exc}") from exc
    if _truthy(environ.get(_env_name("no_grca"), "0")):
        changes["grca_enabled"] = False
    for dest, (field_name, _) in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            changes[field_name] = value
    if getattr(args, "no_grca", False):
        changes["grca_enabled"] = False
    if getattr(args, "lambda_value", None) is not None and getattr(args, "lambda_mode", None) is None:
        changes.setdefault("lambda_mode", "fixed")
    return base.replace(**changes)


def make_backend(spec: str | None):
    """``toy`` (default) or ``module:factory`` returning a backend object."""
    if spec in (None, "", "toy"):
        return ToyBackend()
    if ":" not in spec:
        raise UserError(f"unknown backend {spec!r}; use 'toy' or 'module:factory'")
    module_name, attr = spec.split(":", 1)
    try:
        factory = getattr(importlib.import_module(module_name), attr)
    except (ImportError, AttributeError) as exc:
        raise UserError(f"cannot load backend {spec!r}: {exc}") from exc
    return factory()


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--iterations", type=int, help="refinement rounds after initialisation")
    p.add_argument("--lambda-start", dest="lambda_start", type=float)
    p.add_argument("--lambda-end", dest="lambda_end", type=float)
    p.add_argument("--lambda-mode", dest="lambda_mode", choices=("linear", "fixed"))
    p.add_argument("--lambda", dest="lambda_value", type=float, help="value for --lambda-mode fixed")
    p.add_argument("--steps", type=int, help="denoising steps per frame")
    p.add_argument("--guidance", type=float, help="classifier-free guidance scale")
    p.add_argument("--tokens-per-reference", dest="tokens_per_reference", type=int)
    p.add_argument("--no-grca", dest="no_grca", action="store_true", help="disable reference attention")
    p.add_argument("--init-mode", dest="init_mode", choices=("text_only", "external_references"))
    p.add_argument("--noise-mode", dest="noise_mode", choices=("deterministic", "ancestral"))
    p.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="story-adapter", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="generate a story and refine it")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="run directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--backend", default=None)
    p.add_argument("--no-metrics", dest="no_metrics", action="store_true")
    _add_config_flags(p)

    p = sub.add_parser("resume", help="continue an interrupted run")
    p.add_argument("--out", required=True, type=Path, help="run directory")
    p.add_argument("--repair", action="store_true", help="regenerate partially written iterations")
    p.add_argument("--backend", default=None)
    p.add_argument("--workers", type=int)
    p.add_argument("--no-metrics", dest="no_metrics", action="store_true")

    p = sub.add_parser("eval", help="compute metrics for every iteration of a run")
    p.add_argument("--out", required=True, type=Path, help="run directory")

    p = sub.add_parser("cost", help="attention-cost sweep over reference counts")
    p.add_argument("--b-max", dest="b_max", type=int, default=100)
    p.add_argument("--descriptor", type=Path, help="backend descriptor JSON (default: toy)")
    p.add_argument("--seq-len", dest="seq_len", type=int, help="override per-layer query length")
    p.add_argument("--tokens-per-reference", dest="tokens_per_reference", type=int, default=4)
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--no-plot", dest="no_plot", action="store_true")

    p = sub.add_parser("grid", help="contact sheet: rows = iterations, columns = frames")
    p.add_argument("--run", required=True, type=Path)
    p.add_argument("--iterations", type=str, default=None, help="comma-separated, default all")
    p.add_argument("--out", required=True, type=Path)
    return parser


def cmd_run(args) -> int:
    manifest = load_manifest(args.manifest)
    config = effective_config(manifest.config, args)
    seed = args.seed if args.seed is not None else os.environ.get(_env_name("seed"))
    manifest = dataclasses.replace(manifest, config=config)
    if seed is not None:
        manifest = dataclasses.replace(manifest, global_seed=int(seed))
    backend = make_backend(args.backend or os.environ.get(ENV_PREFIX + "BACKEND"))
    print(f"story {manifest.title!r}: {manifest.length} frames, {config.iterations} iterations")
    state = pipeline.run(
        manifest, config, backend, ToyImageEncoder(), args.out,
        with_metrics=not args.no_metrics, on_iteration=_progress,
    )
    _final_summary(state)
    return EXIT_OK


def cmd_resume(args) -> int:
    manifest = pipeline.load_run_manifest(args.out)
    config = manifest.config
    if args.workers is not None:
        config = config.replace(workers=args.workers)
    state = pipeline.resume(
        args.out, make_backend(args.backend), repair=args.repair,
        with_metrics=not args.no_metrics, on_iteration=_progress, config=config,
    )
    _final_summary(state)
    return EXIT_OK


def _progress(fs, state) -> None:
    row = state.summary[-1]
    lam = "-" if row.get("lambda") is None else f"{row['lambda']:.4f}"
    extra = ""
    if row.get("accs") is not None:
        extra = f" accs={row['accs']:.4f} clip_t={row['clip_t']:.4f}"
    print(f"iteration {fs.iteration:>3} lambda={lam}{extra} ({row.get('wall_time_s', 0):.2f}s)", flush=True)


def _final_summary(state) -> None:
    row = state.summary[-1]
    parts = [f"{k}={row[k]:.4f}" for k in ("clip_t", "accs", "afid") if row.get(k) is not None]
    print(f"final iteration {state.completed[-1]}: " + (" ".join(parts) or "done"))


def cmd_eval(args) -> int:
    manifest = pipeline.load_run_manifest(args.out)
    done = pipeline.completed_iterations(args.out)
    if not done:
        raise UserError(f"no completed iterations in {args.out}")
    prompts = [manifest.full_prompt(k) for k in range(1, manifest.length + 1)]
    story_id = manifest.title or Path(args.out).name
    rows = []
    for i in done:
        report = metrics.evaluate(load_frame_set(args.out, i), prompts, story_id=story_id)
        rows.extend(report.per_story)
        afid = "-" if report.afid is None else f"{report.afid:.4f}"
        accs = "-" if report.accs is None else f"{report.accs:.4f}"
        print(f"iteration {i:>3} clip_t={report.clip_t:.4f} accs={accs} afid={afid}")
    metrics.write_report(rows, Path(args.out) / "metrics.csv", Path(args.out) / "metrics.json")
    return EXIT_OK


def cmd_cost(args) -> int:
    if args.b_max < 1:
        raise UserError("--b-max must be >= 1")
    if args.descriptor is not None:
        try:
            data = json.loads(Path(args.descriptor).read_text(encoding="utf-8"))
            descriptor = BackendDescriptor.from_dict(data)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise UserError(f"invalid descriptor {args.descriptor}: {exc}") from exc
        if args.seq_len:
            descriptor = dataclasses.replace(descriptor, layers=tuple(
                dataclasses.replace(layer, seq_len=args.seq_len) for layer in descriptor.layers
            ))
    else:
        descriptor = toy_descriptor(args.seq_len)
    reports = cost_model.compare_modes(
        descriptor, range(1, args.b_max + 1), args.tokens_per_reference, steps=args.steps
    )
    args.out.mkdir(parents=True, exist_ok=True)
    csv_path = cost_model.write_csv(reports, args.out / "cost.csv")
    print(f"wrote {csv_path}")
    if not args.no_plot:
        print(f"wrote {cost_model.plot(reports, args.out / 'cost.png')}")
    g, c = cost_model.fitted_slopes(reports) if len(reports) > 1 else (float("nan"), float("nan"))
    print(f"slope per reference: grca={g:.4g} csa={c:.4g}")
    return EXIT_OK


def contact_sheet(run_dir: Path, iterations: list[int], gutter: int = 2) -> np.ndarray:
    """Rows are iterations in the order given, columns are story frames."""
    if not iterations:
        raise UserError("empty iteration list")
    rows = []
    for i in iterations:
        try:
            rows.append(load_frame_set(run_dir, i))
        except PersistenceError as exc:
            raise UserError(str(exc)) from exc
    h, w, _ = rows[0][0].pixels.shape
    cols = max(len(fs) for fs in rows)
    sheet = np.ones((len(rows) * (h + gutter) - gutter, cols * (w + gutter) - gutter, 3))
    for r, fs in enumerate(rows):
        for c, frame in enumerate(fs.frames):
            y, x = r * (h + gutter), c * (w + gutter)
            sheet[y:y + h, x:x + w] = frame.pixels
    return sheet


def cmd_grid(args) -> int:
    if args.iterations is None:
        iterations = pipeline.completed_iterations(args.run)
        if not iterations:
            raise UserError(f"no completed iterations in {args.run}")
    else:
        try:
            iterations = [int(x) for x in args.iterations.split(",") if x.strip()]
        except ValueError as exc:
            raise UserError(f"bad --iterations: {exc}") from exc
    sheet = contact_sheet(args.run, iterations)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels_to_uint8(sheet), mode="RGB").save(args.out, format="PNG")
    print(f"wrote {args.out} ({len(iterations)} rows)")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "resume": cmd_resume, "eval": cmd_eval, "cost": cmd_cost, "grid": cmd_grid}


def _fail(kind: str, exc: BaseException, code: int) -> int:
    print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UserError, ManifestError, ResumeError, FileNotFoundError) as exc:
        return _fail(type(exc).__name__, exc, EXIT_USER)
    except Exception as exc:
        logging.getLogger(__name__).debug("internal error", exc_info=True)
        return _fail(type(exc).__name__, exc, EXIT_INTERNAL)


if __name__ == "__main__":
    sys.exit(main())
