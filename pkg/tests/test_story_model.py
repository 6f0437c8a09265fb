import json

import numpy as np
import pytest
from PIL import Image

from story_adapter.errors import ManifestError, PersistenceError
from story_adapter.story_model import (
    PARTIAL_SENTINEL,
    Frame,
    FrameSet,
    RunConfig,
    StoryManifest,
    is_complete,
    load_frame_set,
    load_manifest,
    pixel_digest,
    read_metadata,
    save_frame_set,
    save_manifest,
)


def write(tmp_path, data, name="story.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


def random_frame_set(rng, b=3, iteration=0, size=8):
    return FrameSet(iteration, tuple(
        Frame.from_pixels(k, iteration, rng.random((size, size, 3))) for k in range(1, b + 1)
    ))


def test_two_prompts_parse_in_order(tmp_path):
    m = load_manifest(write(tmp_path, {"title": "t", "seed": 1, "prompts": ["a snowman", "a fox"]}))
    assert m.length == 2
    assert m.prompts == ("a snowman", "a fox")


def test_empty_prompt_list_is_rejected(tmp_path):
    with pytest.raises(ManifestError, match="empty prompt list") as info:
        load_manifest(write(tmp_path, {"title": "t", "seed": 1, "prompts": []}))
    assert info.value.field == "prompts"


def test_hundred_prompts(tmp_path):
    prompts = [f"frame number {k}" for k in range(100)]
    assert load_manifest(write(tmp_path, {"seed": 0, "prompts": prompts})).length == 100


@pytest.mark.parametrize(
    "data, field",
    [
        ({"seed": 0, "prompts": ["ok", "   "]}, "prompts[1]"),
        ({"seed": 0}, "prompts"),
        ({"seed": "x", "prompts": ["ok"]}, "seed"),
        ({"seed": -1, "prompts": ["ok"]}, "seed"),
        ({"prompts": ["ok"], "config": {"lambda_start": 1.5}}, "config.lambda_start"),
        ({"prompts": ["ok"], "config": {"lambda_start": 0.6, "lambda_end": 0.4}}, "config.lambda_start"),
        ({"prompts": ["ok"], "config": {"bogus": 1}}, "config.bogus"),
        ({"prompts": ["ok"], "config": {"init_mode": "nope"}}, "config.init_mode"),
        ({"prompts": ["ok"], "config": {"guidance_scale": -1}}, "config.guidance_scale"),
        ({"prompts": ["ok"], "config": {"tokens_per_reference": 0}}, "config.tokens_per_reference"),
        ({"prompts": "just one"}, "prompts"),
    ],
)
def test_schema_errors_name_the_field(tmp_path, data, field):
    with pytest.raises(ManifestError) as info:
        load_manifest(write(tmp_path, data))
    assert info.value.field == field
    assert str(info.value).startswith(field)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ManifestError, match="not found"):
        load_manifest(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ManifestError, match="invalid JSON"):
        load_manifest(bad)


def test_defaults():
    c = RunConfig()
    assert (c.iterations, c.lambda_start, c.lambda_end, c.guidance_scale, c.tokens_per_reference) == (
        10, 0.3, 0.5, 7.5, 4
    )
    assert c.grca_enabled and c.init_mode == "text_only" and c.lambda_mode == "linear"


def test_style_suffix_and_round_trip(tmp_path):
    m = StoryManifest(("a fox",), title="t", style_suffix="cartoon style", global_seed=7,
                      config=RunConfig(iterations=2))
    assert m.full_prompt(1) == "a fox, cartoon style"
    again = load_manifest(save_manifest(m, tmp_path / "m.json"))
    assert again == m


def test_reference_images_resolve_relative_to_manifest(tmp_path):
    sub = tmp_path / "stories"
    sub.mkdir()
    m = load_manifest(write(sub, {"prompts": ["a"], "reference_images": ["img/a.png"]}))
    assert m.reference_images == (str((sub / "img/a.png").resolve()),)


def test_frame_clamps_and_digest_is_deterministic():
    raw = np.full((4, 4, 3), 1.7)
    raw[0, 0] = -3.0
    f = Frame.from_pixels(1, 0, raw)
    assert f.pixels.max() == 1.0 and f.pixels.min() == 0.0
    assert f.latent_digest == Frame.from_pixels(1, 0, raw.copy()).latent_digest
    assert f.latent_digest == pixel_digest(f.pixels)
    with pytest.raises(ValueError):
        f.pixels[0, 0, 0] = 0.5


def test_frame_set_invariants(rng):
    a = Frame.from_pixels(1, 0, rng.random((2, 2, 3)))
    b = Frame.from_pixels(2, 0, rng.random((2, 2, 3)))
    c = Frame.from_pixels(2, 1, rng.random((2, 2, 3)))
    with pytest.raises(ValueError):
        FrameSet(0, (b, a))
    with pytest.raises(ValueError):
        FrameSet(0, (a, c))
    with pytest.raises(ValueError):
        FrameSet(0, (a, a))


def test_layout(tmp_path, rng):
    fs = random_frame_set(rng, b=3)
    written = save_frame_set(fs, tmp_path, lambda_used=None, config=RunConfig())
    d = tmp_path / "iteration_0"
    assert sorted(p.name for p in d.iterdir()) == ["frame_001.png", "frame_002.png", "frame_003.png", "metadata.json"]
    assert set(written) == set(d.iterdir())
    meta = read_metadata(tmp_path, 0)
    assert meta["iteration"] == 0 and meta["lambda_used"] is None
    assert [e["digest"] for e in meta["frames"]] == fs.digests
    assert meta["config"]["iterations"] == 10


def test_save_is_idempotent(tmp_path, rng):
    fs = random_frame_set(rng)
    save_frame_set(fs, tmp_path, 0.3)
    first = {p.name: p.read_bytes() for p in (tmp_path / "iteration_0").iterdir()}
    save_frame_set(fs, tmp_path, 0.3)
    second = {p.name: p.read_bytes() for p in (tmp_path / "iteration_0").iterdir()}
    assert first == second


def test_round_trip_is_exact(tmp_path, rng):
    fs = random_frame_set(rng, b=4, iteration=2, size=16)
    save_frame_set(fs, tmp_path, 0.4)
    back = load_frame_set(tmp_path, 2)
    assert back.digests == fs.digests
    assert np.array_equal(back.pixels, fs.pixels)


def test_unwritable_root_names_the_path(tmp_path, rng):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(PersistenceError, match="file"):
        save_frame_set(random_frame_set(rng), blocker / "run")


def test_partial_directory_is_detected(tmp_path, rng):
    save_frame_set(random_frame_set(rng), tmp_path)
    assert is_complete(tmp_path, 0)
    (tmp_path / "iteration_0" / PARTIAL_SENTINEL).touch()
    assert not is_complete(tmp_path, 0)
    with pytest.raises(PersistenceError, match="partially"):
        load_frame_set(tmp_path, 0)


def test_tampered_frame_fails_digest_check(tmp_path, rng):
    save_frame_set(random_frame_set(rng), tmp_path)
    Image.fromarray(np.zeros((8, 8, 3), dtype=np.uint8)).save(tmp_path / "iteration_0" / "frame_002.png")
    with pytest.raises(PersistenceError, match="digest mismatch"):
        load_frame_set(tmp_path, 0)
