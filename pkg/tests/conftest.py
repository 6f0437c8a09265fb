import numpy as np
import pytest

from story_adapter import RunConfig, StoryManifest

PROMPTS = (
    "a snowman stands in a snowy forest",
    "a snowman meets a red fox",
    "the fox and the snowman walk to a frozen lake",
    "a snowman greets the fox under the moon",
    "the snowman builds a small igloo",
    "the fox brings a scarf to the snowman",
    "the snowman and the fox watch the northern lights",
    "a snowy village at night with a snowman",
    "the fox sleeps beside the snowman",
    "the sun rises and the snowman smiles",
)


def make_manifest(b=3, seed=0, **config) -> StoryManifest:
    return StoryManifest(prompts=PROMPTS[:b], title="snow", global_seed=seed, config=RunConfig(**config))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
