class StoryAdapterError(Exception):
    """Base class for errors raised by this package."""


class ManifestError(StoryAdapterError, ValueError):
    """The story manifest is missing or violates the schema.

    ``field`` carries the offending field path, e.g. ``prompts[3]``.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class PersistenceError(StoryAdapterError, OSError):
    pass


class ResumeError(StoryAdapterError):
    pass


class SamplingError(StoryAdapterError, FloatingPointError):
    """A denoising trajectory produced a non-finite latent."""

    def __init__(self, step: int, message: str = "non-finite latent"):
        self.step = step
        super().__init__(f"step {step}: {message}")
