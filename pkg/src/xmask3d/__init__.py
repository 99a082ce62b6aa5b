"""Open-vocabulary 3D semantic segmentation via cross-modal mask reasoning,
at desk scale: synthetic labeled scenes, surrogate encoders with hand-written
gradients, exact mask back-projection, and a reproducible training loop.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    ConfigError,
    DimMismatch,
    EmptyInput,
    EmptySupervision,
    ModeError,
    NonFiniteLoss,
    NoValidMasks,
    StepOutOfRange,
    XMaskError,
    ZeroNormRow,
)


def __getattr__(name):
    # lazy re-exports of the main entry points without import cycles
    if name in ("RunConfig", "TrainedModel", "train", "evaluate"):
        from . import pipeline
        return getattr(pipeline, name)
    if name in ("CategoryPartition", "Scene", "generate_scene", "render_view"):
        from . import scenes
        return getattr(scenes, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
