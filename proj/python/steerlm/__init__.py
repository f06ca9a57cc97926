"""Python access to the steerlm engine."""

from ._core import (
    BoundsError,
    ConfigError,
    DataError,
    Error,
    HashMismatchError,
    IncompatibleError,
    LoadError,
    MissingTensorError,
    Model,
    ParseError,
    ShapeMismatchError,
    SteeringVectorSet,
    TemplateError,
    __version__,
    compute_gap,
    detect_awareness,
    detect_refusal,
    extract_vectors,
    forward_capture,
    generate,
    load_model,
    load_vectors,
    reference_deviation,
    run_cli,
    split_corpus,
    split_response,
    wrap_safety,
)

__all__ = [name for name in dir() if not name.startswith("_")]
