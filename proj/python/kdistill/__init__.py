"""Python access to the kd metrics, loss and model helpers."""

from ._core import (
    ConfigError,
    DataError,
    KdError,
    NumericError,
    ShapeError,
    compute_metrics,
    cross_entropy,
    gradcheck,
    kd_loss,
    kl_divergence,
    param_counts,
    param_reduction,
    render_metric,
    render_percent,
    softmax_temperature,
    synth_images,
)

__all__ = [
    "ConfigError",
    "DataError",
    "KdError",
    "NumericError",
    "ShapeError",
    "compute_metrics",
    "cross_entropy",
    "gradcheck",
    "kd_loss",
    "kl_divergence",
    "param_counts",
    "param_reduction",
    "render_metric",
    "render_percent",
    "softmax_temperature",
    "synth_images",
]
