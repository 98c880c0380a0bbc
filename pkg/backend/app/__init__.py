"""Attend-infer-repeat scene inference: autodiff core, models, renderer, data and training."""

__all__ = [
    "config",
    "tensor",
    "nn",
    "estimators",
    "count_prior",
    "spatial_transformer",
    "air_model",
    "toy_model",
    "raster_inverse",
    "image_io",
    "datagen",
    "trainer",
    "checkpoint",
    "check_suite",
    "runs",
]
