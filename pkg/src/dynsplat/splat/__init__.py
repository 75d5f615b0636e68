from ._backend import active_backend, get_kernels
from .core import (DEFAULT_CONFIG, MapGradients, ProjectedGaussian,
                   RenderConfig, RenderOutput, pixel_weight, prepare_view,
                   project, render, render_backward, weights_at_pixel)

__all__ = [
    "DEFAULT_CONFIG", "MapGradients", "ProjectedGaussian", "RenderConfig",
    "RenderOutput", "active_backend", "get_kernels", "pixel_weight",
    "prepare_view", "project", "render", "render_backward", "weights_at_pixel",
]
