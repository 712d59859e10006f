"""Software differentiable rasterizer, point projector, and SH shading."""

from .sh import sh_basis, sh_irradiance
from .raster import FragmentBuffer, RenderConfig, rasterize_fragments
from .diff import Gradients, RasterOutput, rasterize, render_with_gradients, TorchRenderer
from .project import project_points

__all__ = [
    "sh_basis",
    "sh_irradiance",
    "FragmentBuffer",
    "RenderConfig",
    "rasterize_fragments",
    "Gradients",
    "RasterOutput",
    "rasterize",
    "render_with_gradients",
    "TorchRenderer",
    "project_points",
]
