"""Scale-and-rotation equivariant convolution (SimConv) on numpy."""

from sren.tensorcore import FeatureMap, Sim2Transform, make_sim2, compose, warp, bilinear_sample
from sren.fourier_argand import BasisConfig, BasisSet, CoeffTable, build_basis
from sren.geometry import GeometryField, basis_responses, build_search_grid, estimate_geometry
from sren.simconv import SimConvLayer, simconv_forward, simconv_backward

__version__ = "0.1.0"

__all__ = [
    "FeatureMap",
    "Sim2Transform",
    "make_sim2",
    "compose",
    "warp",
    "bilinear_sample",
    "BasisConfig",
    "BasisSet",
    "CoeffTable",
    "build_basis",
    "GeometryField",
    "basis_responses",
    "build_search_grid",
    "estimate_geometry",
    "SimConvLayer",
    "simconv_forward",
    "simconv_backward",
]
