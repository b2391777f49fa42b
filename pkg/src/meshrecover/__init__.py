"""Recover full template-topology body meshes from single-view depth and UV maps."""
from .mesh import TemplateMesh, TemplateError, load_template, save_template
from .camera import CameraPose, DepthUVFrame, Intrinsics, render_depth_uv, visible_vertices
from .matching import LiftedPointSet, PartialMesh, lift_all, match
from .mae import DegenerateInputError, MAEModel, ModelConfig, NormStats, normalize
from .autograd import NonFiniteError

__version__ = "0.1.0"
