from .engine import PosteriorFit, fit
from .model import CompiledModel, Dataset, ModelError, ModelSpec

__all__ = ["CompiledModel", "Dataset", "ModelError", "ModelSpec", "PosteriorFit", "fit"]
