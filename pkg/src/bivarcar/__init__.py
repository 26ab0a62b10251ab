"""Bivariate multilevel conditional autoregressive models for areal data.

Submodules:

* ``graph``: adjacency, Laplacian, components, per-component spectra
* ``multilevel``: observation -> macro-area -> component maps
* ``spatial_prior``: ICAR/PCAR precisions, scaling, constraints, Wishart prior
* ``deconfound``: Moran's I and eigenvector-based covariate deconfounding
* ``likelihood``: Gaussian and standardised skew-normal errors, PC prior
* ``inference``: nested Laplace engine and MCMC oracle
* ``criteria``: WAIC, DIC, CPO/LPML, MSE, residual KDE
* ``simulate``: synthetic datasets
* ``io`` and ``cli``: files, reports and the command line
"""
from .graph import AreaGraph, build_graph, eigendecompose, islands_lattice, lattice_graph, path_graph
from .inference import Dataset, ModelSpec, PosteriorFit, fit
from .multilevel import LevelMap, aggregate, build_levelmap, levelmap_from_graph

__version__ = "0.1.0"

__all__ = [
    "AreaGraph",
    "Dataset",
    "LevelMap",
    "ModelSpec",
    "PosteriorFit",
    "aggregate",
    "build_graph",
    "build_levelmap",
    "eigendecompose",
    "fit",
    "islands_lattice",
    "lattice_graph",
    "levelmap_from_graph",
    "path_graph",
]
