"""Adaptive finite element eigensolver for the 2D Dirichlet Laplacian.

Preconditioned inverse iteration (PINVIT) and its block variant on locally
refined quadrilateral meshes, with geometric multigrid / Chebyshev / Jacobi
preconditioning, a residual a posteriori estimator with Dörfler marking, and
a smoothed-adaptive driver that replaces the full eigensolve on intermediate
meshes by a few preconditioned smoothing steps.
"""

__version__ = "0.1.0"

from . import adaptivity, cli, eigensolver, estimator, fem, linalg, mesh, oracle

__all__ = [
    "mesh",
    "fem",
    "linalg",
    "eigensolver",
    "estimator",
    "adaptivity",
    "oracle",
    "cli",
    "__version__",
]
