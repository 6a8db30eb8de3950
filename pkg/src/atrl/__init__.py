"""Numerical laboratory for simplified transformers on sequence relationships.

Submodules: autodiff (reverse-mode tensors), transformer (model and
density-construction skeleton), pod (Jacobi SVD and POD), targets (synthetic
target relationships), datasets, training, experiments, report, cli.
"""

__version__ = "0.1.0"
