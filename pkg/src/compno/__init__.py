"""Compositional neural operators on periodic 2-D grids.

Submodules: ``field`` (grids and stencils), ``solvers`` (classical steppers),
``datagen`` (datasets), ``autodiff`` (reverse-mode engine), ``neuralop``
(FNO foundation blocks), ``model`` (aggregation and rollout) and ``cli``.
Nothing heavy is imported here so the CLI can set thread counts first.
"""

__version__ = "0.1.0"
