"""Structure-preserving finite-volume solver for linear Fokker-Planck equations.

Submodules
----------
kernels
    Scalar functions behind the flux and the reparametrised Newton unknown.
mesh
    Triangle meshes, admissibility checks, refinement and quality reports.
scheme
    Potential discretisation, fluxes, implicit step and trajectories.
diagnostics
    Energy, dissipation potentials and the energy-dissipation balance.
cases
    Gravity benchmark with closed-form solution and the spiral potential.
cli
    Command line entry point (``python -m sqrafp``).
"""

__version__ = "0.1.0"
