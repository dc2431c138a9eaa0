"""Uncertain kinetic SEIR contact model.

Submodules
----------
uq
    Orthonormal polynomial chaos bases and quadrature.
contact
    Transition function, kernel, Fokker-Planck coefficients, equilibria.
control
    Selective control law and its functionals.
fpsolve
    Single-realization Fokker-Planck stepper.
sgkinetic
    Stochastic-Galerkin kinetic SEIR solver.
macro
    Closed macroscopic SEIR system.
calib
    Data ingestion and least-squares calibration.
cli
    Scenario runner.
"""

__version__ = "0.1.0"
