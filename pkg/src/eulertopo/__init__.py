"""Numerical toolkit for the three-band Euler insulator.

Submodules: bloch (models, frames), invariants (equilibrium topology),
quench (Hopf-map dynamics), labsim (simulated trapped-ion pipeline)
and cli.
"""

__version__ = "0.1.0"
