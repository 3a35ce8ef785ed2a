"""Hermitian-Einstein metrics on split bundles over the Riemann sphere.

Numerical and exact-arithmetic tools for:
  * energy-functional evaluation over paths of bundle metrics,
  * Fubini-Study / Bergman constructions from spaces of global sections,
  * exact weight filtrations of section spaces and their algebraic slopes,
  * inequality audits and finite-dimensional minimization over the
    Fubini-Study family.
"""

__version__ = "0.1.0"
