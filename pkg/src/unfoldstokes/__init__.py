"""Numerical analytic invariants of unfolded rank-one irregular singularities."""

from .systems import (FormalInvariants, UnfoldedParameter, UnfoldedSystem, formal_invariants,
                      model_system, normalized, ordering_rotation, parse_system)

__all__ = [
    "FormalInvariants",
    "UnfoldedParameter",
    "UnfoldedSystem",
    "formal_invariants",
    "model_system",
    "normalized",
    "ordering_rotation",
    "parse_system",
]
