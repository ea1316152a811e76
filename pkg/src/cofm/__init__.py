"""Consistency OT flow matching: convex time-dependent potentials trained
with a flow-matching loss plus a Hamilton-Jacobi consistency term."""

__version__ = "0.1.0"
