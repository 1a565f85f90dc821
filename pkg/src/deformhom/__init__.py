"""Finite-element homogenization of reactive transport in deformable perforated media."""

__version__ = "0.1.0"
