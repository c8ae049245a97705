"""Convex-integration construction kit for the transport equation on the torus."""

__version__ = "0.1.0"
