"""Occupancy-field representations of tubular trees and diffusion over their weights."""

__version__ = "0.1.0"
