"""Modality blending networks and their desk-scale experiment suite."""
from . import numcore, simgen, dmbn, mvae, evalx

__version__ = "0.1.0"
__all__ = ["numcore", "simgen", "dmbn", "mvae", "evalx"]
