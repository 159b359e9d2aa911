"""Anti-aliased radiance fields with ripmap-encoded Platonic-solid planes."""

from .geometry import Solid, platonic_plane_set
from .kernels import backend_name

__version__ = "0.1.0"

__all__ = ["Solid", "platonic_plane_set", "backend_name", "__version__"]
