"""Template-matching detection of artificial reef structures in simulated MBES bathymetry."""

from .core import Bounds, Detection, ObjectAnnotation, ObjectClass, RigidTransform, Scene, load_cloud, save_cloud
from .config import Config, load_config

__version__ = "0.1.0"

__all__ = [
    "Bounds",
    "Config",
    "Detection",
    "ObjectAnnotation",
    "ObjectClass",
    "RigidTransform",
    "Scene",
    "load_cloud",
    "load_config",
    "save_cloud",
    "__version__",
]
