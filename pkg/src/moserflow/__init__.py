"""Moser flow density models on the flat torus, the sphere and implicit surfaces."""

import hashlib
from pathlib import Path

__version__ = "0.1.0"


def build_hash():
    """Short digest of the package sources, identifying the exact build."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


from .geometry import FlatTorus, ImplicitSurface, Sphere, SphereSdf, TorusSdf, make_geometry  # noqa: E402
from .net import VectorFieldNet  # noqa: E402
from .model import MoserModel  # noqa: E402
from .train import TrainConfig, train  # noqa: E402
from .flow import OdeConfig, generate, pushforward_logdensity  # noqa: E402

__all__ = [
    "FlatTorus", "ImplicitSurface", "Sphere", "SphereSdf", "TorusSdf", "make_geometry",
    "VectorFieldNet", "MoserModel", "TrainConfig", "train", "OdeConfig", "generate",
    "pushforward_logdensity", "build_hash", "__version__",
]
