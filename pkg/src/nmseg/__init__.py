"""Neural-memory ODE decoders for U-shaped segmentation networks, in numpy."""

from .network import Decoder, UNet, UNetConfig
from .ode_core import Method, NmOdeSystem, SolverConfig, integrate

__version__ = "0.1.0"

__all__ = ["Decoder", "UNet", "UNetConfig", "Method", "NmOdeSystem", "SolverConfig", "integrate"]
