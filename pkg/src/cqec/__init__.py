"""Continuous quantum error correction simulator for a three-qubit bit-flip code.

Diffusive quantum trajectories under two always-on joint-parity
measurements, a filter-and-threshold feedback controller, and the scripted
experiments that characterize detection efficiency, dead time, logical
lifetime, and induced dephasing.
"""

from .model import DeviceParams, load_params

__all__ = ["DeviceParams", "load_params"]
__version__ = "0.1.0"
