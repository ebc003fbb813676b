"""IMU-driven motion simulation and compensation for cone-beam CT, at desk scale."""

from . import _malloc

_malloc.apply()

__version__ = "0.1.0"
