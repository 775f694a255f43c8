"""Identification of the local dynamics around limit cycles with linear
periodically parameter-varying (LPPV) models learned by periodic-kernel
regression in transverse coordinates."""

__version__ = "0.1.0"
