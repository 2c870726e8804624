"""hrnet-forge: high-resolution multi-branch networks on reference CPU kernels.

The package keeps heavyweight imports out of this module so the command-line
entry point can configure thread limits before numpy loads.
"""

__version__ = "0.1.0"
