"""Closed-loop digital twin of a fluoride-salt-cooled reactor.

Subpackages and modules:

- ``plant``: lumped emulator standing in for the physical reactor
- ``surrogate``: VARMAX block networks that advance the twin state
- ``health``: pump degradation and health index
- ``enkf``: ensemble Kalman filter with parameter augmentation
- ``governor``: reference governor on setpoint moves
- ``operator``: compressed-model planning of power and maintenance
- ``sensitivity``: Saltelli sampling and Sobol indices
- ``runtime``: configuration, scheduler, outputs and the CLI
"""

__version__ = "0.1.0"
