"""Location privacy on road networks: obfuscation mechanisms, inference attacks
and a candidate-set defense."""
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
