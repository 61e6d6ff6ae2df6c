"""Int8 on-device training: compile-time autodiff, sparse updates, memory planning, scheme search."""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
