"""Traffic-sign detection under fog, rain and blur with a jointly trained denoiser."""

from .errors import ConfigurationError, InputError

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "InputError", "__version__"]
