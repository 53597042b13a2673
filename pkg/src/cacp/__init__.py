"""Context-aware copy-paste augmentation.

Pick a gallery category that fits a base image's caption, cut a donor object
out with a box-plus-saliency-point prompt, and paste it at a plausible scale
while carrying the dataset annotations along.
"""

from cacp.backends import Backends, PromptBundle, PromptPoint, fake_backends, make_backends
from cacp.config import RunConfig, load_config
from cacp.geometry import BBox

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "Backends",
    "PromptBundle",
    "PromptPoint",
    "RunConfig",
    "fake_backends",
    "load_config",
    "make_backends",
]
