"""Eye-contact correction on the CPU.

A small reverse-mode autodiff engine drives an encoder-decoder network
that predicts a warping flow field and a brightness adjustment map for
64x32 eye patches. The package also ships a synthetic eye renderer for
training data, bi-directional training, gating plus temporal smoothing
for live use, misalignment-tolerant evaluation metrics, and the ``ecc``
command line tool.
"""

__version__ = "0.1.0"

from .autodiff import GradcheckReport, Tape, Tensor, gradient_check

__all__ = [
    "Tensor",
    "Tape",
    "gradient_check",
    "GradcheckReport",
    "__version__",
]
