"""Two-stage crack segmentation on fused RGB + thermal imagery.

Stage 1 aligns the low-resolution thermal channels to the RGB grid with a
self-supervised detail-injection super-resolver and stacks both into a
six-channel input. Stage 2 segments with a selective-scan (state-space)
encoder over four grid traversal directions and a pyramid-pooling decoder.
Everything runs on numpy with hand-composed backward passes validated
against finite differences.
"""

__version__ = "0.1.0"

from .tensor import Tensor, load_tensor, save_tensor  # noqa: F401
