"""Cross-modal supervision transfer for small numpy CNNs.

A frozen teacher trained on one modality supervises a student on a paired
second modality by matching mid-level features. Includes a float64 autodiff
core, a bit-exact tensor container, toy paired datasets, zero-shot
composition, score fusion, ranked-retrieval metrics and a CLI.
"""

from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "no_grad", "__version__"]
