"""Integer quantization toolkit for small CNNs.

Quantizer math, batch-norm folding, fake-quant graph rewrites, integer-only
inference kernels and SQNR diagnostics, backed by the C++ core in `_qtz`.
"""

from _qtz import *  # noqa: F401,F403
