"""tokenhalt: adaptive token-halting video transformer, desk scale.

A joint space-time transformer whose patch tokens stop computing layer
by layer once their cumulative halting scores saturate, preceded by a
two-layer glimpse filter that drops the least class-relevant tokens,
trained with task + ponder + motion objectives, with exact per-clip
FLOP accounting and halting-map export. Built on a small numpy autodiff
engine; hot kernels run through numba (set TOKENHALT_KERNELS=numpy for
the pure-numpy fallback).
"""

__version__ = "0.1.0"
