"""Banded streaming attention (SA) and low-latency streaming attention (LLSA).

NumPy implementation with hand-written backward passes, numba-accelerated
kernels (set ``STREAMATTN_NUMBA=0`` for the pure-numpy path), a frame-by-frame
streaming runtime and a toy masked-prediction training harness.
"""

import numpy as _np

from .accounting import AllocationAccounting, accounting, get_accounting
from .banded import BandedScores, sa_backward, sa_forward, sa_score_elements, valid_extents
from .block import (
    AttentionMode,
    BlockParams,
    ConfigError,
    encoder_block_backward,
    encoder_block_forward,
    mode,
    stack_backward,
    stack_forward,
    stack_forward_all_channels,
)
from .dense import BandMask, aa_forward, build_band_mask, maa_backward, maa_forward, maa_score_elements
from .formats import FormatError, load_blocks, read_frames, read_tensors, save_blocks, write_frames, write_tensors
from .frames import AttentionInputs, BandSpec, GradTriple, attention_inputs
from .llsa import (
    ChanneledInputs,
    channelize,
    llsa_backward,
    llsa_forward,
    llsa_score_evaluations,
    select_output_channel,
)
from .numerics import OracleError, Rng, finite_difference_grad, softmax_vjp, stable_softmax
from .streaming import (
    LatencyReport,
    StackConfig,
    StreamState,
    causality_probe,
    latency_frames,
    run_stream,
    stream_flush,
    stream_init,
    stream_push,
)

__version__ = "0.1.0"

__all__ = [n for n, v in dict(globals()).items() if not n.startswith("_") and not isinstance(v, type(_np))]
