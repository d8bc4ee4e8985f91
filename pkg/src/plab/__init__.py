"""Continuous pseudo-labeling laboratory for CTC sequence models.

Hard-path, beam, sampled, soft and blended pseudo-labels on a small synthetic
speech-like task, with the regularizers and collapse diagnostics needed to
watch soft-label training degenerate.
"""

from plab.ctc import (
    BLANK,
    BOUNDARY,
    CtcInfeasibleError,
    beam_search,
    collapse,
    ctc_brute_force,
    ctc_loss,
    hard_path,
    log_softmax,
    sample_alignment,
)
from plab.numerics import ModelParams, forward, backward, init_params

__all__ = [
    "BLANK",
    "BOUNDARY",
    "CtcInfeasibleError",
    "ModelParams",
    "backward",
    "beam_search",
    "collapse",
    "ctc_brute_force",
    "ctc_loss",
    "forward",
    "hard_path",
    "init_params",
    "log_softmax",
    "sample_alignment",
]

__version__ = "0.1.0"
