"""Losses for pseudo-labeled utterances and the regularizers applied to them.

Every loss returns ``(value, d_value / d_student_logits)``.
"""

from __future__ import annotations

import numpy as np

from plab.ctc import BLANK, ctc_loss, log_softmax, softmax
from plab.metrics import levenshtein

_FLOOR = 1e-12


def _check_pair(student, teacher):
    student = np.asarray(student, dtype=np.float64)
    teacher = np.asarray(teacher, dtype=np.float64)
    if student.shape != teacher.shape:
        raise ValueError(f"student {student.shape} and teacher {teacher.shape} shapes differ")
    if not (np.all(np.isfinite(student)) and np.all(np.isfinite(teacher))):
        raise ValueError("non-finite logits")
    return student, teacher


def _softmax_backward(probs: np.ndarray, d_probs: np.ndarray) -> np.ndarray:
    """Chain rule through a row softmax: p * (g - <g, p>)."""
    return probs * (d_probs - np.sum(d_probs * probs, axis=1, keepdims=True))


def smooth_distribution(probs: np.ndarray, gamma: float) -> np.ndarray:
    """Label smoothing: (1 - gamma) * p + gamma / V."""
    probs = np.asarray(probs, dtype=np.float64)
    return (1.0 - gamma) * probs + gamma / probs.shape[-1]


def soft_ce_loss(
    student_logits,
    teacher_logits,
    tau: float = 1.0,
    beta: float = 1.0,
    direction: str = "teacher",
    smooth_targets: float = 0.0,
    smooth_predictions: float = 0.0,
) -> tuple[float, np.ndarray]:
    """Frame-wise cross-entropy between tempered teacher and student softmaxes.

    ``direction="teacher"``: -beta * sum q_teacher * log q_student.
    ``direction="literal"``: -beta * sum q_student * log q_teacher, with the
    gradient flowing through q_student only.
    ``smooth_targets`` / ``smooth_predictions`` mix the respective
    distribution with uniform before the cross-entropy.
    """
    if tau <= 0 or beta <= 0:
        raise ValueError("tau and beta must be > 0")
    z, zt = _check_pair(student_logits, teacher_logits)
    q = softmax(z, tau)
    qt = smooth_distribution(softmax(zt, tau), smooth_targets)
    if direction == "teacher":
        if smooth_predictions == 0.0:
            loss = -beta * float(np.sum(qt * log_softmax(z, tau)))
            return loss, (beta / tau) * (q - qt)
        qs = smooth_distribution(q, smooth_predictions)
        loss = -beta * float(np.sum(qt * np.log(qs)))
        d_q = -beta * (1.0 - smooth_predictions) * qt / qs
        return loss, _softmax_backward(q, d_q) / tau
    if direction == "literal":
        qs = smooth_distribution(q, smooth_predictions)
        log_qt = np.log(np.maximum(qt, _FLOOR))
        loss = -beta * float(np.sum(qs * log_qt))
        d_q = -beta * (1.0 - smooth_predictions) * log_qt
        return loss, _softmax_backward(q, d_q) / tau
    raise ValueError(f"unknown CE direction {direction!r}")


def soft_l2_loss(student_logits, teacher_logits, beta: float = 1.0) -> tuple[float, np.ndarray]:
    """beta * sum (z - z_teacher)**2 on raw logits."""
    z, zt = _check_pair(student_logits, teacher_logits)
    diff = z - zt
    return beta * float(np.sum(diff * diff)), 2.0 * beta * diff


def soft_loss(student_logits, teacher_logits, kind="ce", tau=1.0, beta=1.0, **kw):
    if kind == "ce":
        return soft_ce_loss(student_logits, teacher_logits, tau, beta, **kw)
    if kind == "l2":
        return soft_l2_loss(student_logits, teacher_logits, beta)
    raise ValueError(f"unknown soft loss {kind!r}")


def blended_loss(
    delta: float,
    hard_target,
    teacher_logits,
    student_logits,
    kind: str = "ce",
    tau: float = 1.0,
    beta: float = 1.0,
    **kw,
) -> tuple[float, np.ndarray]:
    """delta * CTC(student, hard_target) + (1 - delta) * soft loss."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError("delta must be in [0, 1]")
    z = np.asarray(student_logits, dtype=np.float64)
    l_ctc, g_ctc = ctc_loss(log_softmax(z), hard_target)
    l_soft, g_soft = soft_loss(z, teacher_logits, kind, tau, beta, **kw)
    return delta * l_ctc + (1.0 - delta) * l_soft, delta * g_ctc + (1.0 - delta) * g_soft


def entropy_reg(student_logits, weight: float) -> tuple[float, np.ndarray]:
    """-weight * sum_t H(softmax(z_t)); minimizing raises per-frame entropy."""
    if weight < 0:
        raise ValueError("weight must be >= 0")
    z = np.asarray(student_logits, dtype=np.float64)
    if weight == 0:
        return 0.0, np.zeros_like(z)
    logp = log_softmax(z)
    p = np.exp(logp)
    h = -np.sum(p * logp, axis=1, keepdims=True)
    return -weight * float(h.sum()), weight * p * (logp + h)


def sequence_prior_reg(student_logits, prior, weight: float) -> tuple[float, np.ndarray]:
    """weight * KL(mean_t softmax(z_t) || prior)."""
    prior = np.asarray(prior, dtype=np.float64)
    if abs(prior.sum() - 1.0) > 1e-6:
        raise ValueError("prior must sum to 1")
    z = np.asarray(student_logits, dtype=np.float64)
    if weight == 0:
        return 0.0, np.zeros_like(z)
    p = softmax(z)
    T = p.shape[0]
    m = p.mean(axis=0)
    log_ratio = np.log(np.maximum(m, _FLOOR)) - np.log(np.maximum(prior, _FLOOR))
    loss = weight * float(np.sum(m * log_ratio))
    d_m = weight * (log_ratio + 1.0)
    return loss, _softmax_backward(p, np.broadcast_to(d_m / T, p.shape))


def blank_prior_reg(student_logits, blank_target: float, weight: float) -> tuple[float, np.ndarray]:
    """weight * sum_t (p_t(blank) - blank_target)**2."""
    z = np.asarray(student_logits, dtype=np.float64)
    p = softmax(z)
    dev = p[:, BLANK] - blank_target
    d_p = np.zeros_like(p)
    d_p[:, BLANK] = 2.0 * weight * dev
    return weight * float(np.sum(dev * dev)), _softmax_backward(p, d_p)


def frame_prior_reg(student_logits, blank_target=None, gamma=None, weight=1.0):
    """Frame-level prior in one of two forms.

    With ``blank_target`` returns the squared-deviation loss and gradient.
    With ``gamma`` returns the label-smoothed student distribution; smoothing
    inside the CE is configured on :func:`soft_ce_loss`.
    """
    if (blank_target is None) == (gamma is None):
        raise ValueError("give exactly one of blank_target or gamma")
    if blank_target is not None:
        return blank_prior_reg(student_logits, blank_target, weight)
    return smooth_distribution(softmax(student_logits), gamma)


def logits_averaging(logits, window: int) -> np.ndarray:
    """Each row becomes the mean of rows t - W//2 .. t + W//2, clipped at the edges."""
    x = np.asarray(logits, dtype=np.float64)
    if window < 1:
        raise ValueError("window must be >= 1")
    half = window // 2
    if half == 0:
        return x.copy()
    T = x.shape[0]
    csum = np.vstack([np.zeros((1, x.shape[1])), np.cumsum(x, axis=0)])
    lo = np.maximum(np.arange(T) - half, 0)
    hi = np.minimum(np.arange(T) + half + 1, T)
    return (csum[hi] - csum[lo]) / (hi - lo)[:, None]


def pl_filter(prev_transcription, new_transcription, threshold: float) -> bool:
    """Keep a pseudo-label unless it moved too far from the one last trained on.

    The first pseudo-label for an utterance (``prev_transcription is None``)
    is always kept.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must be in (0, 1]")
    if prev_transcription is None:
        return True
    dist = levenshtein(prev_transcription, new_transcription) / max(1, len(prev_transcription))
    return dist <= threshold
