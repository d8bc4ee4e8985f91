"""Edit distances, error rates, pseudo-label evolution statistics and the
collapse / memorization detector."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from plab.ctc import BLANK, BOUNDARY, collapse, ctc_loss, log_softmax


def levenshtein(a, b) -> int:
    """Minimal number of insertions, deletions and substitutions."""
    a = list(a)
    b = list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def split_words(tokens) -> list[tuple]:
    words, cur = [], []
    for t in tokens:
        t = int(t)
        if t == BOUNDARY:
            if cur:
                words.append(tuple(cur))
            cur = []
        else:
            cur.append(t)
    if cur:
        words.append(tuple(cur))
    return words


def ter(hyp, ref) -> float:
    """Token error rate; an empty reference divides by 1."""
    return levenshtein(hyp, ref) / max(1, len(ref))


def wer(hyp, ref) -> float:
    ref_words = split_words(ref)
    return levenshtein(split_words(hyp), ref_words) / max(1, len(ref_words))


def corpus_ter(hyps, refs) -> float:
    """Total edits over total reference tokens."""
    edits = sum(levenshtein(h, r) for h, r in zip(hyps, refs))
    return edits / max(1, sum(len(r) for r in refs))


def corpus_wer(hyps, refs) -> float:
    edits = sum(levenshtein(split_words(h), split_words(r)) for h, r in zip(hyps, refs))
    return edits / max(1, sum(len(split_words(r)) for r in refs))


def top_k(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, best first (ties to lower id)."""
    return np.argsort(-np.asarray(probs), axis=1, kind="stable")[:, :k]


def consecutive_pl_frame_distance(prev, curr, curr_topk) -> tuple[float, float]:
    """(fraction of frames whose token changed, fraction where the previous
    token is missing from the current top-k set)."""
    prev = np.asarray(prev)
    curr = np.asarray(curr)
    curr_topk = np.asarray(curr_topk)
    if prev.shape != curr.shape or curr_topk.shape[0] != prev.shape[0]:
        raise ValueError("alignments must have equal length")
    if prev.size == 0:
        return 0.0, 0.0
    top1 = float(np.mean(prev != curr))
    miss = float(np.mean(~np.any(curr_topk == prev[:, None], axis=1)))
    return top1, miss


def consecutive_pl_sequence_distance(prev, curr) -> float:
    return levenshtein(prev, curr) / max(1, len(prev))


def blank_stats(alignments) -> tuple[float, float]:
    """(fraction of blank frames, fraction of alignments collapsing to nothing)."""
    alignments = [np.asarray(a) for a in alignments]
    if not alignments:
        return 0.0, 0.0
    frames = sum(a.size for a in alignments)
    blanks = sum(int(np.sum(a == BLANK)) for a in alignments)
    empty = sum(1 for a in alignments if collapse(a).size == 0)
    return blanks / max(1, frames), empty / len(alignments)


def top3_mass(probs: np.ndarray) -> float:
    probs = np.asarray(probs)
    k = min(3, probs.shape[1])
    return float(np.mean(np.sort(probs, axis=1)[:, -k:].sum(axis=1)))


def pl_path_logprob(logits: np.ndarray, stored_path) -> tuple[float, float]:
    """Log-probability of a stored hard-path and of the transcription it
    collapses to, under the current model's ``logits`` for the utterance."""
    path = np.asarray(stored_path, dtype=np.int64)
    log_probs = log_softmax(logits)
    if path.shape[0] != log_probs.shape[0]:
        raise ValueError(f"stored path length {path.shape[0]} != model frames {log_probs.shape[0]}")
    path_lp = float(log_probs[np.arange(path.size), path].sum())
    loss, _ = ctc_loss(log_probs, collapse(path))
    return path_lp, -loss


# ---------------------------------------------------------------------------
# collapse detector
# ---------------------------------------------------------------------------


@dataclass
class DetectorConfig:
    window: int = 500
    blank_threshold: float = 0.9
    unlabeled_eps: float = 1e-3
    memorization_ratio: float = 10.0
    all_blank_run: int = 1000


@dataclass
class CollapseState:
    """Rolling windows of per-step observations; ``tripped`` never resets."""

    config: DetectorConfig = field(default_factory=DetectorConfig)
    blank: deque = field(default_factory=deque)
    empty: deque = field(default_factory=deque)
    unlabeled_loss: deque = field(default_factory=deque)
    labeled_loss: deque = field(default_factory=deque)
    all_blank_streak: int = 0
    tripped: bool = False
    reason: str = ""
    tripped_at: int = -1
    seen: int = 0

    def summary(self) -> dict:
        def mean(d):
            return float(np.mean(d)) if d else None

        return {
            "tripped": self.tripped,
            "reason": self.reason,
            "tripped_at": self.tripped_at,
            "blank_mean": mean(self.blank),
            "empty_mean": mean(self.empty),
            "unlabeled_loss_mean": mean(self.unlabeled_loss),
            "labeled_loss_mean": mean(self.labeled_loss),
        }


def _push(d: deque, value, n: int) -> None:
    if value is None:
        return
    d.append(float(value))
    while len(d) > n:
        d.popleft()


def collapse_detector(state: CollapseState, record: dict) -> CollapseState:
    """Feed one observation.

    ``record`` may carry ``blank_fraction``, ``empty_fraction``,
    ``unlabeled_loss``, ``labeled_loss`` and ``step``; missing keys leave the
    corresponding window untouched. Windows must be full before a verdict.
    """
    cfg = state.config
    n = cfg.window
    state.seen += 1
    _push(state.blank, record.get("blank_fraction"), n)
    _push(state.empty, record.get("empty_fraction"), n)
    _push(state.unlabeled_loss, record.get("unlabeled_loss"), n)
    _push(state.labeled_loss, record.get("labeled_loss"), n)
    bf = record.get("blank_fraction")
    if bf is not None:
        state.all_blank_streak = state.all_blank_streak + 1 if bf >= 1.0 else 0
    if state.tripped:
        return state

    reason = ""
    if len(state.blank) >= n and np.mean(state.blank) > cfg.blank_threshold:
        reason = "blank-collapse"
    elif state.all_blank_streak >= cfg.all_blank_run:
        reason = "blank-collapse"
    elif len(state.unlabeled_loss) >= n and len(state.labeled_loss) >= n:
        u = np.mean(state.unlabeled_loss)
        lab = np.mean(state.labeled_loss)
        if u < cfg.unlabeled_eps and lab > cfg.memorization_ratio * cfg.unlabeled_eps:
            reason = "memorization"
    if reason:
        state.tripped = True
        state.reason = reason
        state.tripped_at = int(record.get("step", state.seen))
    return state
