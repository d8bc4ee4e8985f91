"""CTC loss, alignment utilities, decoders and a character n-gram LM.

Token id 0 is the CTC blank and id 1 the word boundary. Loss and decoder
inputs are per-frame log-probabilities of shape ``(T, V)``.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

BLANK = 0
BOUNDARY = 1
NEG_INF = -np.inf


class CtcInfeasibleError(ValueError):
    """The target cannot be emitted in T frames."""


def log_softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    return np.exp(log_softmax(logits, temperature))


def min_frames(target) -> int:
    """Fewest frames able to emit ``target``: one per token plus a blank between repeats."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def _extend(target) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, BLANK, dtype=np.int64)
    ext[1::2] = target
    return ext


def ctc_loss(log_probs: np.ndarray, target) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``target`` and its gradient w.r.t. the logits.

    ``log_probs`` must be row-normalised; the gradient has the softmax folded
    in, i.e. it is ``softmax - occupation`` per frame. An empty target is
    allowed and scores the all-blank path.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    T, V = log_probs.shape
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    if np.any(target == BLANK) or np.any(target < 0) or np.any(target >= V):
        raise ValueError("target tokens must be non-blank ids below V")
    need = min_frames(target)
    if T < need:
        raise CtcInfeasibleError(f"target needs {need} frames, only {T} available")

    ext = _extend(target)
    S = len(ext)
    # s-2 skip allowed onto non-blank labels that differ from the label two back
    skip = np.zeros(S, dtype=bool)
    if S > 2:
        skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    emit = log_probs[:, ext]  # (T, S)

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    skip_from = np.zeros(S, dtype=bool)
    skip_from[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip_from[:-2], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + emit[t]

    log_p = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2]) if S > 1 else alpha[T - 1, 0]
    if not np.isfinite(log_p):
        raise CtcInfeasibleError("target has zero probability under log_probs")

    # occupation: gamma[t, k] = sum_{s: ext[s]=k} alpha*beta / emit / P
    ab = alpha + beta - emit
    occ = np.zeros((T, V))
    for k in np.unique(ext):
        cols = ab[:, ext == k]
        m = cols.max(axis=1)
        ok = np.isfinite(m)
        lse = np.full(T, NEG_INF)
        lse[ok] = m[ok] + np.log(np.exp(cols[ok] - m[ok, None]).sum(axis=1))
        occ[:, k] = np.exp(lse - log_p)
    grad = np.exp(log_probs) - occ
    return float(-log_p), grad


@lru_cache(maxsize=64)
def _all_alignments(T: int, V: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    paths = np.array(list(itertools.product(range(V), repeat=T)), dtype=np.int64).reshape(-1, T)
    keep = paths != BLANK
    keep[:, 1:] &= paths[:, 1:] != paths[:, :-1]
    order = np.argsort(~keep, axis=1, kind="stable")
    collapsed = np.take_along_axis(paths, order, axis=1)
    lengths = keep.sum(axis=1)
    return paths, collapsed, lengths


def ctc_brute_force(log_probs: np.ndarray, target, limit: int = 10**7) -> float:
    """Exact CTC loss by enumerating all V**T alignments (test oracle)."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    T, V = log_probs.shape
    if V**T > limit:
        raise ValueError(f"V**T = {V**T} alignments exceeds enumeration limit {limit}")
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    L = len(target)
    if L > T:
        raise CtcInfeasibleError("no alignment collapses to the target")
    paths, collapsed, lengths = _all_alignments(T, V)
    match = lengths == L
    if L:
        match &= np.all(collapsed[:, :L] == target, axis=1)
    if not match.any():
        raise CtcInfeasibleError("no alignment collapses to the target")
    scores = log_probs[np.arange(T), paths[match]].sum(axis=1)
    m = scores.max()
    return float(-(m + math.log(np.exp(scores - m).sum())))


# ---------------------------------------------------------------------------
# alignments
# ---------------------------------------------------------------------------


def hard_path(log_probs: np.ndarray) -> np.ndarray:
    """Per-frame argmax; ties go to the lowest token id."""
    return np.argmax(np.asarray(log_probs), axis=1).astype(np.int64)


def collapse(alignment) -> np.ndarray:
    """Merge adjacent repeats, then drop blanks."""
    a = np.asarray(alignment, dtype=np.int64).reshape(-1)
    if a.size == 0:
        return a
    keep = np.ones(a.size, dtype=bool)
    keep[1:] = a[1:] != a[:-1]
    a = a[keep]
    return a[a != BLANK]


def sample_alignment(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> np.ndarray:
    """Draw each frame's token independently from softmax(logits / temperature)."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    probs = softmax(logits, temperature)
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])[:, None] * cdf[:, -1:]
    idx = (cdf <= u).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1).astype(np.int64)


# ---------------------------------------------------------------------------
# n-gram LM
# ---------------------------------------------------------------------------

BOS = -1
EOS = -2


@dataclass
class NgramLm:
    """Add-k smoothed token n-gram model over non-blank tokens plus end-of-sequence."""

    order: int
    k: float
    vocab_size: int
    counts: dict = field(default_factory=dict)
    totals: dict = field(default_factory=dict)

    @property
    def outcomes(self) -> int:
        # every non-blank token plus end-of-sequence
        return self.vocab_size - 1 + 1

    def context(self, history) -> tuple:
        if self.order == 1:
            return ()
        padded = (BOS,) * (self.order - 1) + tuple(int(x) for x in history)
        return padded[-(self.order - 1):]

    def logprob(self, token: int, history) -> float:
        ctx = self.context(history)
        c = self.counts.get(ctx, {}).get(token, 0)
        n = self.totals.get(ctx, 0)
        return math.log((c + self.k) / (n + self.k * self.outcomes))


def ngram_train(transcripts, n: int, k: float, vocab_size: int) -> NgramLm:
    if n < 1 or k <= 0:
        raise ValueError("need n >= 1 and k > 0")
    transcripts = [list(map(int, t)) for t in transcripts]
    if not transcripts:
        raise ValueError("empty corpus")
    lm = NgramLm(n, k, vocab_size)
    counts: dict = defaultdict(Counter)
    for y in transcripts:
        for i, tok in enumerate(y + [EOS]):
            counts[lm.context(y[:i])][tok] += 1
    lm.counts = {ctx: dict(c) for ctx, c in counts.items()}
    lm.totals = {ctx: sum(c.values()) for ctx, c in counts.items()}
    return lm


def ngram_score(lm: NgramLm, y) -> float:
    """log p(y) including the end-of-sequence event."""
    y = [int(t) for t in y]
    return sum(lm.logprob(tok, y[:i]) for i, tok in enumerate(y + [EOS]))


# ---------------------------------------------------------------------------
# beam search
# ---------------------------------------------------------------------------


def _path_beam(log_probs, beam_size, lm, alpha):
    T, V = log_probs.shape
    beams = np.zeros((1, 0), dtype=np.int64)
    scores = np.zeros(1)
    for t in range(T):
        cand = scores[:, None] + log_probs[t][None, :]
        flat = cand.ravel()
        # stable sort keeps (beam order, token id) order among ties
        top = np.argsort(-flat, kind="stable")[:beam_size]
        src, tok = np.divmod(top, V)
        beams = np.concatenate([beams[src], tok[:, None]], axis=1)
        scores = flat[top]
    if lm is None or alpha == 0:
        return collapse(beams[0])
    best, best_score = None, -np.inf
    for path, s in zip(beams, scores):
        y = collapse(path)
        total = s + alpha * ngram_score(lm, y)
        if total > best_score:
            best, best_score = y, total
    return best


def _prefix_beam(log_probs, beam_size, lm, alpha):
    T, V = log_probs.shape
    use_lm = lm is not None and alpha != 0
    # prefix -> [log p ending in blank, log p ending in non-blank, lm score]
    beams = {(): [0.0, NEG_INF, 0.0]}
    for t in range(T):
        row = log_probs[t]
        nxt: dict = {}

        def slot(prefix, lm_score):
            if prefix not in nxt:
                nxt[prefix] = [NEG_INF, NEG_INF, lm_score]
            return nxt[prefix]

        for prefix, (pb, pnb, lms) in beams.items():
            total = np.logaddexp(pb, pnb)
            s = slot(prefix, lms)
            s[0] = np.logaddexp(s[0], total + row[BLANK])
            if prefix:
                s[1] = np.logaddexp(s[1], pnb + row[prefix[-1]])
            for c in range(V):
                if c == BLANK:
                    continue
                ext = prefix + (c,)
                ext_lm = lms + (alpha * lm.logprob(c, prefix) if use_lm else 0.0)
                e = slot(ext, ext_lm)
                if prefix and c == prefix[-1]:
                    e[1] = np.logaddexp(e[1], pb + row[c])
                else:
                    e[1] = np.logaddexp(e[1], total + row[c])
        ranked = sorted(nxt.items(), key=lambda kv: (-(np.logaddexp(kv[1][0], kv[1][1]) + kv[1][2]), kv[0]))
        beams = dict(ranked[:beam_size])

    def final(kv):
        prefix, (pb, pnb, lms) = kv
        score = np.logaddexp(pb, pnb) + lms
        if use_lm:
            score += alpha * lm.logprob(EOS, prefix)
        return (-score, prefix)

    best = min(beams.items(), key=final)[0]
    return np.asarray(best, dtype=np.int64)


def beam_search(
    log_probs: np.ndarray,
    beam_size: int = 1,
    mode: str = "path",
    lm: NgramLm | None = None,
    alpha: float = 0.0,
) -> np.ndarray:
    """Approximate argmax_y log p(y|x) + alpha * log p_lm(y).

    ``mode="path"`` beams over raw alignments and collapses the winner;
    ``mode="prefix"`` is CTC prefix search summing alignments per prefix.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if lm is None and alpha != 0:
        raise ValueError("alpha > 0 requires an LM")
    log_probs = np.asarray(log_probs, dtype=np.float64)
    if mode == "path":
        return _path_beam(log_probs, beam_size, lm, alpha)
    if mode in ("prefix", "prefix-sum"):
        return _prefix_beam(log_probs, beam_size, lm, alpha)
    raise ValueError(f"unknown beam mode {mode!r}")
