"""Continuous pseudo-label training with a dynamic cache.

Schedule of one run (``k`` counts gradient steps from 1):

1. ``k = 1..M``: supervised steps on augmented labeled data, warmup dropout.
2. dropout drops to its main rate; ``k = M+1..M+C``: each step first
   pseudo-labels a random unlabeled utterance into the cache, then takes a
   supervised step.
3. until the step budget: a supervised step with probability N_L/(N_L+N_U),
   otherwise a step on a random cache entry, after which the entry is
   replaced with probability p by a fresh pseudo-label.

Random stream order (one ``numpy.random.Generator`` seeded from the config):
per supervised step -- [phase 3 branch draw], utterance index, augmentation,
dropout; per unlabeled step -- branch draw, cache index (per attempt),
augmentation, dropout, replacement draw, [new utterance index, sampling draws].
Fill steps draw the utterance index, sampling draws, then the supervised step.
Evaluation uses its own generator seeded by ``(seed, step)``.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from plab import losses
from plab.ctc import (
    BLANK,
    CtcInfeasibleError,
    beam_search,
    collapse,
    ctc_loss,
    hard_path,
    log_softmax,
    ngram_train,
    sample_alignment,
    softmax,
)
from plab.data import Dataset
from plab.metrics import (
    CollapseState,
    DetectorConfig,
    blank_stats,
    collapse_detector,
    consecutive_pl_frame_distance,
    consecutive_pl_sequence_distance,
    corpus_ter,
    corpus_wer,
    pl_path_logprob,
    top3_mass,
    top_k,
)
from plab.numerics import (
    AdagradState,
    ConfigError,
    EmaParams,
    ModelParams,
    adagrad_step,
    augment,
    backward,
    ema_update,
    forward,
    forward_tape,
    init_params,
)

log = logging.getLogger(__name__)

STRATEGIES = ("hard-path", "hard-beam", "sampling", "soft", "blended")


@dataclass
class RunConfig:
    seed: int = 0
    steps: int = 20000
    # pseudo-label generation
    strategy: str = "hard-path"
    beam_size: int = 8
    beam_mode: str = "prefix"
    lm_alpha: float = 0.0
    lm_order: int = 3
    sample_tau: float = 1.0
    soft_kind: str = "ce"
    tau: float = 10.0
    beta: float = 1.0
    ce_direction: str = "teacher"
    delta: float = 0.1
    # cache and mixing
    cache_size: int = 100
    cache_p: float = 0.1
    warmup_steps: int = 2000
    n_labeled: int = 1
    n_unlabeled: int = 3
    lam: float = 1.0
    teacher: str = "student"
    ema_decay: float = 0.999
    labeled_exclusion: bool = False
    # regularizers
    entropy_weight: float = 0.0
    seq_prior: str = "none"
    seq_prior_weight: float = 0.0
    blank_target: float = -1.0
    blank_prior_weight: float = 0.0
    smooth_gamma: float = 0.0
    smooth_apply: str = "targets"
    avg_window: int = 1
    filter: bool = False
    filter_threshold: float = 0.1
    filter_retries: int = 3
    # model and optimizer
    hidden: str = "64"
    context: int = 3
    lr: float = 0.05
    lr_warmup: int = 0
    adagrad_eps: float = 1e-8
    dropout_warm: float = 0.3
    dropout_main: float = 0.1
    time_mask_count: int = 1
    time_mask_width: int = 3
    feat_mask_count: int = 1
    feat_mask_width: int = 2
    # diagnostics
    eval_every: int = 100
    probe_size: int = 20
    detector_window: int = 500
    blank_threshold: float = 0.9
    unlabeled_eps: float = 1e-3
    all_blank_run: int = 1000
    abort_on_collapse: bool = True

    def validate(self) -> "RunConfig":
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.cache_size < 1:
            raise ConfigError("cache_size must be >= 1")
        if not 0.0 <= self.cache_p <= 1.0:
            raise ConfigError("cache_p must be in [0, 1]")
        if self.warmup_steps < 0 or self.lam < 0:
            raise ConfigError("warmup_steps and lam must be >= 0")
        if self.n_labeled < 1 or self.n_unlabeled < 1:
            raise ConfigError("n_labeled and n_unlabeled must be >= 1")
        if self.teacher not in ("student", "ema"):
            raise ConfigError("teacher must be 'student' or 'ema'")
        if self.beam_mode not in ("path", "prefix"):
            raise ConfigError("beam_mode must be 'path' or 'prefix'")
        if self.soft_kind not in ("ce", "l2"):
            raise ConfigError("soft_kind must be 'ce' or 'l2'")
        if self.ce_direction not in ("teacher", "literal"):
            raise ConfigError("ce_direction must be 'teacher' or 'literal'")
        if self.seq_prior not in ("none", "uniform", "empirical"):
            raise ConfigError("seq_prior must be none, uniform or empirical")
        if self.smooth_apply not in ("targets", "predictions", "both"):
            raise ConfigError("smooth_apply must be targets, predictions or both")
        if not 1 <= self.avg_window <= 10:
            raise ConfigError("avg_window must be in [1, 10]")
        if not 0.0 < self.filter_threshold <= 1.0:
            raise ConfigError("filter_threshold must be in (0, 1]")
        if min(self.tau, self.beta, self.sample_tau) <= 0:
            raise ConfigError("tau, beta and sample_tau must be > 0")
        if not 0.0 <= self.delta <= 1.0:
            raise ConfigError("delta must be in [0, 1]")
        if self.eval_every < 1 or self.steps < 0:
            raise ConfigError("eval_every must be >= 1 and steps >= 0")
        if min(self.entropy_weight, self.seq_prior_weight, self.blank_prior_weight) < 0:
            raise ConfigError("regularizer weights must be >= 0")
        self.hidden_sizes()
        return self

    def hidden_sizes(self) -> list[int]:
        try:
            sizes = [int(x) for x in str(self.hidden).split(",") if x.strip()]
        except ValueError as exc:
            raise ConfigError(f"hidden must be comma separated ints, got {self.hidden!r}") from exc
        if not sizes or min(sizes) < 1:
            raise ConfigError("hidden needs at least one positive layer width")
        return sizes

    def detector(self) -> DetectorConfig:
        return DetectorConfig(
            window=self.detector_window,
            blank_threshold=self.blank_threshold,
            unlabeled_eps=self.unlabeled_eps,
            all_blank_run=self.all_blank_run,
        )


# ---------------------------------------------------------------------------
# pseudo-labels and cache
# ---------------------------------------------------------------------------


@dataclass
class PseudoLabel:
    """Cache payload: a transcription, teacher logits, or both (blended).

    ``alignment`` is the teacher's hard-path at generation time, kept for
    diagnostics and filtering whatever the strategy.
    """

    kind: str
    alignment: np.ndarray
    transcription: np.ndarray | None = None
    logits: np.ndarray | None = None

    def hard_transcription(self) -> np.ndarray:
        return self.transcription if self.transcription is not None else collapse(self.alignment)


@dataclass
class CacheEntry:
    utt: int
    payload: PseudoLabel
    generated_at: int


@dataclass
class PLCache:
    capacity: int
    p: float
    entries: list[CacheEntry] = field(default_factory=list)
    inserted: int = 0
    replacements: int = 0

    @property
    def full(self) -> bool:
        return len(self.entries) >= self.capacity

    def insert(self, entry: CacheEntry) -> None:
        if self.full:
            raise RuntimeError("cache already holds capacity entries")
        self.entries.append(entry)
        self.inserted += 1

    def duplicates(self) -> int:
        return len(self.entries) - len({e.utt for e in self.entries})


def generate_pl(teacher: ModelParams, features: np.ndarray, cfg: RunConfig, rng=None, lm=None) -> PseudoLabel:
    """Pseudo-label one utterance with the teacher in inference mode."""
    logits = forward(teacher, features, train_mode=False)
    log_probs = log_softmax(logits)
    align = hard_path(log_probs)
    s = cfg.strategy
    if s == "hard-path":
        return PseudoLabel("hard", align, collapse(align))
    if s == "hard-beam":
        y = beam_search(log_probs, cfg.beam_size, cfg.beam_mode, lm if cfg.lm_alpha > 0 else None, cfg.lm_alpha)
        return PseudoLabel("hard", align, y)
    if s == "sampling":
        sampled = sample_alignment(logits, cfg.sample_tau, rng)
        return PseudoLabel("hard", align, collapse(sampled))
    soft = losses.logits_averaging(logits, cfg.avg_window) if cfg.avg_window > 1 else logits
    if s == "soft":
        return PseudoLabel("soft", align, None, soft)
    return PseudoLabel("blended", align, collapse(align), soft)


def cache_fill(cache: PLCache, unlabeled: Dataset, teacher: ModelParams, cfg: RunConfig, rng, step=0, lm=None):
    """Fill an empty cache with ``capacity`` pseudo-labels (no training)."""
    if cache.entries:
        raise RuntimeError("cache_fill expects an empty cache")
    if len(unlabeled) < cache.capacity:
        raise ConfigError(f"unlabeled set ({len(unlabeled)}) smaller than cache size ({cache.capacity})")
    while not cache.full:
        j = int(rng.integers(len(unlabeled)))
        cache.insert(CacheEntry(j, generate_pl(teacher, unlabeled[j].features, cfg, rng, lm), step))
    return cache


def cache_step(cache: PLCache, rng, regenerate) -> tuple[CacheEntry, bool]:
    """Pick a uniform random entry; with probability p replace it in place
    with ``regenerate()``'s fresh entry. Returns the picked entry."""
    if not cache.full:
        raise RuntimeError("cache_step needs a full cache")
    i = int(rng.integers(len(cache.entries)))
    entry = cache.entries[i]
    replaced = bool(rng.random() < cache.p)
    if replaced:
        cache.entries[i] = regenerate()
        cache.replacements += 1
    return entry, replaced


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------


class RunAborted(RuntimeError):
    def __init__(self, reason: str, step: int):
        super().__init__(f"run aborted at step {step}: {reason}")
        self.reason = reason
        self.step = step


@dataclass
class ModelSnapshot:
    params: ModelParams
    optimizer: AdagradState
    ema: EmaParams | None
    step: int
    rng_state: dict
    trainer_state: dict | None = None


@dataclass
class RunResult:
    snapshot: ModelSnapshot
    records: list[dict]
    status: str  # "completed" or "aborted"
    reason: str = ""


def empirical_prior(labeled: Dataset, blank_fraction: float) -> np.ndarray:
    """Token frequencies of labeled transcripts, rescaled to leave
    ``blank_fraction`` of the mass for the blank."""
    V = labeled.vocab_size
    counts = np.zeros(V)
    for y in labeled.transcripts():
        np.add.at(counts, y, 1)
    counts[BLANK] = 0
    prior = (1.0 - blank_fraction) * counts / max(1.0, counts.sum())
    prior[BLANK] = blank_fraction
    return prior / prior.sum()


class Trainer:
    """Mutable training state for one run. ``run()`` drives the schedule."""

    def __init__(self, cfg: RunConfig, labeled: Dataset, unlabeled: Dataset | None, heldout: Dataset | None = None,
                 supervised_only: bool = False, sink=None, fixed_pls: list | None = None,
                 teacher_params: ModelParams | None = None):
        self.cfg = cfg.validate()
        if not len(labeled):
            raise ConfigError("labeled set is empty")
        if not supervised_only and (unlabeled is None or not len(unlabeled)):
            raise ConfigError("unlabeled set is empty")
        if not supervised_only and fixed_pls is None and len(unlabeled) < cfg.cache_size:
            raise ConfigError(f"unlabeled set ({len(unlabeled)}) smaller than cache size ({cfg.cache_size})")
        self.labeled = labeled
        self.unlabeled = unlabeled
        self.heldout = heldout
        self.supervised_only = supervised_only
        self.sink = sink
        self.rng = np.random.default_rng(cfg.seed)
        init_rng = np.random.default_rng([cfg.seed, 1])
        self.params = init_params(labeled.feature_dim, labeled.vocab_size, cfg.hidden_sizes(), cfg.context,
                                  init_rng, cfg.dropout_warm)
        self.opt = AdagradState.for_params(self.params, cfg.lr, cfg.adagrad_eps)
        self.ema = EmaParams.track(self.params, cfg.ema_decay) if cfg.teacher == "ema" else None
        self.cache = PLCache(cfg.cache_size, cfg.cache_p)
        self.step = 0
        self.detector = CollapseState(cfg.detector())
        # offline teacher-student: one frozen pseudo-label per unlabeled utterance
        self.fixed_pls = fixed_pls
        self.frozen_teacher = teacher_params
        self.lm = ngram_train(labeled.transcripts(), cfg.lm_order, 0.5, labeled.vocab_size) if cfg.lm_alpha > 0 else None
        self.prior = None
        if cfg.seq_prior == "uniform":
            self.prior = np.full(labeled.vocab_size, 1.0 / labeled.vocab_size)
        self.counters = dict(labeled_steps=0, unlabeled_steps=0, skipped=0, filtered=0, infeasible=0,
                             post_fill_labeled_steps=0, empty_pls=0, generated=0)
        self.last_used: dict[int, np.ndarray] = {}
        self.window = self._fresh_window()
        n_probe = min(cfg.probe_size, len(unlabeled)) if unlabeled is not None else 0
        self.probes = list(range(n_probe))
        self.probe_prev: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self.records: list[dict] = []

    # -- helpers -----------------------------------------------------------

    @staticmethod
    def _fresh_window():
        return dict(labeled=[], unlabeled=[], reg=[])

    @property
    def teacher(self) -> ModelParams:
        if self.frozen_teacher is not None:
            return self.frozen_teacher
        return self.ema.shadow if self.ema is not None else self.params

    @property
    def fill_end(self) -> int:
        return self.cfg.warmup_steps + self.cfg.cache_size

    def phase(self, k: int) -> str:
        if self.supervised_only:
            return "supervised"
        if self.fixed_pls is not None:
            return "student"
        if k <= self.cfg.warmup_steps:
            return "warmup"
        if k <= self.fill_end:
            return "fill"
        return "pl"

    def lr_at(self, k: int) -> float:
        if self.cfg.lr_warmup > 0:
            return self.cfg.lr * min(1.0, k / self.cfg.lr_warmup)
        return self.cfg.lr

    def _apply(self, grads, k):
        adagrad_step(self.opt, self.params, grads, self.lr_at(k))
        if self.ema is not None:
            ema_update(self.ema, self.params)

    def _augment(self, feats):
        c = self.cfg
        return augment(feats, c.time_mask_count, c.time_mask_width, c.feat_mask_count, c.feat_mask_width, self.rng)

    def _generate(self, j: int) -> CacheEntry:
        pl = generate_pl(self.teacher, self.unlabeled[j].features, self.cfg, self.rng, self.lm)
        self.counters["generated"] += 1
        if pl.hard_transcription().size == 0:
            self.counters["empty_pls"] += 1
        return CacheEntry(j, pl, self.step)

    def _ensure_prior(self):
        if self.cfg.seq_prior == "empirical" and self.prior is None:
            # blank share estimated from the supervised model's labeled hard-paths
            aligns = [hard_path(forward(self.params, u.features)) for u in self.labeled]
            bf, _ = blank_stats(aligns)
            self.prior = empirical_prior(self.labeled, min(bf, 0.999))

    # -- steps -------------------------------------------------------------

    def supervised_step(self, k: int) -> float:
        u = self.labeled[int(self.rng.integers(len(self.labeled)))]
        tape = forward_tape(self.params, self._augment(u.features), True, self.rng)
        loss, d = ctc_loss(log_softmax(tape.output.value), u.transcription)
        self._check_finite(loss, k)
        self._apply(backward(self.params, None, d, tape), k)
        self.counters["labeled_steps"] += 1
        self.window["labeled"].append(loss)
        return loss

    def _strategy_loss(self, z: np.ndarray, pl: PseudoLabel):
        c = self.cfg
        kw = {}
        if c.soft_kind == "ce":
            kw = dict(direction=c.ce_direction,
                      smooth_targets=c.smooth_gamma if c.smooth_apply in ("targets", "both") else 0.0,
                      smooth_predictions=c.smooth_gamma if c.smooth_apply in ("predictions", "both") else 0.0)
        if pl.kind == "hard":
            return ctc_loss(log_softmax(z), pl.transcription)
        if pl.kind == "soft":
            return losses.soft_loss(z, pl.logits, c.soft_kind, c.tau, c.beta, **kw)
        return losses.blended_loss(c.delta, pl.transcription, pl.logits, z, c.soft_kind, c.tau, c.beta, **kw)

    def _regularizers(self, z: np.ndarray):
        c = self.cfg
        total, grad = 0.0, np.zeros_like(z)
        if c.entropy_weight > 0:
            l, g = losses.entropy_reg(z, c.entropy_weight)
            total, grad = total + l, grad + g
        if c.seq_prior != "none" and c.seq_prior_weight > 0:
            self._ensure_prior()
            l, g = losses.sequence_prior_reg(z, self.prior, c.seq_prior_weight)
            total, grad = total + l, grad + g
        if c.blank_target >= 0 and c.blank_prior_weight > 0:
            l, g = losses.blank_prior_reg(z, c.blank_target, c.blank_prior_weight)
            total, grad = total + l, grad + g
        return total, grad

    def _pick_entry(self):
        """Draw cache entries until one passes the filter; None means skip."""
        c = self.cfg
        attempts = 1 + (c.filter_retries if c.filter else 0)
        for _ in range(attempts):
            i = int(self.rng.integers(len(self.cache.entries)))
            entry = self.cache.entries[i]
            if not c.filter:
                return i, entry
            new = entry.payload.hard_transcription()
            if losses.pl_filter(self.last_used.get(entry.utt), new, c.filter_threshold):
                self.last_used[entry.utt] = new
                return i, entry
            self.counters["filtered"] += 1
        return None, None

    def unlabeled_step(self, k: int):
        c = self.cfg
        i, entry = self._pick_entry()
        if entry is None:
            self.counters["skipped"] += 1
            return None
        u = self.unlabeled[entry.utt]
        tape = forward_tape(self.params, self._augment(u.features), True, self.rng)
        z = tape.output.value
        try:
            loss, d = self._strategy_loss(z, entry.payload)
        except CtcInfeasibleError:
            self.counters["infeasible"] += 1
            self.counters["skipped"] += 1
            return None
        reg, g_reg = self._regularizers(z)
        self._check_finite(loss + reg, k)
        grads = backward(self.params, None, c.lam * d + g_reg, tape)
        if self.fixed_pls is None and self.rng.random() < self.cache.p:
            # fresh pseudo-label from the pre-update parameters
            self.cache.entries[i] = self._generate(int(self.rng.integers(len(self.unlabeled))))
            self.cache.replacements += 1
        self._apply(grads, k)
        self.counters["unlabeled_steps"] += 1
        self.window["unlabeled"].append(loss)
        self.window["reg"].append(reg)
        bf, empty = blank_stats([entry.payload.alignment])
        return dict(blank_fraction=bf, empty_fraction=empty, unlabeled_loss=loss)

    def _check_finite(self, loss, k):
        if not math.isfinite(loss):
            self.detector.tripped = True
            self.detector.reason = "non-finite"
            self.detector.tripped_at = k
            raise RunAborted("non-finite", k)

    # -- schedule ----------------------------------------------------------

    def train_step(self) -> None:
        k = self.step + 1
        c = self.cfg
        phase = self.phase(k)
        obs = None
        if phase in ("warmup", "supervised"):
            self.params.dropout = c.dropout_warm if k <= c.warmup_steps else c.dropout_main
            self.supervised_step(k)
        elif phase == "fill":
            self.params.dropout = c.dropout_main
            j = int(self.rng.integers(len(self.unlabeled)))
            self.cache.insert(self._generate(j))
            self.supervised_step(k)
        else:
            self.params.dropout = c.dropout_main
            if phase == "student" and k <= c.warmup_steps:
                self.params.dropout = c.dropout_warm
            go_labeled = self.rng.random() < c.n_labeled / (c.n_labeled + c.n_unlabeled)
            if go_labeled and not c.labeled_exclusion:
                loss = self.supervised_step(k)
                self.counters["post_fill_labeled_steps"] += 1
                obs = dict(labeled_loss=loss)
            elif go_labeled:
                self.counters["skipped"] += 1
            else:
                obs = self.unlabeled_step(k)
        self.step = k
        if obs is not None:
            obs["step"] = k
            collapse_detector(self.detector, obs)
        if k % c.eval_every == 0:
            self.emit(phase)
        if self.detector.tripped and c.abort_on_collapse:
            if k % c.eval_every != 0:
                self.emit("aborted")
            raise RunAborted(self.detector.reason, k)

    def run(self) -> RunResult:
        if self.fixed_pls is not None:
            self._load_fixed()
        try:
            while self.step < self.cfg.steps:
                self.train_step()
        except RunAborted as exc:
            if exc.reason == "non-finite":
                log.error("non-finite loss at step %d; params norm %.3g", exc.step,
                          sum(float(np.sum(a * a)) for a in self.params.arrays()))
                self.emit("aborted")
            return RunResult(self.snapshot(), self.records, "aborted", exc.reason)
        return RunResult(self.snapshot(), self.records, "completed")

    def _load_fixed(self):
        self.cache = PLCache(len(self.fixed_pls), 0.0)
        for j, pl in enumerate(self.fixed_pls):
            self.cache.insert(CacheEntry(j, pl, 0))

    # -- snapshots ---------------------------------------------------------

    def snapshot(self) -> ModelSnapshot:
        state = {k: copy.deepcopy(v) for k, v in self.__dict__.items()
                 if k not in ("labeled", "unlabeled", "heldout", "sink", "params", "opt", "ema", "rng", "frozen_teacher")}
        return ModelSnapshot(self.params.copy(), self.opt.copy(),
                             copy.deepcopy(self.ema), self.step, copy.deepcopy(self.rng.bit_generator.state), state)

    def restore(self, snap: ModelSnapshot) -> None:
        self.params = snap.params.copy()
        self.opt = snap.optimizer.copy()
        self.ema = copy.deepcopy(snap.ema)
        self.rng.bit_generator.state = copy.deepcopy(snap.rng_state)
        if snap.trainer_state:
            for k, v in snap.trainer_state.items():
                setattr(self, k, copy.deepcopy(v))
        self.step = snap.step

    # -- metrics -----------------------------------------------------------

    def emit(self, phase: str) -> dict:
        rec = self.evaluate(phase)
        self.records.append(rec)
        if self.sink is not None:
            self.sink(rec)
        self.window = self._fresh_window()
        return rec

    def evaluate(self, phase: str) -> dict:
        w = self.window

        def mean(xs):
            return float(np.mean(xs)) if xs else None

        rec = dict(step=self.step, phase=phase, labeled_loss=mean(w["labeled"]),
                   unlabeled_loss=mean(w["unlabeled"]), reg_loss=mean(w["reg"]),
                   cache_replacements=self.cache.replacements, cache_size=len(self.cache.entries),
                   cache_duplicates=self.cache.duplicates(), **self.counters)
        if self.heldout is not None and len(self.heldout):
            hyps = [collapse(hard_path(forward(self.params, u.features))) for u in self.heldout]
            refs = self.heldout.transcripts()
            rec["heldout_ter"] = corpus_ter(hyps, refs)
            rec["heldout_wer"] = corpus_wer(hyps, refs)
        if self.cache.entries and self.unlabeled is not None:
            hyps = [e.payload.hard_transcription() for e in self.cache.entries]
            refs = [self.unlabeled[e.utt].transcription for e in self.cache.entries]
            if all(r is not None for r in refs):
                rec["pl_ter"] = corpus_ter(hyps, refs)
                rec["pl_wer"] = corpus_wer(hyps, refs)
        if self.probes and not self.supervised_only:
            rec.update(self._probe_stats())
        rec["detector"] = self.detector.summary()
        return rec

    def _probe_stats(self) -> dict:
        c = self.cfg
        erng = np.random.default_rng([c.seed, self.step, 7])
        aligns, masses, d1, d2, dseq, path_lp, tr_lp, vs_hard_h, vs_hard_r = [], [], [], [], [], [], [], [], []
        for j in self.probes:
            feats = self.unlabeled[j].features
            logits = forward(self.teacher, feats)
            probs = softmax(logits)
            align = hard_path(logits)
            y = collapse(align)
            aligns.append(align)
            masses.append(top3_mass(probs))
            if c.strategy in ("hard-beam", "sampling"):
                pl = generate_pl(self.teacher, feats, c, erng, self.lm)
                vs_hard_h.append(pl.transcription)
                vs_hard_r.append(y)
            if j in self.probe_prev:
                prev_align, prev_y = self.probe_prev[j]
                a, b = consecutive_pl_frame_distance(prev_align, align, top_k(probs, 2))
                d1.append(a)
                d2.append(b)
                dseq.append(consecutive_pl_sequence_distance(prev_y, y))
                p_lp, t_lp = pl_path_logprob(logits, prev_align)
                path_lp.append(p_lp)
                tr_lp.append(t_lp)
            self.probe_prev[j] = (align, y)
        bf, ef = blank_stats(aligns)
        out = dict(blank_fraction=bf, empty_fraction=ef, top3_mass=float(np.mean(masses)))

        def mean(xs):
            return float(np.mean(xs)) if xs else None

        out.update(frame_top1_distance=mean(d1), frame_top2_distance=mean(d2), seq_distance=mean(dseq),
                   path_logprob=mean(path_lp), transcription_logprob=mean(tr_lp))
        if vs_hard_h:
            out["pl_vs_hardpath_ter"] = corpus_ter(vs_hard_h, vs_hard_r)
            out["pl_vs_hardpath_wer"] = corpus_wer(vs_hard_h, vs_hard_r)
        return out


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------


def slimipl_train(cfg: RunConfig, labeled: Dataset, unlabeled: Dataset, heldout: Dataset | None = None,
                  sink=None) -> RunResult:
    return Trainer(cfg, labeled, unlabeled, heldout, sink=sink).run()


def supervised_train(cfg: RunConfig, labeled: Dataset, heldout: Dataset | None = None, sink=None) -> RunResult:
    return Trainer(cfg, labeled, None, heldout, supervised_only=True, sink=sink).run()


def label_all(teacher: ModelParams, unlabeled: Dataset, cfg: RunConfig) -> list[PseudoLabel]:
    rng = np.random.default_rng([cfg.seed, 3])
    return [generate_pl(teacher, u.features, cfg, rng) for u in unlabeled]


def teacher_student_round(cfg: RunConfig, labeled: Dataset, unlabeled: Dataset,
                          teacher: ModelSnapshot | None = None, heldout: Dataset | None = None,
                          sink=None) -> RunResult:
    """Round 0 (no teacher): supervised-only training. Otherwise the frozen
    teacher labels every unlabeled utterance once and a fresh student trains
    on labeled steps mixed N_L:N_U with steps on those fixed pseudo-labels."""
    if teacher is None:
        return supervised_train(cfg, labeled, heldout, sink)
    frozen = teacher.params.copy()
    frozen.dropout = 0.0
    pls = label_all(frozen, unlabeled, cfg)
    trainer = Trainer(cfg, labeled, unlabeled, heldout, sink=sink, fixed_pls=pls, teacher_params=frozen)
    return trainer.run()


def heldout_ter(params: ModelParams, heldout: Dataset) -> float:
    hyps = [collapse(hard_path(forward(params, u.features))) for u in heldout]
    return corpus_ter(hyps, heldout.transcripts())


def config_dict(cfg: RunConfig) -> dict:
    return asdict(cfg)
