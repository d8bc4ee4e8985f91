"""Synthetic speech-like data, dataset files, flat config files and metrics files.

Dataset file: JSON lines. Line 1 is a header
``{"format": "plab-dataset", "version": 1, "vocab_size", "feature_dim", "alphabet"}``;
every following line is one utterance ``{"id", "frames", "features", "transcription"}``
with ``transcription`` null when absent. Floats are written with ``repr`` so a
write/read round trip is exact.

Config file: one ``key = value`` per line, ``#`` starts a comment.

Metrics file: JSON lines, a ``{"type": "header", ...}`` line carrying the full
effective config followed by one ``{"type": "record", ...}`` line per emission.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from plab.ctc import BLANK, BOUNDARY

DATASET_FORMAT = "plab-dataset"
DATASET_VERSION = 1
METRICS_VERSION = 1


class FormatError(ValueError):
    """Malformed or incompatible file."""


def default_alphabet(vocab_size: int) -> list[str]:
    letters = "abcdefghijklmnopqrstuvwxyz0123456789"
    if vocab_size - 2 > len(letters):
        raise ValueError(f"vocab size {vocab_size} too large for the default alphabet")
    return ["#", "|", *letters[: vocab_size - 2]]


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    transcription: np.ndarray | None = None

    @property
    def frames(self) -> int:
        return self.features.shape[0]


@dataclass
class Dataset:
    vocab_size: int
    feature_dim: int
    alphabet: list[str]
    utterances: list[Utterance] = field(default_factory=list)

    def __len__(self):
        return len(self.utterances)

    def __getitem__(self, i):
        return self.utterances[i]

    def __iter__(self):
        return iter(self.utterances)

    def transcripts(self) -> list[np.ndarray]:
        return [u.transcription for u in self.utterances]


# ---------------------------------------------------------------------------
# synthetic task
# ---------------------------------------------------------------------------


# Calibrated once on the defaults below (seed 0, 20k steps): supervised-only
# heldout TER 0.164, hard-path pseudo-labeling 0.092. Runs on the default task
# are expected to keep at least this absolute TER gain.
EXPECTED_PL_GAIN = 0.02


@dataclass
class SynthTaskConfig:
    vocab_size: int = 12
    feature_dim: int = 8
    min_tokens: int = 3
    max_tokens: int = 10
    max_word_len: int = 4
    min_frames: int = 2
    max_frames: int = 5
    noise: float = 0.3
    prototype_scale: float = 1.0
    speaker_warp: float = 0.0
    speaker_shift: float = 0.0
    sustain: float = 0.3
    pause_min: int = 0
    pause_max: int = 3
    labeled: int = 20
    unlabeled: int = 2000
    heldout: int = 200
    seed: int = 0

    def validate(self):
        if self.vocab_size < 3:
            raise ValueError("vocab_size must be >= 3")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ValueError("token range empty")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ValueError("frame range empty")
        if min(self.noise, self.speaker_warp, self.speaker_shift) < 0:
            raise ValueError("noise and speaker variation must be >= 0")
        if not 0 <= self.pause_min <= self.pause_max:
            raise ValueError("pause range empty")
        if self.max_word_len < 1 or self.feature_dim < 1:
            raise ValueError("max_word_len and feature_dim must be >= 1")


def prototypes(cfg: SynthTaskConfig) -> np.ndarray:
    """One mean feature vector per token id (row 0, the blank, is unused)."""
    rng = np.random.default_rng([cfg.seed, 0xC0FFEE])
    return cfg.prototype_scale * rng.normal(size=(cfg.vocab_size, cfg.feature_dim))


def _draw_transcription(cfg: SynthTaskConfig, rng: np.random.Generator) -> np.ndarray:
    letters = np.arange(2, cfg.vocab_size)
    length = int(rng.integers(cfg.min_tokens, cfg.max_tokens + 1))
    out: list[int] = []
    remaining = length
    while remaining > 0:
        # a word must leave either nothing or room for a boundary plus a letter
        choices = [w for w in range(1, min(cfg.max_word_len, remaining) + 1) if remaining - w != 1]
        w = int(rng.choice(choices))
        prev = -1
        for _ in range(w):
            pool = letters[letters != prev] if len(letters) > 1 else letters
            prev = int(rng.choice(pool))
            out.append(prev)
        remaining -= w
        if remaining > 0:
            out.append(BOUNDARY)
            remaining -= 1
    return np.asarray(out, dtype=np.int64)


def synth_utterance(cfg: SynthTaskConfig, protos: np.ndarray, rng: np.random.Generator, uid: str) -> Utterance:
    """Token runs of prototype frames; the first frame of a run carries the full
    prototype and later frames are scaled by ``sustain``. Word boundaries are
    followed by ``pause_min..pause_max`` silent (zero-mean) frames."""
    y = _draw_transcription(cfg, rng)
    runs = rng.integers(cfg.min_frames, cfg.max_frames + 1, size=len(y))
    pauses = rng.integers(cfg.pause_min, cfg.pause_max + 1, size=len(y))
    d = cfg.feature_dim
    pieces = []
    for tok, run, pause in zip(y, runs, pauses):
        block = np.repeat(protos[tok][None, :], run, axis=0)
        block[1:] *= cfg.sustain
        pieces.append(block)
        if tok == BOUNDARY and pause:
            pieces.append(np.zeros((pause, d)))
    frames = np.concatenate(pieces, axis=0)
    # per-utterance speaker: a random linear warp near identity plus an offset
    warp = np.eye(d) + cfg.speaker_warp * rng.normal(size=(d, d)) / np.sqrt(d)
    shift = cfg.speaker_shift * rng.normal(size=d)
    frames = frames @ warp + shift
    frames = frames + cfg.noise * rng.normal(size=frames.shape)
    return Utterance(uid, frames, y)


def synth_generate(cfg: SynthTaskConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Labeled, unlabeled and heldout splits. Every split keeps golden
    transcripts; the unlabeled ones are only for evaluation."""
    cfg.validate()
    protos = prototypes(cfg)
    alphabet = default_alphabet(cfg.vocab_size)
    splits = []
    for split_idx, (name, count) in enumerate(
        [("lab", cfg.labeled), ("unl", cfg.unlabeled), ("dev", cfg.heldout)]
    ):
        ds = Dataset(cfg.vocab_size, cfg.feature_dim, alphabet)
        for i in range(count):
            rng = np.random.default_rng([cfg.seed, split_idx, i])
            ds.utterances.append(synth_utterance(cfg, protos, rng, f"{name}-{i:05d}"))
        splits.append(ds)
    return tuple(splits)


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------


def write_dataset(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        header = {
            "format": DATASET_FORMAT,
            "version": DATASET_VERSION,
            "vocab_size": ds.vocab_size,
            "feature_dim": ds.feature_dim,
            "alphabet": ds.alphabet,
        }
        f.write(json.dumps(header) + "\n")
        for u in ds.utterances:
            rec = {
                "id": u.id,
                "frames": int(u.frames),
                "features": u.features.tolist(),
                "transcription": None if u.transcription is None else [int(t) for t in u.transcription],
            }
            f.write(json.dumps(rec) + "\n")


def read_dataset(path) -> Dataset:
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:1: bad header ({exc})") from exc
    if header.get("format") != DATASET_FORMAT:
        raise FormatError(f"{path}:1: not a {DATASET_FORMAT} file")
    if header.get("version") != DATASET_VERSION:
        raise FormatError(f"{path}:1: version {header.get('version')} != supported {DATASET_VERSION}")
    V, d = int(header["vocab_size"]), int(header["feature_dim"])
    ds = Dataset(V, d, list(header["alphabet"]))
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            feats = np.asarray(rec["features"], dtype=np.float64).reshape(int(rec["frames"]), d)
            tr = rec["transcription"]
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"{path}:{lineno}: malformed record ({exc})") from exc
        if rec["id"] in seen:
            raise FormatError(f"{path}:{lineno}: duplicate id {rec['id']!r}")
        seen.add(rec["id"])
        if tr is not None:
            tr = np.asarray(tr, dtype=np.int64)
            if np.any(tr == BLANK) or np.any(tr < 0) or np.any(tr >= V):
                raise FormatError(f"{path}:{lineno}: transcription has blank or out-of-range ids")
        ds.utterances.append(Utterance(rec["id"], feats, tr))
    return ds


def write_transcriptions(ids, transcripts, alphabet, path) -> None:
    """``id<TAB>space separated token symbols`` per line."""
    with open(path, "w", encoding="utf-8") as f:
        for uid, y in zip(ids, transcripts):
            f.write(uid + "\t" + " ".join(alphabet[int(t)] for t in y) + "\n")


def read_transcriptions(path, alphabet) -> dict[str, np.ndarray]:
    index = {s: i for i, s in enumerate(alphabet)}
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            uid, _, body = line.partition("\t")
            try:
                out[uid] = np.asarray([index[s] for s in body.split()], dtype=np.int64)
            except KeyError as exc:
                raise FormatError(f"{path}:{lineno}: unknown symbol {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# flat key/value configs
# ---------------------------------------------------------------------------


def _coerce(kind, text: str, key: str):
    text = text.strip()
    try:
        if kind in (bool, "bool"):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
        return text
    except ValueError as exc:
        raise FormatError(f"config key {key!r}: cannot parse {text!r} as {getattr(kind, '__name__', kind)}") from exc


def apply_overrides(cfg, pairs: dict[str, str], source: str = "overrides"):
    """Return a copy of dataclass ``cfg`` with string values parsed per field type."""
    types = {f.name: f.type for f in fields(cfg)}
    unknown = sorted(k for k in pairs if k not in types)
    if unknown:
        raise FormatError(f"{source}: unknown config keys: {', '.join(unknown)}")
    values = {k: _coerce(types[k], v, k) for k, v in pairs.items()}
    return dataclasses.replace(cfg, **values)


def parse_config_text(text: str, source: str = "config") -> dict[str, str]:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{source}:{lineno}: expected key = value")
        pairs[key.strip()] = value.strip()
    return pairs


def read_config(path, cls):
    """Read a flat config file into dataclass ``cls``; unknown keys are fatal."""
    text = Path(path).read_text(encoding="utf-8")
    return apply_overrides(cls(), parse_config_text(text, str(path)), str(path))


def write_config(cfg, path) -> None:
    lines = [f"{f.name} = {_fmt(getattr(cfg, f.name))}" for f in fields(cfg)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


# ---------------------------------------------------------------------------
# metrics files
# ---------------------------------------------------------------------------


def _jsonable(v: Any):
    if isinstance(v, (np.floating,)):
        v = float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


class MetricsWriter:
    """Appends one JSON object per line and flushes each, so a killed run
    still leaves a parseable prefix."""

    def __init__(self, path, header: dict):
        self.path = Path(path)
        self._f = open(self.path, "w", encoding="utf-8")
        self._write({"type": "header", "version": METRICS_VERSION, **header})

    def _write(self, obj):
        self._f.write(json.dumps(_jsonable(obj), sort_keys=True) + "\n")
        self._f.flush()

    def __call__(self, record: dict):
        self._write({"type": "record", **record})

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_metrics(records, path, header: dict) -> None:
    with MetricsWriter(path, header) as w:
        for r in records:
            w(r)


def read_metrics(path) -> tuple[dict, list[dict]]:
    header, records = None, []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: malformed metrics line ({exc})") from exc
            if obj.get("type") == "header":
                if obj.get("version") != METRICS_VERSION:
                    raise FormatError(f"{path}:{lineno}: metrics version {obj.get('version')} unsupported")
                header = obj
            elif obj.get("type") == "record":
                records.append(obj)
            else:
                raise FormatError(f"{path}:{lineno}: unknown line type {obj.get('type')!r}")
    if header is None:
        raise FormatError(f"{path}: missing header line")
    return header, records
