"""Command line entry point: ``plab <subcommand> [flags]``.

Exit codes: 0 success, 1 fatal error, 2 run aborted by the collapse detector.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys
from pathlib import Path

import numpy as np

from plab.ctc import BOUNDARY, beam_search, collapse, hard_path, log_softmax, sample_alignment
from plab.data import (
    FormatError,
    MetricsWriter,
    SynthTaskConfig,
    apply_overrides,
    parse_config_text,
    read_dataset,
    read_metrics,
    synth_generate,
    write_config,
    write_dataset,
    write_transcriptions,
)
from plab.engine import RunConfig, slimipl_train, supervised_train, teacher_student_round
from plab.metrics import CollapseState, DetectorConfig, collapse_detector, corpus_ter, corpus_wer
from plab.numerics import ConfigError, forward, load_params, save_params

log = logging.getLogger("plab")

EXIT_OK, EXIT_FATAL, EXIT_COLLAPSE = 0, 1, 2
SPLITS = ("labeled", "unlabeled", "heldout")


def _parse_sets(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise FormatError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def resolve_config(cls, args):
    """Defaults <- --config file <- --seed/--steps <- --set overrides."""
    pairs: dict[str, str] = {}
    if getattr(args, "config", None):
        pairs.update(parse_config_text(Path(args.config).read_text(encoding="utf-8"), args.config))
    if getattr(args, "seed", None) is not None:
        pairs["seed"] = str(args.seed)
    if getattr(args, "steps", None) is not None:
        pairs["steps"] = str(args.steps)
    pairs.update(_parse_sets(getattr(args, "set", None)))
    return apply_overrides(cls(), pairs, args.config or "flags")


def _load_splits(data_dir: Path):
    return [read_dataset(data_dir / f"{name}.jsonl") for name in SPLITS]


def _header(command: str, cfg, datasets) -> dict:
    return {
        "command": command,
        "config": dataclasses.asdict(cfg),
        "detector": dataclasses.asdict(cfg.detector()),
        "data": {name: len(ds) for name, ds in zip(SPLITS, datasets)},
    }


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = resolve_config(SynthTaskConfig, args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, ds in zip(SPLITS, synth_generate(cfg)):
        write_dataset(ds, out / f"{name}.jsonl")
    write_config(cfg, out / "synth.cfg")
    print(f"wrote {cfg.labeled}/{cfg.unlabeled}/{cfg.heldout} utterances to {out}")
    return EXIT_OK


def _finish(result, out: Path) -> int:
    save_params(result.snapshot.params, out / "model.npz")
    last = result.records[-1] if result.records else {}
    ter = last.get("heldout_ter")
    print(f"status={result.status} step={result.snapshot.step} heldout_ter={ter}"
          + (f" reason={result.reason}" if result.reason else ""))
    if result.status == "aborted":
        return EXIT_COLLAPSE if result.reason != "non-finite" else EXIT_FATAL
    return EXIT_OK


def _train(args, command: str) -> int:
    cfg = resolve_config(RunConfig, args).validate()
    labeled, unlabeled, heldout = _load_splits(Path(args.data_dir))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.cfg")
    with MetricsWriter(out / "metrics.jsonl", _header(command, cfg, (labeled, unlabeled, heldout))) as sink:
        if command == "train-sup":
            result = supervised_train(cfg, labeled, heldout, sink)
        else:
            result = slimipl_train(cfg, labeled, unlabeled, heldout, sink)
    return _finish(result, out)


def cmd_train_sup(args) -> int:
    return _train(args, "train-sup")


def cmd_train_pl(args) -> int:
    return _train(args, "train-pl")


def cmd_train_ts(args) -> int:
    cfg = resolve_config(RunConfig, args).validate()
    splits = _load_splits(Path(args.data_dir))
    labeled, unlabeled, heldout = splits
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.cfg")
    teacher = None
    code = EXIT_OK
    for r in range(args.rounds + 1):
        header = _header("train-ts", cfg, splits)
        header["round"] = r
        with MetricsWriter(out / f"metrics_round{r}.jsonl", header) as sink:
            result = teacher_student_round(cfg, labeled, unlabeled, teacher, heldout, sink)
        save_params(result.snapshot.params, out / f"model_round{r}.npz")
        last = result.records[-1] if result.records else {}
        print(f"round={r} status={result.status} heldout_ter={last.get('heldout_ter')}")
        if result.status == "aborted":
            code = EXIT_COLLAPSE if result.reason != "non-finite" else EXIT_FATAL
            break
        teacher = result.snapshot
    if code == EXIT_OK:
        save_params(teacher.params, out / "model.npz")
    return code


def cmd_decode(args) -> int:
    params = load_params(args.model)
    ds = read_dataset(args.data)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    hyps = []
    for u in ds:
        logits = forward(params, u.features)
        lp = log_softmax(logits)
        if args.method == "hard-path":
            y = collapse(hard_path(lp))
        elif args.method == "beam":
            y = beam_search(lp, args.beam_size, args.beam_mode)
        else:
            y = collapse(sample_alignment(logits, args.tau, rng))
        hyps.append(y)
    ids = [u.id for u in ds]
    if args.out:
        write_transcriptions(ids, hyps, ds.alphabet, args.out)
    else:
        for uid, y in zip(ids, hyps):
            print(uid + "\t" + " ".join(ds.alphabet[int(t)] for t in y))
    return EXIT_OK


def _read_symbol_file(path) -> dict[str, list[str]]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            uid, sep, body = line.partition("\t")
            if not sep:
                raise FormatError(f"{path}:{lineno}: expected id<TAB>tokens")
            out[uid] = body.split()
    return out


def cmd_eval(args) -> int:
    hyp = _read_symbol_file(args.hyp)
    ref = _read_symbol_file(args.ref)
    missing = sorted(set(ref) - set(hyp))
    if missing:
        raise FormatError(f"{args.hyp}: missing {len(missing)} ids, first {missing[0]!r}")
    symbols = {args.boundary: BOUNDARY}
    for seq in list(ref.values()) + list(hyp.values()):
        for s in seq:
            symbols.setdefault(s, len(symbols) + 1)

    def encode(seq):
        return [symbols[s] for s in seq]

    ids = sorted(ref)
    h = [encode(hyp[i]) for i in ids]
    r = [encode(ref[i]) for i in ids]
    print(f"TER {corpus_ter(h, r):.6f}")
    print(f"WER {corpus_wer(h, r):.6f}")
    return EXIT_OK


def diagnose_records(header: dict, records: list[dict]) -> CollapseState:
    """Replay emitted records through the detector. Records are K steps
    apart, so the window shrinks to cover the same number of steps."""
    det = header.get("detector") or dataclasses.asdict(DetectorConfig())
    k = max(1, int(header.get("config", {}).get("eval_every", 1)))
    cfg = DetectorConfig(**det)
    cfg = dataclasses.replace(cfg, window=max(1, math.ceil(cfg.window / k)),
                              all_blank_run=max(1, math.ceil(cfg.all_blank_run / k)))
    state = CollapseState(cfg)
    for rec in records:
        collapse_detector(state, {key: rec.get(key) for key in
                                  ("blank_fraction", "empty_fraction", "unlabeled_loss", "labeled_loss", "step")})
    return state


def cmd_diagnose(args) -> int:
    header, records = read_metrics(args.metrics)
    state = diagnose_records(header, records)
    recorded = records[-1].get("detector", {}) if records else {}
    ters = [r["heldout_ter"] for r in records if r.get("heldout_ter") is not None]
    print(f"records {len(records)}")
    print(f"last_step {records[-1]['step'] if records else 0}")
    print(f"recorded_verdict {'tripped:' + recorded.get('reason', '') if recorded.get('tripped') else 'healthy'}")
    print(f"replay_verdict {'tripped:' + state.reason if state.tripped else 'healthy'}")
    if ters:
        print(f"heldout_ter final {ters[-1]:.4f} best {min(ters):.4f}")
    for key in ("blank_fraction", "empty_fraction", "top3_mass", "seq_distance", "pl_ter"):
        vals = [r[key] for r in records if r.get(key) is not None]
        if vals:
            print(f"{key} first {vals[0]:.4f} last {vals[-1]:.4f} max {max(vals):.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="plab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--out-dir", required=True)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
        if data:
            sp.add_argument("--data-dir", required=True)

    sp = sub.add_parser("gen-data", help="generate the synthetic task")
    common(sp, data=False)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train-sup", help="supervised-only training")
    common(sp)
    sp.set_defaults(func=cmd_train_sup)

    sp = sub.add_parser("train-pl", help="continuous pseudo-label training")
    common(sp)
    sp.set_defaults(func=cmd_train_pl)

    sp = sub.add_parser("train-ts", help="offline teacher-student rounds")
    common(sp)
    sp.add_argument("--rounds", type=int, default=1)
    sp.set_defaults(func=cmd_train_ts)

    sp = sub.add_parser("decode", help="decode a dataset with a trained model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--method", choices=("hard-path", "beam", "sampling"), default="hard-path")
    sp.add_argument("--beam-size", type=int, default=1)
    sp.add_argument("--beam-mode", choices=("path", "prefix"), default="path")
    sp.add_argument("--tau", type=float, default=1.0)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("eval", help="TER/WER between two transcription files")
    sp.add_argument("--hyp", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--boundary", default="|")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("diagnose", help="replay a metrics file through the collapse detector")
    sp.add_argument("--metrics", required=True)
    sp.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FormatError, ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"plab: error: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
