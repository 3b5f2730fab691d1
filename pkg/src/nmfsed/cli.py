"""Command-line pipeline: gen, dict, label, train, predict, eval.

Typical end-to-end run::

    nmfsed gen out/corpus --classes 3 --validation 20 --seed 7
    nmfsed dict out/corpus --out out/dict
    nmfsed label out/corpus --dict out/dict --out out/labels
    nmfsed train out/corpus --labels out/labels --out out/run --mode ps2
    nmfsed predict out/corpus --model out/run/epoch_008.sm.npz \
        --clips out/corpus/validation.tsv --out out/pred.tsv
    nmfsed eval out/corpus/validation.tsv out/pred.tsv

Every command exits 0 on success and nonzero with a one-line ``error: ...``
on stderr otherwise. All randomness flows from ``--seed`` (or the per-section
seed settings); nothing is seeded from the clock. Each run writes the fully
resolved configuration next to its outputs.
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from dataclasses import replace

import numpy as np

from . import data, dsp, evaluate, labeler, models, nmf, postproc
from . import train as training
from .config import (PipelineConfig, apply_assignments, format_config,
                     load_config, parse_overrides, set_seeds)
from .events import read_events_tsv, write_events_tsv


def _load_cfg(args) -> PipelineConfig:
    cfg = PipelineConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, base=cfg)
    overrides = parse_overrides(getattr(args, "overrides", None))
    if overrides:
        cfg = apply_assignments(cfg, overrides)
    if getattr(args, "seed", None) is not None:
        cfg = set_seeds(cfg, args.seed)
    if getattr(args, "mode", None):
        cfg = replace(cfg, train=replace(cfg.train, mode=args.mode))
    if getattr(args, "theta", None) is not None:
        cfg = replace(cfg, labeler=replace(cfg.labeler, theta=args.theta))
    return cfg


def _write_resolved(cfg: PipelineConfig, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved_config.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_config(cfg))


def _features(manifest: data.CorpusManifest, fname: str, feat_cfg):
    """(mel, log_mel) for one corpus clip."""
    return dsp.logmel(dsp.load_wav(manifest.clip_path(fname)), feat_cfg)


# ------------------------------------------------------------------ commands

def cmd_gen(args) -> int:
    spec = data.GenSpec(
        n_classes=args.classes,
        n_strong=args.strong,
        n_weak=args.weak,
        n_unlabeled=args.unlabeled,
        n_validation=args.validation,
        events_per_clip=tuple(args.events),
        duration_range=tuple(args.duration),
        snr_db=tuple(args.snr),
        hard=args.hard,
        seed=args.seed,
    )
    manifest = data.generate_corpus(spec, args.out_dir, threads=max(1, args.threads))
    with open(os.path.join(args.out_dir, "gen_config.txt"), "w", encoding="utf-8") as fh:
        for f in dataclasses.fields(spec):
            v = getattr(spec, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            fh.write(f"{f.name}={v}\n")
    total = manifest.clip_count + spec.n_validation
    print(f"corpus at {args.out_dir}: {total} clips, "
          f"classes: {', '.join(manifest.label_set)}")
    return 0


def cmd_dict(args) -> int:
    cfg = _load_cfg(args)
    manifest = data.load_manifest(args.corpus)
    strong_labels = {e.label for _, evs in manifest.strong for e in evs}
    missing = sorted(set(manifest.label_set) - strong_labels)
    if missing:
        raise ValueError(
            f"class(es) missing from the strong split: {', '.join(missing)}"
        )
    strong_set = []
    for fname, evs in manifest.strong:
        mel, _ = _features(manifest, fname, cfg.feature)
        strong_set.append((fname, mel, evs))
    entries = nmf.build_dictionary(strong_set, cfg.feature, cfg.nmf)
    nmf.save_dictionary(entries, args.out)
    _write_resolved(cfg, args.out)
    n_templates = sum(len(v) for v in entries.values())
    print(f"{n_templates} templates over {len(entries)} classes -> {args.out}")
    return 0


def cmd_label(args) -> int:
    cfg = _load_cfg(args)
    if not 0.0 <= cfg.labeler.theta <= 1.0:
        raise ValueError(f"theta must be in [0, 1], got {cfg.labeler.theta}")
    manifest = data.load_manifest(args.corpus)
    dictionary = nmf.load_dictionary(args.dict)
    labels = list(manifest.label_set)
    matrices = {}
    for fname, tags in manifest.weak:
        mel, _ = _features(manifest, fname, cfg.feature)
        weak = labeler.WeakAnnotation(clip_id=fname, tags=set(tags))
        matrices[fname] = labeler.approximate_strong_labels(
            mel, weak, dictionary, cfg.labeler.theta, labels=labels,
            cfg=cfg.labeler)
    labeler.save_label_set(args.out, matrices, labels)
    _write_resolved(cfg, args.out)
    print(f"frame labels for {len(matrices)} clips -> {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    manifest = data.load_manifest(args.corpus)
    labels = list(manifest.label_set)
    weak_matrices, label_order = labeler.load_label_set(args.labels)
    if label_order != labels:
        raise ValueError(
            f"label directory classes {label_order} do not match corpus"
            f" label set {labels}"
        )
    feat = cfg.feature

    synthetic = []
    for fname, evs in manifest.strong:
        _, logm = _features(manifest, fname, feat)
        x = logm.astype(np.float32)
        y_f = labeler.events_to_frame_matrix(
            evs, labels, x.shape[0], feat.hop_seconds).astype(np.float32)
        y_c = labeler.tags_to_clip_vector({e.label for e in evs}, labels)
        synthetic.append((fname, x, y_f, y_c))
    weak = []
    for fname, tags in manifest.weak:
        if fname not in weak_matrices:
            raise ValueError(f"no frame labels for weak clip {fname} in {args.labels}")
        _, logm = _features(manifest, fname, feat)
        x = logm.astype(np.float32)
        y_f = weak_matrices[fname].astype(np.float32)
        if y_f.shape != (x.shape[0], len(labels)):
            raise ValueError(
                f"{fname}: label matrix shape {y_f.shape} does not match"
                f" features {(x.shape[0], len(labels))}"
            )
        weak.append((fname, x, y_f, labeler.tags_to_clip_vector(set(tags), labels)))
    unlabeled = []
    for fname in manifest.unlabeled:
        _, logm = _features(manifest, fname, feat)
        unlabeled.append((fname, logm.astype(np.float32)))

    model_cfg = replace(cfg.model, n_classes=len(labels), n_mels=feat.n_mels)
    result = training.fit(cfg.train, model_cfg, synthetic, weak, unlabeled,
                          labels, args.out)
    _write_resolved(cfg, args.out)
    print(f"{cfg.train.epochs} epochs ({cfg.train.mode}); "
          f"final checkpoints {result.sm_paths[-1]} and {result.dm_paths[-1]}")
    return 0


def _clip_list(path) -> list[str]:
    """First column of any TSV, deduplicated, in first-appearance order."""
    seen: set[str] = set()
    out: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            fname = line.split("\t")[0]
            if fname not in seen:
                seen.add(fname)
                out.append(fname)
    return out


def cmd_predict(args) -> int:
    cfg = _load_cfg(args)
    manifest = data.load_manifest(args.corpus)
    clips = _clip_list(args.clips or os.path.join(args.corpus, "unlabeled.tsv"))

    nets = []
    labels: list[str] | None = None
    for path in args.model:
        net, meta = models.load_model(path)
        if meta["kind"] != "sm":
            raise ValueError(f"{path}: expected a frame-level checkpoint (kind 'sm')")
        if labels is None:
            labels = [str(x) for x in meta["labels"]]
        elif [str(x) for x in meta["labels"]] != labels:
            raise ValueError(f"{path}: checkpoints disagree on class labels")
        nets.append(net)

    predictions = {}
    n_events = 0
    for fname in clips:
        _, logm = _features(manifest, fname, cfg.feature)
        per_model = []
        for net in nets:
            frames = models.sm_forward(net, logm[None, :, :])[0]
            clip_probs, _ = models.clip_from_frames(frames[None, :, :])
            per_model.append((clip_probs[0], frames))
        clip_mean, frame_mean = postproc.ensemble_average(per_model)
        events = postproc.decode(clip_mean, frame_mean, labels, cfg.decode)
        if events:
            predictions[fname] = events
            n_events += len(events)
    write_events_tsv(args.out, predictions)
    with open(str(args.out) + ".config.txt", "w", encoding="utf-8") as fh:
        fh.write(format_config(cfg))
    print(f"{n_events} events across {len(clips)} clips -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    refs = read_events_tsv(args.ref)
    ests = read_events_tsv(args.est)
    report = evaluate.score_corpus(refs, ests, cfg.eval)
    print(evaluate.report_text(report))
    print(f"(onset collar {cfg.eval.onset_collar} s, "
          f"offset tolerance max(collar, {cfg.eval.offset_fraction} * duration))")
    if args.out:
        evaluate.write_report_tsv(args.out, report)
    return 0


# -------------------------------------------------------------------- parser

def _add_config_flags(p, seed_default=None):
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("-O", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE",
                   help="override one setting (wins over --config; repeatable)")
    p.add_argument("--seed", type=int, default=seed_default,
                   help="seed every pipeline stage")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nmfsed",
        description="Sound event detection: template labeling, two-branch"
                    " CNN training, decoding, and event-based scoring.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="synthesize a labeled corpus")
    p.add_argument("out_dir")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--strong", type=int, default=20)
    p.add_argument("--weak", type=int, default=20)
    p.add_argument("--unlabeled", type=int, default=40)
    p.add_argument("--validation", type=int, default=0)
    p.add_argument("--events", type=int, nargs=2, default=(1, 3),
                   metavar=("MIN", "MAX"))
    p.add_argument("--duration", type=float, nargs=2, default=(0.8, 3.0),
                   metavar=("MIN", "MAX"))
    p.add_argument("--snr", type=float, nargs=2, default=(12.0, 20.0),
                   metavar=("MIN", "MAX"))
    p.add_argument("--hard", action="store_true",
                   help="overlapping class bands (stress regime)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="parallel clip synthesis (output is identical)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("dict", help="extract per-class spectral templates")
    p.add_argument("corpus")
    p.add_argument("--out", required=True, help="dictionary directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_dict)

    p = sub.add_parser("label", help="approximate frame labels for weak clips")
    p.add_argument("corpus")
    p.add_argument("--dict", required=True, help="dictionary directory")
    p.add_argument("--out", required=True, help="label directory")
    p.add_argument("--theta", type=float, default=None,
                   help="activation threshold in [0, 1]")
    _add_config_flags(p)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("train", help="train the frame and clip models")
    p.add_argument("corpus")
    p.add_argument("--labels", required=True, help="label directory from `label`")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--mode", choices=("ps1", "ps2"), default=None)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="decode events from checkpoints")
    p.add_argument("corpus")
    p.add_argument("--model", required=True, nargs="+",
                   help="one checkpoint, or several to ensemble")
    p.add_argument("--clips", default=None,
                   help="TSV whose first column lists clips"
                        " (default: the corpus unlabeled split)")
    p.add_argument("--out", required=True, help="output events TSV")
    _add_config_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="event-based F1 of estimates vs reference")
    p.add_argument("ref", help="reference events TSV")
    p.add_argument("est", help="estimated events TSV")
    p.add_argument("--out", default=None, help="also write a classwise TSV")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return int(args.func(args) or 0)
    except Exception as exc:  # contract: nonzero exit, one-line summary
        text = str(exc) or exc.__class__.__name__
        print(f"error: {text.splitlines()[0]}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
