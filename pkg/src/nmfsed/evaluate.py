"""Event-based scoring with onset/offset collars.

A reference and an estimate of the same class match when their onsets are
within the collar and their offsets within max(collar, fraction of the
reference duration). Matching is one-to-one, chosen greedily by ascending
onset distance. Counts pool over clips per class; the headline number is the
micro-averaged F1 over pooled counts, with the macro mean reported alongside.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .events import Event


@dataclass
class EvalConfig:
    onset_collar: float = 0.2
    offset_fraction: float = 0.2

    def __post_init__(self):
        if self.onset_collar <= 0 or self.offset_fraction < 0:
            raise ValueError("collar must be positive, fraction nonnegative")


@dataclass
class MatchResult:
    tp: dict
    fp: dict
    fn: dict
    pairs: list  # (ref Event, est Event)


def _pair_ok(ref: Event, est: Event, cfg: EvalConfig) -> bool:
    if ref.label != est.label:
        return False
    if abs(ref.onset - est.onset) > cfg.onset_collar:
        return False
    tol = max(cfg.onset_collar, cfg.offset_fraction * ref.duration)
    return abs(ref.offset - est.offset) <= tol


def match_events(ref: list[Event], est: list[Event],
                 cfg: EvalConfig | None = None) -> MatchResult:
    """Greedy one-to-one matching for a single clip."""
    cfg = cfg or EvalConfig()
    labels = sorted({ev.label for ev in ref} | {ev.label for ev in est})
    tp = {lab: 0 for lab in labels}
    fp = dict(tp)
    fn = dict(tp)
    pairs = []
    candidates = []
    for i, r in enumerate(ref):
        for j, e in enumerate(est):
            if _pair_ok(r, e, cfg):
                candidates.append((abs(r.onset - e.onset), i, j))
    candidates.sort()  # ascending onset distance; index order breaks ties
    ref_used = [False] * len(ref)
    est_used = [False] * len(est)
    for _, i, j in candidates:
        if not ref_used[i] and not est_used[j]:
            ref_used[i] = True
            est_used[j] = True
            tp[ref[i].label] += 1
            pairs.append((ref[i], est[j]))
    for i, r in enumerate(ref):
        if not ref_used[i]:
            fn[r.label] += 1
    for j, e in enumerate(est):
        if not est_used[j]:
            fp[e.label] += 1
    return MatchResult(tp=tp, fp=fp, fn=fn, pairs=pairs)


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be nonnegative")
    if tp == 0 and fp == 0 and fn == 0:
        return 1.0
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


@dataclass
class ScoreReport:
    micro_f1: float
    macro_f1: float
    classwise: dict          # label -> {"tp", "fp", "fn", "f1"}
    n_clips: int
    config: EvalConfig = field(default_factory=EvalConfig)


def _as_clip_dict(events_by_clip, what: str) -> dict:
    if isinstance(events_by_clip, dict):
        return events_by_clip
    out = {}
    for clip_id, events in events_by_clip:
        if clip_id in out:
            raise ValueError(f"duplicate clip id in {what}: {clip_id}")
        out[clip_id] = events
    return out


def score_corpus(refs, ests, cfg: EvalConfig | None = None,
                 labels: list[str] | None = None) -> ScoreReport:
    """Pooled per-class counts over all clips; micro and macro F1.

    refs/ests: {clip_id: [Event, ...]} or (clip_id, events) pairs. Clips
    missing from ests count as empty predictions; clips only in ests
    contribute false positives.
    """
    cfg = cfg or EvalConfig()
    refs = _as_clip_dict(refs, "reference")
    ests = _as_clip_dict(ests, "estimate")
    label_set = set(labels or [])
    for events in list(refs.values()) + list(ests.values()):
        label_set |= {ev.label for ev in events}
    label_list = sorted(label_set)
    totals = {lab: {"tp": 0, "fp": 0, "fn": 0} for lab in label_list}
    for clip_id in sorted(set(refs) | set(ests)):
        result = match_events(refs.get(clip_id, []), ests.get(clip_id, []), cfg)
        for lab in result.tp:
            totals[lab]["tp"] += result.tp[lab]
            totals[lab]["fp"] += result.fp[lab]
            totals[lab]["fn"] += result.fn[lab]
    classwise = {}
    for lab in label_list:
        c = totals[lab]
        classwise[lab] = dict(c, f1=f1_from_counts(c["tp"], c["fp"], c["fn"]))
    pooled = [sum(totals[lab][key] for lab in label_list)
              for key in ("tp", "fp", "fn")]
    micro = f1_from_counts(*pooled)
    macro = (float(np.mean([classwise[lab]["f1"] for lab in label_list]))
             if label_list else 1.0)
    return ScoreReport(micro_f1=micro, macro_f1=macro, classwise=classwise,
                       n_clips=len(set(refs) | set(ests)), config=cfg)


# ------------------------------------------------------------------ reporting

def report_text(report: ScoreReport) -> str:
    lines = [
        f"clips scored: {report.n_clips}",
        f"event-based F1 (micro): {100.0 * report.micro_f1:.1f}%",
        f"event-based F1 (macro): {100.0 * report.macro_f1:.1f}%",
        "",
        f"{'class':<24}{'tp':>6}{'fp':>6}{'fn':>6}{'F1 (%)':>9}",
    ]
    for lab in sorted(report.classwise):
        c = report.classwise[lab]
        lines.append(f"{lab:<24}{c['tp']:>6}{c['fp']:>6}{c['fn']:>6}"
                     f"{100.0 * c['f1']:>9.1f}")
    return "\n".join(lines)


def write_report_tsv(path, report: ScoreReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("class\ttp\tfp\tfn\tf1\n")
        for lab in sorted(report.classwise):
            c = report.classwise[lab]
            fh.write(f"{lab}\t{c['tp']}\t{c['fp']}\t{c['fn']}\t{c['f1']:.6f}\n")
        fh.write(f"__micro__\t\t\t\t{report.micro_f1:.6f}\n")
        fh.write(f"__macro__\t\t\t\t{report.macro_f1:.6f}\n")
