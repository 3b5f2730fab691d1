"""Turn clip/frame probabilities into timestamped events.

Per class, gated by the clip probability: smooth the frame curve with an
iterative median filter, take core frames above the class threshold, grow
each core outward across every contiguous frame still above the low
threshold, drop short runs as noise, and only then merge nearby runs of the
same class. The noise-removal-before-merge order is observable: a short
blip near a long event must vanish rather than extend the event.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dsp import FeatureConfig
from .events import Event, read_events_tsv, write_events_tsv  # noqa: F401

DEFAULT_HOP_SECONDS = FeatureConfig().hop_seconds


@dataclass
class DecodeConfig:
    clip_threshold: float = 0.5
    frame_threshold: dict = field(default_factory=dict)   # label -> threshold
    default_frame_threshold: float = 0.5
    low_threshold: float = 0.08
    min_duration: float = 0.1
    merge_gap: float = 0.2
    median_windows: dict = field(default_factory=dict)    # label -> (w1, w2)
    default_median_windows: tuple = (5, 11)
    hop_seconds: float = DEFAULT_HOP_SECONDS

    def __post_init__(self):
        thresholds = [self.default_frame_threshold, *self.frame_threshold.values()]
        if self.low_threshold >= min(thresholds):
            raise ValueError(
                f"low_threshold {self.low_threshold} must sit below every"
                f" frame threshold (min {min(thresholds)})"
            )
        for wins in [self.default_median_windows, *self.median_windows.values()]:
            for w in wins:
                _check_window(w)
        if self.min_duration < 0 or self.merge_gap < 0 or self.hop_seconds <= 0:
            raise ValueError("durations must be nonnegative and hop positive")

    def frame_threshold_for(self, label: str) -> float:
        return self.frame_threshold.get(label, self.default_frame_threshold)

    def windows_for(self, label: str) -> tuple:
        return tuple(self.median_windows.get(label, self.default_median_windows))


def _check_window(w) -> None:
    if int(w) != w or w < 1 or w % 2 == 0:
        raise ValueError(f"median window must be an odd integer >= 1, got {w}")


# -------------------------------------------------------------- median filter

def median_filter(x, window: int) -> np.ndarray:
    """Sliding median with symmetric window shrink near the edges.

    At position i the radius is reduced to min(r, i, n-1-i), so the window
    stays odd and centered and the first/last samples pass through.
    """
    _check_window(window)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("expected a nonempty 1-D sequence")
    r = window // 2
    out = np.empty_like(x)
    n = x.size
    for i in range(n):
        rr = min(r, i, n - 1 - i)
        out[i] = np.median(x[i - rr:i + rr + 1])
    return out


def median_filter_iterative(x, windows) -> np.ndarray:
    """Apply a sequence of median windows in order (small then large)."""
    windows = list(windows)
    if not windows:
        raise ValueError("need at least one window")
    out = np.asarray(x, dtype=np.float64)
    for w in windows:
        out = median_filter(out, w)
    return out


# --------------------------------------------------------------------- decode

def _runs(mask: np.ndarray):
    """Half-open [start, end) index pairs of the True runs in a bool mask."""
    idx = np.flatnonzero(np.diff(np.concatenate(([False], mask, [False]))
                                 .astype(np.int8)))
    return list(zip(idx[0::2], idx[1::2]))


def _expand_cores(smoothed: np.ndarray, core: np.ndarray,
                  low: float) -> np.ndarray:
    """Grow cores across contiguous frames above the low threshold.

    A core extends to the edges of its surrounding above-low run, so the
    expansions of two nearby cores can meet and fuse into one run.
    """
    above = smoothed > low
    keep = np.zeros_like(core)
    for start, end in _runs(above):
        if core[start:end].any():
            keep[start:end] = True
    return keep


def decode_class(frame_probs: np.ndarray, label: str,
                 cfg: DecodeConfig) -> list[Event]:
    """Events for one class from its frame probability curve."""
    smoothed = median_filter_iterative(frame_probs, cfg.windows_for(label))
    core = smoothed > cfg.frame_threshold_for(label)
    active = _expand_cores(smoothed, core, cfg.low_threshold)
    hop = cfg.hop_seconds
    # noise removal happens before merging: a short blip must disappear
    # rather than get absorbed into a neighbor
    runs = [(s, e) for s, e in _runs(active) if (e - s) * hop >= cfg.min_duration]
    merged: list[list[int]] = []
    for s, e in runs:
        if merged and (s - merged[-1][1]) * hop < cfg.merge_gap:
            merged[-1][1] = e
        else:
            merged.append([s, e])
    return [Event(label, s * hop, e * hop) for s, e in merged]


def decode(clip_probs: np.ndarray, frame_probs: np.ndarray,
           labels: list[str], cfg: DecodeConfig | None = None) -> list[Event]:
    """All events for one clip, sorted by onset then label."""
    cfg = cfg or DecodeConfig()
    clip_probs = np.asarray(clip_probs)
    frame_probs = np.asarray(frame_probs)
    if frame_probs.ndim != 2 or frame_probs.shape[1] != len(labels) \
            or clip_probs.shape != (len(labels),):
        raise ValueError(
            f"shapes {clip_probs.shape}/{frame_probs.shape} do not fit"
            f" {len(labels)} classes"
        )
    out: list[Event] = []
    for k, label in enumerate(labels):
        if clip_probs[k] > cfg.clip_threshold:
            out.extend(decode_class(frame_probs[:, k], label, cfg))
    out.sort(key=lambda ev: (ev.onset, ev.label))
    return out


# ------------------------------------------------------------------- ensemble

def ensemble_average(predictions):
    """Elementwise mean of [(clip_probs, frame_probs), ...] across systems."""
    predictions = list(predictions)
    if not predictions:
        raise ValueError("need at least one system to ensemble")
    clip0, frames0 = predictions[0]
    clip_sum = np.array(clip0, dtype=np.float64)
    frame_sum = np.array(frames0, dtype=np.float64)
    for clip, frames in predictions[1:]:
        clip = np.asarray(clip)
        frames = np.asarray(frames)
        if clip.shape != clip_sum.shape or frames.shape != frame_sum.shape:
            raise ValueError(
                f"ensemble shape mismatch: {clip.shape}/{frames.shape} vs"
                f" {clip_sum.shape}/{frame_sum.shape}"
            )
        clip_sum += clip
        frame_sum += frames
    n = len(predictions)
    return clip_sum / n, frame_sum / n
