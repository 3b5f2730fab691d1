"""Approximate strong labels for weakly labeled clips from NMF activations.

Each tagged class is decoded independently against its own dictionary entry;
frames whose normalized activation reaches the threshold are marked active.
Untagged classes stay all-zero.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import dsp, nmf
from .events import Event


@dataclass
class WeakAnnotation:
    clip_id: str
    tags: set = field(default_factory=set)


@dataclass
class LabelerConfig:
    theta: float = 0.3  # threshold on unit-max-normalized activation, tunable
    single_template: bool = False  # average class templates and decode with r=1
    iters: int = nmf.DEFAULT_ITERS
    seed: int = 0
    noise_quantile: float = 0.25  # stationary-floor removal before decoding; 0 = off

    def __post_init__(self):
        if not 0.0 <= self.noise_quantile < 1.0:
            raise ValueError(
                f"noise_quantile must be in [0, 1), got {self.noise_quantile}")


def approximate_strong_labels(spec: np.ndarray, weak: WeakAnnotation,
                              dictionary: dict[str, list[nmf.Template]],
                              theta: float, labels: list[str] | None = None,
                              cfg: LabelerConfig | None = None) -> np.ndarray:
    """Binary frame-label matrix (n_frames x K) for one weakly labeled clip.

    Column order follows `labels` (default: sorted dictionary classes). Frame
    t of a tagged class is 1 iff its normalized activation is >= theta.
    The clip's stationary noise floor (per-mel noise_quantile over time) is
    subtracted first; otherwise the fixed-basis decode tracks in-band energy,
    floor included, and quiet frames cross theta on noisy recordings.
    """
    cfg = cfg or LabelerConfig()
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta must be in [0, 1], got {theta}")
    if not weak.tags:
        raise ValueError(f"clip {weak.clip_id}: weak tag set is empty")
    if cfg.noise_quantile > 0:
        spec = dsp.remove_background(spec, cfg.noise_quantile)
    labels = list(labels) if labels is not None else sorted(dictionary)
    col = {lab: k for k, lab in enumerate(labels)}
    missing = sorted(t for t in weak.tags if t not in dictionary)
    if missing:
        raise ValueError(
            f"clip {weak.clip_id}: no dictionary entry for class(es): "
            + ", ".join(missing)
        )
    unknown = sorted(t for t in weak.tags if t not in col)
    if unknown:
        raise ValueError(
            f"clip {weak.clip_id}: tag(s) outside the label set: " + ", ".join(unknown)
        )
    out = np.zeros((spec.shape[0], len(labels)), dtype=np.uint8)
    for tag in sorted(weak.tags):
        templates = dictionary[tag]
        if cfg.single_template:
            templates = [nmf.average_template(templates)]
        act = nmf.decode_activations(spec, templates, iters=cfg.iters, seed=cfg.seed)
        out[:, col[tag]] = act >= theta
    return out


def events_to_frame_matrix(event_list: list[Event], labels: list[str],
                           n_frames: int, hop_seconds: float) -> np.ndarray:
    """Exact frame-label matrix from timestamped events (synthetic strong data)."""
    col = {lab: k for k, lab in enumerate(labels)}
    out = np.zeros((n_frames, len(labels)), dtype=np.uint8)
    for ev in event_list:
        if ev.label not in col:
            raise ValueError(f"event class {ev.label!r} outside the label set")
        start, end = dsp.event_frame_range(ev.onset, ev.offset, hop_seconds, n_frames)
        out[start:end, col[ev.label]] = 1
    return out


def tags_to_clip_vector(tags, labels: list[str]) -> np.ndarray:
    """Multi-hot clip-tag vector in canonical label order."""
    col = {lab: k for k, lab in enumerate(labels)}
    out = np.zeros(len(labels), dtype=np.float32)
    for tag in tags:
        if tag not in col:
            raise ValueError(f"tag {tag!r} outside the label set")
        out[col[tag]] = 1.0
    return out


# ------------------------------------------------------------------ file I/O

def save_label_matrix(path, matrix: np.ndarray, labels: list[str]) -> None:
    """Per-clip TSV: header, then frame_index plus one binary column per class."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("frame_index\t" + "\t".join(labels) + "\n")
        for t in range(matrix.shape[0]):
            fh.write(str(t) + "\t" + "\t".join(str(int(v)) for v in matrix[t]) + "\n")


def load_label_matrix(path) -> tuple[np.ndarray, list[str]]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if not header or header[0] != "frame_index":
            raise ValueError(f"{path}: missing frame_index header")
        labels = header[1:]
        rows = []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != len(labels) + 1:
                raise ValueError(f"{path}:{lineno}: wrong column count")
            rows.append([int(v) for v in parts[1:]])
    return np.asarray(rows, dtype=np.uint8), labels


def save_label_set(out_dir, matrices: dict[str, np.ndarray], labels: list[str]) -> str:
    """Write one label file per clip plus a manifest TSV; returns manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = os.path.join(out_dir, "manifest.tsv")
    with open(manifest, "w", encoding="utf-8") as fh:
        for clip_id in sorted(matrices):
            fname = f"{os.path.splitext(clip_id)[0]}_labels.tsv"
            save_label_matrix(os.path.join(out_dir, fname), matrices[clip_id], labels)
            fh.write(f"{clip_id}\t{fname}\n")
    return manifest


def load_label_set(label_dir) -> tuple[dict[str, np.ndarray], list[str]]:
    """Read back a label directory; returns ({clip_id: matrix}, labels)."""
    manifest = os.path.join(label_dir, "manifest.tsv")
    matrices: dict[str, np.ndarray] = {}
    labels: list[str] | None = None
    with open(manifest, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                clip_id, fname = line.split("\t")
            except ValueError as exc:
                raise ValueError(f"{manifest}:{lineno}: malformed row") from exc
            matrix, file_labels = load_label_matrix(os.path.join(label_dir, fname))
            if labels is None:
                labels = file_labels
            elif labels != file_labels:
                raise ValueError(f"{fname}: label order differs from manifest peers")
            matrices[clip_id] = matrix
    if labels is None:
        raise ValueError(f"{manifest}: empty label manifest")
    return matrices, labels
