"""Nonnegative matrix factorization with generalized-KL multiplicative updates.

Templates are extracted from temporally masked mel spectrograms with r = 1,
collected into a per-class dictionary, and later applied with the basis held
fixed to decode per-frame activations on weakly labeled clips.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import dsp

# denominator / log guard for the multiplicative updates
GUARD = 1e-12
DEFAULT_ITERS = 200


@dataclass
class NmfConfig:
    iters: int = DEFAULT_ITERS
    seed: int = 0
    # dictionary hygiene: rank-1 KL decoding with a fixed basis reduces to an
    # energy sum over the template's support, so a support that sprawls over
    # the noise floor turns the labeler into a broadband energy detector.
    template_floor: float = 0.1        # zero template bins below this fraction of the peak
    background_quantile: float = 0.95  # per-clip floor estimate from event-free frames; 0 = off

    def __post_init__(self):
        if not 0.0 <= self.template_floor < 1.0:
            raise ValueError(
                f"template_floor must be in [0, 1), got {self.template_floor}")
        if not 0.0 <= self.background_quantile <= 1.0:
            raise ValueError(
                f"background_quantile must be in [0, 1], got {self.background_quantile}")


@dataclass
class NmfFactors:
    W: np.ndarray  # basis, mel x r
    H: np.ndarray  # activations, r x time
    r: int
    divergence_trace: list = field(default_factory=list)


@dataclass
class Template:
    spectrum: np.ndarray  # mel-dim, nonnegative, unit max
    label: str
    source_clip: str


def generalized_kl(V: np.ndarray, WH: np.ndarray) -> float:
    """D(V || WH) = sum(V log(V/WH) - V + WH), with 0 log 0 := 0."""
    mask = V > 0
    div = float(np.sum(WH, dtype=np.float64) - np.sum(V, dtype=np.float64))
    v = V[mask]
    div += float(np.sum(v * np.log(v / np.maximum(WH[mask], GUARD)), dtype=np.float64))
    return div


def _update_h(V, W, H):
    WH = np.maximum(W @ H, GUARD)
    H *= (W.T @ (V / WH)) / np.maximum(W.sum(axis=0)[:, None], GUARD)


def _update_w(V, W, H):
    WH = np.maximum(W @ H, GUARD)
    W *= ((V / WH) @ H.T) / np.maximum(H.sum(axis=1)[None, :], GUARD)


def factorize(V: np.ndarray, r: int, iters: int = DEFAULT_ITERS,
              seed: int = 0) -> NmfFactors:
    """Lee-Seung multiplicative updates minimizing generalized KL divergence.

    V must be nonnegative (mel x time for spectrogram input). W and H are
    initialized from a seeded uniform(0, 1] draw; the divergence after each
    iteration is recorded and is non-increasing.
    """
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2:
        raise ValueError("V must be a matrix")
    if np.any(V < 0):
        raise ValueError("V must be nonnegative")
    if not np.any(V > 0):
        raise ValueError("empty spectrogram: V is all-zero")
    if r < 1 or iters < 1:
        raise ValueError("r and iters must be >= 1")
    m, n = V.shape
    rng = np.random.default_rng(seed)
    W = 1.0 - rng.random((m, r))
    H = 1.0 - rng.random((r, n))
    trace = []
    for _ in range(iters):
        _update_h(V, W, H)
        _update_w(V, W, H)
        trace.append(generalized_kl(V, W @ H))
    return NmfFactors(W=W, H=H, r=r, divergence_trace=trace)


def extract_template(spec: np.ndarray, active_frames, iters: int = DEFAULT_ITERS,
                     seed: int = 0, label: str = "", source_clip: str = "") -> Template:
    """Rank-1 NMF template from the temporally masked mel spectrogram.

    spec is time x mel; frames outside active_frames are zeroed before the
    factorization. The single basis column is rescaled to unit max.
    """
    active = np.asarray(sorted(set(int(i) for i in active_frames)), dtype=int)
    if active.size == 0:
        raise ValueError("active_frames must be nonempty")
    V = np.zeros_like(np.asarray(spec, dtype=np.float64).T)
    full = np.asarray(spec, dtype=np.float64).T
    V[:, active] = full[:, active]
    if not np.any(V > 0):
        raise ValueError("masked spectrogram is all-zero")
    factors = factorize(V, r=1, iters=iters, seed=seed)
    spectrum = factors.W[:, 0]
    return Template(spectrum=spectrum / spectrum.max(), label=label,
                    source_clip=source_clip)


def build_dictionary(strong_set, cfg: dsp.FeatureConfig | None = None,
                     nmf_cfg: NmfConfig | None = None) -> dict[str, list[Template]]:
    """Extract one template per event instance, grouped by class.

    strong_set: iterable of (clip_id, mel_spec time x mel, list[Event]).
    Overlapping events are each masked and factorized independently.
    Instances whose masked spectrogram is all-zero are skipped; a class whose
    instances are all skipped raises an error naming it.

    Each clip's stationary floor — the per-mel background_quantile over its
    event-free frames — is subtracted first, and template bins below
    template_floor of the peak are zeroed, so a template's support stays on
    the event's own band instead of sprawling across the noise floor.
    Frames shared with an overlapping event are left out of the extraction
    whenever the event has frames of its own, so a concurrent event's band
    is not baked into the template; an event entirely covered by others
    falls back to its full span.
    """
    cfg = cfg or dsp.FeatureConfig()
    nmf_cfg = nmf_cfg or NmfConfig()
    entries: dict[str, list[Template]] = {}
    seen: set[str] = set()
    for clip_id, spec, event_list in strong_set:
        spec = np.asarray(spec, dtype=np.float64)
        n_frames = spec.shape[0]
        spans = []
        counts = np.zeros(n_frames, dtype=int)
        for ev in event_list:
            start, end = dsp.event_frame_range(ev.onset, ev.offset,
                                               cfg.hop_seconds, n_frames)
            spans.append((ev, start, end))
            counts[start:end] += 1
        quiet = np.flatnonzero(counts == 0)
        if nmf_cfg.background_quantile > 0 and quiet.size:
            spec = dsp.remove_background(spec, nmf_cfg.background_quantile,
                                         frames=quiet)
        for ev, start, end in spans:
            seen.add(ev.label)
            frames = np.arange(start, end)
            sole = frames[counts[start:end] == 1]
            if sole.size:
                frames = sole
            try:
                tpl = extract_template(spec, frames, iters=nmf_cfg.iters,
                                       seed=nmf_cfg.seed, label=ev.label,
                                       source_clip=clip_id)
            except ValueError:
                continue  # silent-region instance, skip
            s = tpl.spectrum
            s[s < nmf_cfg.template_floor * s.max()] = 0.0
            entries.setdefault(ev.label, []).append(tpl)
    missing = sorted(seen - set(entries))
    if missing:
        raise ValueError(f"no usable templates for class(es): {', '.join(missing)}")
    return entries


def decode_activations(spec: np.ndarray, templates: list[Template],
                       iters: int = DEFAULT_ITERS, seed: int = 0) -> np.ndarray:
    """Per-frame activation of one class's templates on a clip.

    The basis is fixed to the stacked template columns; only H is updated.
    Returns max-over-templates activation per frame, normalized to unit max
    over the clip (all zeros if nothing activates).
    """
    if not templates:
        raise ValueError("templates must be nonempty")
    V = np.asarray(spec, dtype=np.float64).T
    dims = {t.spectrum.shape[0] for t in templates}
    if dims != {V.shape[0]}:
        raise ValueError(
            f"template mel dimension {dims} does not match spectrogram {V.shape[0]}"
        )
    W = np.stack([t.spectrum for t in templates], axis=1)
    rng = np.random.default_rng(seed)
    H = 1.0 - rng.random((W.shape[1], V.shape[1]))
    for _ in range(iters):
        _update_h(V, W, H)
    activation = H.max(axis=0)
    peak = activation.max()
    if peak <= 0:
        return np.zeros_like(activation)
    return activation / peak


def average_template(templates: list[Template]) -> Template:
    """Mean of a class's templates, rescaled to unit max (single-template mode)."""
    if not templates:
        raise ValueError("templates must be nonempty")
    mean = np.mean([t.spectrum for t in templates], axis=0)
    return Template(spectrum=mean / mean.max(), label=templates[0].label,
                    source_clip="<average>")


def save_dictionary(entries: dict[str, list[Template]], out_dir) -> None:
    """One TSV per class: source_clip TAB space-separated spectrum values."""
    os.makedirs(out_dir, exist_ok=True)
    for label, templates in sorted(entries.items()):
        if not label or os.sep in label or label.startswith("."):
            raise ValueError(f"class label {label!r} is not a usable file name")
        path = os.path.join(out_dir, f"{label}.tsv")
        with open(path, "w", encoding="utf-8") as fh:
            for tpl in templates:
                values = " ".join(f"{v:.17g}" for v in tpl.spectrum)
                fh.write(f"{tpl.source_clip}\t{values}\n")


def load_dictionary(in_dir) -> dict[str, list[Template]]:
    entries: dict[str, list[Template]] = {}
    for name in sorted(os.listdir(in_dir)):
        if not name.endswith(".tsv"):
            continue
        label = name[: -len(".tsv")]
        templates = []
        path = os.path.join(in_dir, name)
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                try:
                    source_clip, values = line.split("\t")
                    spectrum = np.array([float(v) for v in values.split(" ")])
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: malformed template row") from exc
                templates.append(Template(spectrum=spectrum, label=label,
                                          source_clip=source_clip))
        if templates:
            entries[label] = templates
    if not entries:
        raise ValueError(f"no dictionary files found in {in_dir}")
    return entries
