"""Synthetic training corpora and TSV manifest ingestion.

A corpus directory looks like::

    out/
      audio/*.wav          10 s mono clips, 22050 Hz, 16-bit PCM
      strong.tsv           filename TAB onset TAB offset TAB label
      weak.tsv             filename TAB comma-joined tags (no spaces)
      unlabeled.tsv        filename
      truth_weak.tsv       true events for the weak split (scoring only)
      truth_unlabeled.tsv  true events for the unlabeled split (scoring only)
      validation.tsv       held-out reference events, when n_validation > 0

Generated clips are archetype events (harmonic tone, band-limited noise,
frequency sweep, tick train) mixed over a pink-noise bed. Each class owns a
log-spaced frequency band; bands are disjoint by default so template-based
labeling has a verifiable easy regime, and overlap when ``hard`` is set.

Every clip is synthesized from its own rng seeded with
``[seed, split_index, clip_index]``, so output is deterministic and
independent of how many clips the other splits request.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.signal import chirp

from . import dsp
from .events import Event, read_events_tsv, write_events_tsv

SAMPLE_RATE = 22050
CLIP_SECONDS = 10.0
CLIP_SAMPLES = int(round(CLIP_SECONDS * SAMPLE_RATE))
FREQ_LO = 300.0
FREQ_HI = 10000.0
MIN_EVENT_SECONDS = 0.25
EDGE_PAD = 0.5  # silence margin at clip start/end, seconds
MIN_GAP = 0.5  # minimum spacing between consecutive events, seconds
PEAK_DBFS = -3.0

_ARCHETYPES = ("tone", "hiss", "sweep", "ticks")


@dataclass
class GenSpec:
    """Knobs for :func:`generate_corpus`."""

    n_classes: int = 3
    n_strong: int = 20
    n_weak: int = 20
    n_unlabeled: int = 40
    n_validation: int = 0
    events_per_clip: tuple[int, int] = (1, 3)
    duration_range: tuple[float, float] = (0.8, 3.0)
    snr_db: tuple[float, float] = (12.0, 20.0)
    hard: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        for name in ("n_strong", "n_weak", "n_unlabeled", "n_validation"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        lo, hi = self.events_per_clip
        if not (1 <= lo <= hi):
            raise ValueError("events_per_clip must satisfy 1 <= lo <= hi")
        d_lo, d_hi = self.duration_range
        if d_lo < MIN_EVENT_SECONDS:
            raise ValueError(f"event durations must be >= {MIN_EVENT_SECONDS} s")
        if d_hi < d_lo:
            raise ValueError("duration_range must be (lo, hi) with lo <= hi")
        if 2 * EDGE_PAD + d_lo > CLIP_SECONDS:
            raise ValueError("shortest event does not fit inside a clip")
        s_lo, s_hi = self.snr_db
        if s_hi < s_lo:
            raise ValueError("snr_db must be (lo, hi) with lo <= hi")


@dataclass
class CorpusManifest:
    """Parsed view of a corpus directory (annotations only, no audio)."""

    root: str
    strong: list[tuple[str, list[Event]]]
    weak: list[tuple[str, tuple[str, ...]]]
    unlabeled: list[str]
    label_set: tuple[str, ...]

    def clip_path(self, fname: str) -> str:
        return os.path.join(self.root, "audio", fname)

    @property
    def clip_count(self) -> int:
        return len(self.strong) + len(self.weak) + len(self.unlabeled)


def class_names(n_classes: int) -> list[str]:
    """Archetype-derived class names: tone0, hiss1, sweep2, ticks3, tone4, ..."""
    return [f"{_ARCHETYPES[k % 4]}{k}" for k in range(n_classes)]


def class_bands(n_classes: int, hard: bool = False) -> list[tuple[float, float]]:
    """One frequency band per class, log-spaced between FREQ_LO and FREQ_HI.

    Default bands keep a 15% guard margin (in log frequency) on each side so
    neighbours are disjoint; hard mode widens every band past its neighbours
    instead, forcing overlap.
    """
    edges = np.log(np.geomspace(FREQ_LO, FREQ_HI, n_classes + 1))
    bands = []
    for k in range(n_classes):
        la, lb = edges[k], edges[k + 1]
        pad = (-0.30 if hard else 0.15) * (lb - la)
        f_lo = max(float(np.exp(la + pad)), 150.0)
        f_hi = min(float(np.exp(lb - pad)), 10500.0)
        bands.append((f_lo, f_hi))
    return bands


# --- archetype synthesis -------------------------------------------------
# Each synth takes (rng, n_samples, band) and returns an arbitrary-scale
# waveform whose energy is concentrated inside the band.


def _tone_event(rng, n, band):
    f_lo, f_hi = band
    f0 = float(np.exp(rng.uniform(np.log(f_lo), np.log(f_hi))))
    t = np.arange(n) / SAMPLE_RATE
    x = np.zeros(n)
    amp = 1.0
    for k in (1, 2, 3):
        fk = k * f0
        if fk > f_hi:
            break
        x += amp * np.sin(2.0 * np.pi * fk * t + rng.uniform(0.0, 2.0 * np.pi))
        amp *= 0.5
    return x


def _hiss_event(rng, n, band):
    # exact band-limiting: draw the in-band rFFT bins, zero the rest
    f_lo, f_hi = band
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    mask = (freqs >= f_lo) & (freqs <= f_hi)
    spec = np.zeros(n // 2 + 1, dtype=np.complex128)
    spec[mask] = rng.normal(size=int(mask.sum())) + 1j * rng.normal(size=int(mask.sum()))
    return np.fft.irfft(spec, n)


def _sweep_event(rng, n, band):
    f_lo, f_hi = band
    t = np.arange(n) / SAMPLE_RATE
    f0, f1 = (f_lo, f_hi) if rng.random() < 0.5 else (f_hi, f_lo)
    return chirp(t, f0=f0, t1=n / SAMPLE_RATE, f1=f1, method="logarithmic",
                 phi=float(rng.uniform(0.0, 360.0)))


def _ticks_event(rng, n, band):
    f_lo, f_hi = band
    fc = float(np.sqrt(f_lo * f_hi))
    rate = float(rng.uniform(6.0, 12.0))
    period = int(round(SAMPLE_RATE / rate))
    burst_len = min(n, int(round(0.02 * SAMPLE_RATE)))
    tb = np.arange(burst_len) / SAMPLE_RATE
    window = np.hanning(burst_len)
    x = np.zeros(n)
    start = int(rng.integers(0, period))
    while start < n:
        burst = window * np.sin(2.0 * np.pi * fc * tb + rng.uniform(0.0, 2.0 * np.pi))
        stop = min(start + burst_len, n)
        x[start:stop] += burst[: stop - start]
        start += period
    return x


_SYNTHS = (_tone_event, _hiss_event, _sweep_event, _ticks_event)


def _pink_noise(rng, n):
    """Unit-RMS 1/f noise via frequency-domain shaping."""
    spec = rng.normal(size=n // 2 + 1) + 1j * rng.normal(size=n // 2 + 1)
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    spec = spec / np.sqrt(np.maximum(freqs, 20.0))
    spec[0] = 0.0
    x = np.fft.irfft(spec, n)
    return x / np.sqrt(np.mean(x * x))


def _band_power(x, band):
    """Mean per-sample power of x inside the band, via Parseval on an rFFT."""
    f_lo, f_hi = band
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(len(x), 1.0 / SAMPLE_RATE)
    mask = (freqs >= f_lo) & (freqs <= f_hi)
    return float(2.0 * np.sum(np.abs(spec[mask]) ** 2) / (len(x) ** 2))


def _fade(n):
    """Raised-cosine ramps keeping event energy inside its annotated span."""
    env = np.ones(n)
    r = min(n // 4, int(round(0.025 * SAMPLE_RATE)))
    if r > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
        env[:r] = ramp
        env[n - r:] = ramp[::-1]
    return env


def _place_events(rng, n_events, duration_range):
    """Draw non-overlapping (onset, offset) spans on a millisecond grid.

    Spans keep EDGE_PAD clear at both clip ends and at least MIN_GAP between
    consecutive events (less up to 2 ms of grid rounding). If the requested
    count cannot fit, it is reduced until it does.
    """
    d_lo, d_hi = duration_range
    n = int(n_events)
    while n > 1 and (CLIP_SECONDS - 2 * EDGE_PAD - (n - 1) * MIN_GAP) / n < d_lo:
        n -= 1
    avail = CLIP_SECONDS - 2 * EDGE_PAD - (n - 1) * MIN_GAP
    d_cap = min(d_hi, avail / n)
    durs = rng.uniform(d_lo, d_cap, size=n)
    extra = (avail - durs.sum()) * rng.dirichlet(np.ones(n + 1))
    spans = []
    t = EDGE_PAD + extra[0]
    for i in range(n):
        onset = round(t, 3)
        # ceil to the grid so rounding never shortens an event below d_lo
        offset = round(onset + np.ceil(durs[i] * 1000.0) / 1000.0, 3)
        spans.append((onset, offset))
        t = t + durs[i] + MIN_GAP + extra[i + 1]
    return spans


def _make_clip(rng, spec: GenSpec, labels, bands, forced_label=None):
    """Synthesize one clip: events over pink noise, peaked at PEAK_DBFS.

    Each event is scaled so its band power sits snr_db above the background's
    power in the same band over the same span.
    """
    lo, hi = spec.events_per_clip
    n_events = int(rng.integers(lo, hi + 1))
    spans = _place_events(rng, n_events, spec.duration_range)
    chosen = [int(rng.integers(0, spec.n_classes)) for _ in spans]
    if forced_label is not None:
        chosen[0] = int(forced_label)

    background = _pink_noise(rng, CLIP_SAMPLES)
    x = background.copy()
    events = []
    for (onset, offset), ci in zip(spans, chosen):
        i0 = int(round(onset * SAMPLE_RATE))
        i1 = int(round(offset * SAMPLE_RATE))
        seg = _SYNTHS[ci % len(_SYNTHS)](rng, i1 - i0, bands[ci]) * _fade(i1 - i0)
        snr = rng.uniform(spec.snr_db[0], spec.snr_db[1])
        p_bg = _band_power(background[i0:i1], bands[ci])
        p_ev = _band_power(seg, bands[ci])
        seg = seg * np.sqrt(p_bg / max(p_ev, 1e-300) * 10.0 ** (snr / 10.0))
        x[i0:i1] += seg
        events.append(Event(label=labels[ci], onset=onset, offset=offset))

    x *= 10.0 ** (PEAK_DBFS / 20.0) / np.max(np.abs(x))
    return x, events


def _tags_of(events) -> tuple[str, ...]:
    return tuple(sorted({e.label for e in events}))


def generate_corpus(spec: GenSpec, out_dir, threads: int = 1) -> CorpusManifest:
    """Write a full corpus directory and return its manifest.

    The strong and validation splits force the first event of clip i to class
    i mod n_classes, so every class appears whenever a split has at least
    n_classes clips; all remaining choices are random per clip. Because each
    clip owns its rng, rendering with threads > 1 is byte-identical to the
    sequential result.
    """
    labels = class_names(spec.n_classes)
    bands = class_bands(spec.n_classes, hard=spec.hard)
    audio_dir = os.path.join(out_dir, "audio")
    os.makedirs(audio_dir, exist_ok=True)

    plans = (
        ("strong", spec.n_strong, "synth", True),
        ("weak", spec.n_weak, "weak", False),
        ("unlabeled", spec.n_unlabeled, "unl", False),
        ("validation", spec.n_validation, "val", True),
    )

    def render(job):
        split_idx, force_cover, i = job
        rng = np.random.default_rng([spec.seed, split_idx, i])
        forced = i % spec.n_classes if force_cover else None
        return _make_clip(rng, spec, labels, bands, forced_label=forced)

    truth: dict[str, dict[str, list[Event]]] = {}
    for split_idx, (split, count, stem, force_cover) in enumerate(plans):
        jobs = [(split_idx, force_cover, i) for i in range(count)]
        if threads > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                rendered = list(pool.map(render, jobs))
        else:
            rendered = [render(j) for j in jobs]
        split_events: dict[str, list[Event]] = {}
        for i, (x, events) in enumerate(rendered):
            fname = f"{stem}_{i:03d}.wav"
            dsp.write_wav(os.path.join(audio_dir, fname),
                          dsp.Waveform(samples=x, sample_rate=SAMPLE_RATE))
            split_events[fname] = events
        truth[split] = split_events

    write_events_tsv(os.path.join(out_dir, "strong.tsv"), truth["strong"])
    with open(os.path.join(out_dir, "weak.tsv"), "w", encoding="utf-8") as fh:
        for fname in sorted(truth["weak"]):
            fh.write(f"{fname}\t{','.join(_tags_of(truth['weak'][fname]))}\n")
    with open(os.path.join(out_dir, "unlabeled.tsv"), "w", encoding="utf-8") as fh:
        for fname in sorted(truth["unlabeled"]):
            fh.write(fname + "\n")
    write_events_tsv(os.path.join(out_dir, "truth_weak.tsv"), truth["weak"])
    write_events_tsv(os.path.join(out_dir, "truth_unlabeled.tsv"), truth["unlabeled"])
    if spec.n_validation > 0:
        write_events_tsv(os.path.join(out_dir, "validation.tsv"), truth["validation"])

    strong = [(f, sorted(evs, key=lambda e: (e.onset, e.offset, e.label)))
              for f, evs in sorted(truth["strong"].items())]
    weak = [(f, _tags_of(evs)) for f, evs in sorted(truth["weak"].items())]
    observed = {e.label for _, evs in strong for e in evs}
    observed.update(t for _, tags in weak for t in tags)
    return CorpusManifest(
        root=str(out_dir),
        strong=strong,
        weak=weak,
        unlabeled=sorted(truth["unlabeled"]),
        label_set=tuple(sorted(observed)),
    )


def load_manifest(root) -> CorpusManifest:
    """Parse and validate strong.tsv / weak.tsv / unlabeled.tsv under root.

    The label set is the sorted union of everything appearing in strong
    annotations and weak tags. Malformed rows raise ValueError naming the
    file and line; a clip listed in more than one split is an error.
    """
    paths = {n: os.path.join(root, n + ".tsv") for n in ("strong", "weak", "unlabeled")}
    missing = sorted(p for p in paths.values() if not os.path.isfile(p))
    if missing:
        raise ValueError(f"missing manifest file(s): {', '.join(missing)}")

    strong_by = read_events_tsv(paths["strong"])
    strong = [(f, sorted(strong_by[f], key=lambda e: (e.onset, e.offset, e.label)))
              for f in sorted(strong_by)]

    weak: list[tuple[str, tuple[str, ...]]] = []
    seen_weak: set[str] = set()
    with open(paths["weak"], encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(
                    f"{paths['weak']}:{lineno}: expected 2 tab-separated fields, got {len(parts)}"
                )
            fname, tag_field = parts
            tags = tag_field.split(",")
            if any(not t or " " in t for t in tags):
                raise ValueError(f"{paths['weak']}:{lineno}: malformed tag list {tag_field!r}")
            if fname in seen_weak:
                raise ValueError(f"{paths['weak']}:{lineno}: duplicate clip {fname}")
            seen_weak.add(fname)
            weak.append((fname, tuple(sorted(set(tags)))))
    weak.sort()

    unlabeled: list[str] = []
    with open(paths["unlabeled"], encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" in line:
                raise ValueError(f"{paths['unlabeled']}:{lineno}: expected a bare filename")
            if line in unlabeled:
                raise ValueError(f"{paths['unlabeled']}:{lineno}: duplicate clip {line}")
            unlabeled.append(line)
    unlabeled.sort()

    split_of: dict[str, str] = {}
    for split_name, names in (("strong.tsv", strong_by.keys()),
                              ("weak.tsv", seen_weak),
                              ("unlabeled.tsv", unlabeled)):
        for f in names:
            if f in split_of:
                raise ValueError(f"clip {f} listed in both {split_of[f]} and {split_name}")
            split_of[f] = split_name

    observed = {e.label for _, evs in strong for e in evs}
    observed.update(t for _, tags in weak for t in tags)
    return CorpusManifest(root=str(root), strong=strong, weak=weak,
                          unlabeled=unlabeled, label_set=tuple(sorted(observed)))
