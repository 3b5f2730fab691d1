"""Timestamped sound events and the TSV interchange format.

One row per event: filename TAB onset TAB offset TAB event_label, onsets and
offsets in seconds. The same format is used for ground truth and predictions.
"""
from __future__ import annotations

from dataclasses import dataclass


@dataclass
class Event:
    label: str
    onset: float
    offset: float

    def __post_init__(self):
        if self.offset <= self.onset:
            raise ValueError(
                f"event {self.label}: offset {self.offset} not after onset {self.onset}"
            )
        if self.onset < 0:
            raise ValueError(f"event {self.label}: negative onset {self.onset}")

    @property
    def duration(self) -> float:
        return self.offset - self.onset


def read_events_tsv(path) -> dict[str, list[Event]]:
    """Parse an events TSV into {filename: [Event, ...]}.

    Raises ValueError naming the file and line for malformed rows.
    """
    out: dict[str, list[Event]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(
                    f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}"
                )
            fname, onset_s, offset_s, label = parts
            try:
                onset, offset = float(onset_s), float(offset_s)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: non-numeric onset/offset") from exc
            try:
                ev = Event(label=label, onset=onset, offset=offset)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            out.setdefault(fname, []).append(ev)
    return out


def write_events_tsv(path, events_by_clip: dict[str, list[Event]]) -> None:
    """Write events sorted by filename then onset, times with 3 decimals."""
    with open(path, "w", encoding="utf-8") as fh:
        for fname in sorted(events_by_clip):
            for ev in sorted(events_by_clip[fname], key=lambda e: (e.onset, e.label)):
                fh.write(f"{fname}\t{ev.onset:.3f}\t{ev.offset:.3f}\t{ev.label}\n")
