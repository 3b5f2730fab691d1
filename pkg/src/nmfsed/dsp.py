"""Audio ingestion and log-mel feature extraction.

All clips are normalized to 10 s at 22050 Hz and turned into a 640x64
(frames x mel bands) magnitude mel spectrogram plus its log. Every function
here is a pure function of its inputs, so per-clip parallelism is safe.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly


@dataclass
class Waveform:
    """Mono audio buffer. samples: float64 amplitudes, sample_rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureConfig:
    sample_rate: int = 22050
    n_fft: int = 2048
    hop: int = 345
    n_mels: int = 64
    log_floor: float = 1e-10

    @property
    def hop_seconds(self) -> float:
        return self.hop / self.sample_rate

    def n_frames(self, duration: float = 10.0) -> int:
        # centered framing: one frame per hop plus the frame at t=0
        return 1 + int(round(duration * self.sample_rate)) // self.hop


def load_wav(path) -> Waveform:
    """Read a RIFF/WAVE PCM file (16/32-bit int, 8-bit, or float) as mono.

    Multi-channel input is averaged across channels. The file's sample rate
    is preserved; integer PCM is rescaled to [-1, 1).
    """
    try:
        rate, data = wavfile.read(path)
    except Exception as exc:
        raise ValueError(f"cannot read WAV file {path}: {exc}") from exc
    if data.size == 0:
        raise ValueError(f"WAV file {path} contains no samples")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"unsupported WAV sample format {data.dtype} in {path}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if not np.all(np.isfinite(samples)):
        raise ValueError(f"non-finite samples in {path}")
    return Waveform(samples=samples, sample_rate=int(rate))


def write_wav(path, w: Waveform) -> None:
    """Write mono 16-bit PCM. Samples are clipped to [-1, 1]."""
    clipped = np.clip(w.samples, -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype(np.int16)
    wavfile.write(path, w.sample_rate, pcm)


def fix_length(w: Waveform, target: float) -> Waveform:
    """Truncate or zero-pad at the end to exactly round(target * rate) samples."""
    if target <= 0:
        raise ValueError("target duration must be positive")
    n = int(round(target * w.sample_rate))
    x = w.samples
    if len(x) >= n:
        out = x[:n].copy()
    else:
        out = np.concatenate([x, np.zeros(n - len(x), dtype=x.dtype)])
    return Waveform(samples=out, sample_rate=w.sample_rate)


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Band-limited polyphase resampling to target_rate.

    Uses a windowed-sinc polyphase filter; edges are extended by a linear
    fit so constant signals stay constant at the boundaries.
    """
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == w.sample_rate:
        return Waveform(samples=w.samples.copy(), sample_rate=w.sample_rate)
    g = math.gcd(int(target_rate), int(w.sample_rate))
    up, down = target_rate // g, w.sample_rate // g
    out = resample_poly(w.samples, up, down, padtype="line")
    return Waveform(samples=out.astype(np.float64), sample_rate=int(target_rate))


def _hz_to_mel(freq):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    freq = np.asarray(freq, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    logstep = np.log(6.4) / 27.0
    mel = freq / f_sp
    above = freq >= min_log_hz
    mel = np.where(
        above,
        min_log_hz / f_sp + np.log(np.maximum(freq, min_log_hz) / min_log_hz) / logstep,
        mel,
    )
    return mel


def _mel_to_hz(mel):
    mel = np.asarray(mel, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    freq = mel * f_sp
    above = mel >= min_log_mel
    freq = np.where(above, min_log_hz * np.exp(logstep * (mel - min_log_mel)), freq)
    return freq


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Slaney-style triangular filterbank, area-normalized, 0 Hz to Nyquist.

    Returns (n_mels, n_fft // 2 + 1).
    """
    nyquist = cfg.sample_rate / 2.0
    mel_pts = np.linspace(_hz_to_mel(0.0), _hz_to_mel(nyquist), cfg.n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fft_freqs = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft
    lower = hz_pts[:-2][:, None]
    center = hz_pts[1:-1][:, None]
    upper = hz_pts[2:][:, None]
    rising = (fft_freqs[None, :] - lower) / (center - lower)
    falling = (upper - fft_freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    # Slaney area normalization: each triangle integrates to ~2/bandwidth
    enorm = 2.0 / (hz_pts[2:] - hz_pts[:-2])
    return fb * enorm[:, None]


def mel_center_frequencies(cfg: FeatureConfig) -> np.ndarray:
    """Center frequency in Hz of each mel filter."""
    nyquist = cfg.sample_rate / 2.0
    mel_pts = np.linspace(_hz_to_mel(0.0), _hz_to_mel(nyquist), cfg.n_mels + 2)
    return _mel_to_hz(mel_pts)[1:-1]


def stft_magnitude(x: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Magnitude STFT with centered frames and reflection padding.

    Returns (n_frames, n_fft // 2 + 1) where n_frames = 1 + len(x) // hop.
    """
    pad = cfg.n_fft // 2
    padded = np.pad(x, pad, mode="reflect")
    n_frames = 1 + len(x) // cfg.hop
    window = np.hanning(cfg.n_fft + 1)[:-1]  # periodic Hann
    idx = np.arange(cfg.n_fft)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    frames = padded[idx] * window[None, :]
    return np.abs(np.fft.rfft(frames, axis=1))


def logmel(w: Waveform, cfg: FeatureConfig | None = None, duration: float = 10.0):
    """Full feature front end for one clip.

    Returns (mel, log_mel), both (n_frames, n_mels). mel is the nonnegative
    magnitude mel spectrogram (the NMF input); log_mel is
    log(max(mel, log_floor)) (the CNN input).
    """
    cfg = cfg or FeatureConfig()
    expected = int(round(duration * cfg.sample_rate))
    if w.sample_rate != cfg.sample_rate:
        raise ValueError(
            f"expected sample rate {cfg.sample_rate}, got {w.sample_rate}"
        )
    if len(w.samples) != expected:
        raise ValueError(
            f"expected {expected} samples ({duration} s), got {len(w.samples)}"
        )
    spec = stft_magnitude(w.samples, cfg)
    mel = spec @ mel_filterbank(cfg).T
    np.maximum(mel, 0.0, out=mel)  # guard against BLAS round-off below zero
    log_mel = np.log(np.maximum(mel, cfg.log_floor))
    return mel, log_mel


def remove_background(spec: np.ndarray, quantile: float = 0.25,
                      frames=None) -> np.ndarray:
    """Subtract a stationary per-mel noise floor and clamp at zero.

    The floor is the per-mel `quantile` over `frames` (default: every frame
    of the clip). Callers that know which frames are event-free should pass
    them — the estimate is then untouched by event energy and a high
    quantile can be used safely. quantile=0 subtracts the per-mel minimum.
    """
    spec = np.asarray(spec, dtype=np.float64)
    if not 0.0 <= quantile <= 1.0:
        raise ValueError(f"quantile must be in [0, 1], got {quantile}")
    ref = spec if frames is None else spec[np.asarray(frames, dtype=int)]
    if ref.size == 0:
        raise ValueError("no frames to estimate the background from")
    floor = np.quantile(ref, quantile, axis=0, keepdims=True)
    return np.clip(spec - floor, 0.0, None)


def event_frame_range(onset: float, offset: float, hop_seconds: float,
                      n_frames: int) -> tuple[int, int]:
    """Half-open frame interval [start, end) covered by [onset, offset) seconds.

    Frame t spans [t * hop_seconds, (t + 1) * hop_seconds).
    """
    if offset <= onset:
        raise ValueError(f"event offset {offset} not after onset {onset}")
    start = max(0, int(math.floor(onset / hop_seconds)))
    end = min(n_frames, int(math.ceil(offset / hop_seconds)))
    if end <= start:
        raise ValueError(
            f"event [{onset}, {offset}) maps to an empty frame range"
        )
    return start, end
