"""The two detector architectures: a shallow frame-level model (SM) and a
deep clip-level model (DM), plus adapters between (clip, time, mel) feature
stacks and the (N, C, H, W) layout the layers use.

SM keeps the full time resolution (pooling only along mel) and gates every
conv block; DM halves both axes five times and ends in a global average pool.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import nn


@dataclass
class ModelConfig:
    n_classes: int = 10
    n_mels: int = 64
    sm_channels: tuple = (32, 64, 64)
    dm_channels: tuple = (16, 32, 64, 64, 64)
    sm_dropout: float = 0.35
    dm_dropout: float = 0.25
    seed: int = 0


@dataclass
class FramePrediction:
    clip_id: str
    probs: np.ndarray  # (n_frames, K) in [0, 1]


@dataclass
class ClipPrediction:
    clip_id: str
    probs: np.ndarray  # (K,) in [0, 1]


def build_sm(cfg: ModelConfig, dtype=np.float32) -> nn.Network:
    """Frame-level model: gated conv blocks, mel-only pooling, per-frame head."""
    mel_pool = 4 ** len(cfg.sm_channels)
    if cfg.n_mels % mel_pool:
        raise ValueError(
            f"n_mels={cfg.n_mels} must be divisible by {mel_pool} "
            f"({len(cfg.sm_channels)} blocks of mel pooling by 4)"
        )
    rng = np.random.default_rng(cfg.seed)
    layers = []
    in_ch = 1
    for ch in cfg.sm_channels:
        layers += [
            nn.Conv2d(in_ch, ch, ksize=3, rng=rng, dtype=dtype),
            nn.ContextGate(ch, rng=rng, dtype=dtype),
            nn.MaxPool2d(1, 4),
            nn.Dropout(cfg.sm_dropout),
        ]
        in_ch = ch
    # mel axis left with n_mels / 4^blocks columns; a 1x1 conv acts as a
    # per-frame dense layer across whatever channels remain
    layers += [
        nn.Conv2d(in_ch, cfg.n_classes, ksize=1, rng=rng, dtype=dtype),
        nn.Sigmoid(),
    ]
    return nn.Network(layers)


def build_dm(cfg: ModelConfig, dtype=np.float32) -> nn.Network:
    """Clip-level model: conv/relu blocks with 2x2 pooling, global average."""
    rng = np.random.default_rng(cfg.seed)
    layers = []
    in_ch = 1
    for ch in cfg.dm_channels:
        layers += [
            nn.Conv2d(in_ch, ch, ksize=3, rng=rng, dtype=dtype),
            nn.Relu(),
            nn.MaxPool2d(2, 2),
            nn.Dropout(cfg.dm_dropout),
        ]
        in_ch = ch
    layers += [
        nn.GlobalAvgPool(),
        nn.Dense(in_ch, cfg.n_classes, rng=rng, dtype=dtype),
        nn.Sigmoid(),
    ]
    return nn.Network(layers)


# ------------------------------------------------------------------- adapters

def _to_images(specs: np.ndarray, dtype) -> np.ndarray:
    """(N, T, M) feature stack -> (N, 1, T, M) images."""
    if specs.ndim != 3:
        raise ValueError(f"expected (clips, frames, mels), got shape {specs.shape}")
    return np.ascontiguousarray(specs[:, None, :, :], dtype=dtype)


def sm_forward(net: nn.Network, specs: np.ndarray, training=False,
               seed=None) -> np.ndarray:
    """Frame probabilities (N, T, K) for a stack of log-mel features."""
    x = _to_images(specs, net.params()[0][1].dtype)
    raw = net.forward(x, training=training, seed=seed)  # (N, K, T, mel')
    if raw.shape[3] != 1:
        raise ValueError(
            f"mel axis not fully pooled before the head (got {raw.shape[3]})"
        )
    return np.ascontiguousarray(raw[:, :, :, 0].transpose(0, 2, 1))


def sm_backward(net: nn.Network, d_frames: np.ndarray) -> None:
    dy = np.ascontiguousarray(d_frames.transpose(0, 2, 1))[:, :, :, None]
    net.backward(dy.astype(net.params()[0][1].dtype))


def dm_forward(net: nn.Network, specs: np.ndarray, training=False,
               seed=None) -> np.ndarray:
    """Clip probabilities (N, K)."""
    x = _to_images(specs, net.params()[0][1].dtype)
    return net.forward(x, training=training, seed=seed)


def dm_backward(net: nn.Network, d_clip: np.ndarray) -> None:
    net.backward(d_clip.astype(net.params()[0][1].dtype))


def clip_from_frames(frame_probs: np.ndarray):
    """Max over time: (N, T, K) -> ((N, K) clip probs, (N, K) argmax frames)."""
    idx = frame_probs.argmax(axis=1)
    clip = np.take_along_axis(frame_probs, idx[:, None, :], axis=1)[:, 0, :]
    return clip, idx


def clip_grad_to_frames(frame_shape, idx: np.ndarray,
                        d_clip: np.ndarray) -> np.ndarray:
    """Route a (N, K) clip gradient back to the argmax frames of (N, T, K)."""
    d = np.zeros(frame_shape, dtype=d_clip.dtype)
    np.put_along_axis(d, idx[:, None, :], d_clip[:, None, :], axis=1)
    return d


# ---------------------------------------------------------------- checkpoints

def _arch_meta(cfg: ModelConfig, kind: str, labels: list[str]) -> dict:
    if kind not in ("sm", "dm"):
        raise ValueError(f"model kind must be 'sm' or 'dm', got {kind!r}")
    return {
        "kind": kind,
        "n_classes": cfg.n_classes,
        "n_mels": cfg.n_mels,
        "sm_channels": list(cfg.sm_channels),
        "dm_channels": list(cfg.dm_channels),
        "sm_dropout": cfg.sm_dropout,
        "dm_dropout": cfg.dm_dropout,
        "labels": list(labels),
    }


def save_model(path, net: nn.Network, cfg: ModelConfig, kind: str,
               labels: list[str], extra: dict | None = None) -> None:
    meta = _arch_meta(cfg, kind, labels)
    meta.update(extra or {})
    nn.save_params(path, net, meta=meta)


def load_model(path):
    """Rebuild the architecture from checkpoint metadata and restore weights.

    Returns (net, meta); meta["labels"] gives the class order the model
    was trained with.
    """
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
    for key in ("kind", "n_classes", "labels"):
        if key not in meta:
            raise ValueError(f"{path}: checkpoint metadata lacks {key!r}")
    cfg = ModelConfig(
        n_classes=int(meta["n_classes"]),
        n_mels=int(meta.get("n_mels", 64)),
        sm_channels=tuple(meta.get("sm_channels", (32, 64, 64))),
        dm_channels=tuple(meta.get("dm_channels", (16, 32, 64, 64, 64))),
        sm_dropout=float(meta.get("sm_dropout", 0.35)),
        dm_dropout=float(meta.get("dm_dropout", 0.25)),
    )
    net = build_sm(cfg) if meta["kind"] == "sm" else build_dm(cfg)
    nn.load_params(path, net)
    return net, meta
