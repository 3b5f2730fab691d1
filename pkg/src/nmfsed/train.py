"""Semi-supervised two-model training loop.

The shallow model learns from frame labels plus a consistency pull toward the
deep model's confident clip predictions (on labeled and, ramped in by w, on
unlabeled clips). The deep model learns from clip tags only — consistency
terms treat its output as a constant, so no gradient ever reaches it from
them. The learning rate follows cosine annealing with warm restarts, and the
unlabeled-loss weight w is tied to the same cycle clock.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import models, nn


@dataclass
class TrainConfig:
    lam: float = 0.9          # DM confidence gate; "lambda" in config files
    lr_max: float = 0.0012
    lr_min: float = 1e-6
    t_i_initial: int = 0      # steps per first cycle; 0 = one epoch of batches
    t_mult: int = 2
    transfer_epochs: int = 5
    mode: str = "ps2"         # ps1: weak+unlabeled after transfer; ps2: +synthetic
    epochs: int = 8
    batch_size: int = 8
    seed: int = 0
    consistency_on_labeled: bool = True
    confident_absence: bool = False  # also gate on dm < 1 - lambda

    def __post_init__(self):
        if not 0.0 < self.lam <= 1.0:
            raise ValueError(f"lambda must be in (0, 1], got {self.lam}")
        if self.lr_min >= self.lr_max:
            raise ValueError("lr_min must be below lr_max")
        if self.t_mult < 1:
            raise ValueError("t_mult must be >= 1")
        if self.mode not in ("ps1", "ps2"):
            raise ValueError(f"mode must be ps1 or ps2, got {self.mode!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.transfer_epochs < 0:
            raise ValueError("batch_size >= 1 and nonnegative epoch counts required")


# ------------------------------------------------------------------- schedule

def lr_at(t_curr: int, t_i: int, lr_max: float, lr_min: float) -> float:
    """Cosine annealing within one warm-restart cycle."""
    if not 0 <= t_curr <= t_i:
        raise ValueError(f"t_curr={t_curr} outside [0, t_i={t_i}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t_curr / t_i))


def ramp_weight(t_curr: int, t_i: int) -> float:
    """Unlabeled-loss weight, rising from e^-5 to 1 over a cycle."""
    if not 0 <= t_curr <= t_i:
        raise ValueError(f"t_curr={t_curr} outside [0, t_i={t_i}]")
    frac = t_curr / t_i
    return math.exp(-5.0 * (1.0 - frac) ** 2)


@dataclass
class ScheduleState:
    t_i: int
    t_mult: int = 2
    t_curr: int = 0

    def __post_init__(self):
        if self.t_i < 1:
            raise ValueError(f"cycle length must be >= 1, got {self.t_i}")


def advance_schedule(state: ScheduleState) -> bool:
    """One tick; returns True when the cycle restarted."""
    state.t_curr += 1
    if state.t_curr == state.t_i:
        state.t_curr = 0
        state.t_i *= state.t_mult
        return True
    return False


# --------------------------------------------------------------------- losses

def consistency_loss(sm_c, dm_c, lam: float, confident_absence: bool = False):
    """Masked MSE pulling sm_c toward dm_c where the deep model is confident.

    Returns (loss, d_loss/d_sm_c, d_loss/d_dm_c); the last is identically zero
    because dm_c is a constant target here.
    """
    sm_c = np.asarray(sm_c, dtype=np.float64)
    dm_c = np.asarray(dm_c, dtype=np.float64)
    if sm_c.shape != dm_c.shape:
        raise ValueError(f"shape mismatch: {sm_c.shape} vs {dm_c.shape}")
    gate = dm_c > lam
    if confident_absence:
        gate |= dm_c < (1.0 - lam)
    n = int(gate.sum())
    grad_dm = np.zeros_like(dm_c)
    if n == 0:
        return 0.0, np.zeros_like(sm_c), grad_dm
    diff = np.where(gate, sm_c - dm_c, 0.0)
    loss = float(np.sum(diff * diff) / n)
    return loss, 2.0 * diff / n, grad_dm


def unlabeled_loss(sm_uc, dm_uc, lam: float, w: float,
                   confident_absence: bool = False):
    """Ramp-weighted consistency on unlabeled clips; same stop-gradient rule."""
    loss, grad_sm, grad_dm = consistency_loss(sm_uc, dm_uc, lam, confident_absence)
    return w * loss, w * grad_sm, grad_dm


# ---------------------------------------------------------------------- state

BATCH_KINDS = ("synthetic_strong", "weak_approx", "unlabeled")


@dataclass
class Batch:
    kind: str
    clip_ids: list
    features: np.ndarray      # (B, T, M)
    y_f: np.ndarray | None = None   # (B, T, K)
    y_c: np.ndarray | None = None   # (B, K)

    def __post_init__(self):
        if self.kind not in BATCH_KINDS:
            raise ValueError(f"unknown batch kind {self.kind!r}")
        labeled = self.kind != "unlabeled"
        if labeled and (self.y_f is None or self.y_c is None):
            raise ValueError(f"{self.kind} batch needs y_f and y_c")
        if not labeled and (self.y_f is not None or self.y_c is not None):
            raise ValueError("unlabeled batch must not carry labels")


@dataclass
class LossRecord:
    step: int
    epoch: int
    lr: float
    w: float
    l_f: float
    l_c: float
    l_con: float
    l_unlabel: float
    restarted: bool


@dataclass
class TrainState:
    sm: nn.Network
    dm: nn.Network
    opt_sm: nn.Adam
    opt_dm: nn.Adam
    sched: ScheduleState
    step: int = 0
    epoch: int = 1
    history: list = field(default_factory=list)


def init_state(sm: nn.Network, dm: nn.Network, cfg: TrainConfig,
               t_i: int) -> TrainState:
    return TrainState(
        sm=sm, dm=dm,
        opt_sm=nn.Adam(sm.params(), lr=cfg.lr_max),
        opt_dm=nn.Adam(dm.params(), lr=cfg.lr_max),
        sched=ScheduleState(t_i=t_i, t_mult=cfg.t_mult),
    )


# ----------------------------------------------------------------------- step

def train_step(state: TrainState, cfg: TrainConfig, batch: Batch,
               unlabeled_batch: Batch | None = None) -> LossRecord:
    """One optimizer step on a labeled batch, optionally with an unlabeled one.

    Shallow-model gradients come from l_f + l_con + l_unlabel; deep-model
    gradients come from l_c alone.
    """
    if batch.kind == "unlabeled":
        raise ValueError("primary batch must be labeled")
    if unlabeled_batch is not None and unlabeled_batch.kind != "unlabeled":
        raise ValueError("secondary batch must be unlabeled")
    lr = lr_at(state.sched.t_curr, state.sched.t_i, cfg.lr_max, cfg.lr_min)
    w = ramp_weight(state.sched.t_curr, state.sched.t_i)
    step = state.step
    state.sm.zero_grads()
    state.dm.zero_grads()

    frames = models.sm_forward(state.sm, batch.features, training=True,
                               seed=[cfg.seed, step, 0])
    l_f = nn.bce(frames, batch.y_f)
    d_frames = nn.bce_grad(frames, batch.y_f).astype(np.float64)

    dm_c = models.dm_forward(state.dm, batch.features, training=True,
                             seed=[cfg.seed, step, 1])
    l_c = nn.bce(dm_c, batch.y_c)

    l_con = 0.0
    if cfg.consistency_on_labeled:
        sm_c, idx = models.clip_from_frames(frames)
        l_con, d_sm_c, _ = consistency_loss(sm_c, dm_c, cfg.lam,
                                            cfg.confident_absence)
        if l_con != 0.0:
            d_frames += models.clip_grad_to_frames(frames.shape, idx, d_sm_c)
    models.sm_backward(state.sm, d_frames)
    models.dm_backward(state.dm, nn.bce_grad(dm_c, batch.y_c))

    l_unlabel = 0.0
    if unlabeled_batch is not None:
        frames_u = models.sm_forward(state.sm, unlabeled_batch.features,
                                     training=True, seed=[cfg.seed, step, 2])
        dm_uc = models.dm_forward(state.dm, unlabeled_batch.features,
                                  training=True, seed=[cfg.seed, step, 3])
        sm_uc, idx_u = models.clip_from_frames(frames_u)
        l_unlabel, d_sm_uc, _ = unlabeled_loss(sm_uc, dm_uc, cfg.lam, w,
                                               cfg.confident_absence)
        if l_unlabel != 0.0:
            models.sm_backward(
                state.sm,
                models.clip_grad_to_frames(frames_u.shape, idx_u, d_sm_uc))

    losses = (l_f, l_c, l_con, l_unlabel)
    if not all(math.isfinite(v) for v in losses):
        ids = list(batch.clip_ids)
        if unlabeled_batch is not None:
            ids += list(unlabeled_batch.clip_ids)
        raise RuntimeError(
            f"non-finite loss at step {step}"
            f" (l_f={l_f}, l_c={l_c}, l_con={l_con}, l_unlabel={l_unlabel});"
            f" batch clips: {ids}"
        )

    state.opt_sm.step(lr)
    state.opt_dm.step(lr)
    restarted = advance_schedule(state.sched)
    state.step += 1
    record = LossRecord(step=step, epoch=state.epoch, lr=lr, w=w, l_f=l_f,
                        l_c=l_c, l_con=l_con, l_unlabel=l_unlabel,
                        restarted=restarted)
    state.history.append(record)
    return record


# ------------------------------------------------------------------ full loop

@dataclass
class TrainResult:
    sm_paths: list
    dm_paths: list
    log_path: str
    state: TrainState


def _labeled_pools(cfg: TrainConfig, epoch: int, synthetic, weak):
    if epoch <= cfg.transfer_epochs:
        return [("synthetic_strong", synthetic)]
    if cfg.mode == "ps1":
        return [("weak_approx", weak)]
    return [("synthetic_strong", synthetic), ("weak_approx", weak)]


def _stack_labeled(kind, pool, order):
    ids = [pool[i][0] for i in order]
    feats = np.stack([pool[i][1] for i in order])
    y_f = np.stack([pool[i][2] for i in order]).astype(np.float32)
    y_c = np.stack([pool[i][3] for i in order]).astype(np.float32)
    return Batch(kind=kind, clip_ids=ids, features=feats, y_f=y_f, y_c=y_c)


def _epoch_plan(cfg: TrainConfig, epoch: int, synthetic, weak, unlabeled):
    """Deterministic (labeled, unlabeled-or-None) batch pairs for one epoch."""
    rng = np.random.default_rng([cfg.seed, epoch])
    bs = cfg.batch_size
    labeled = []
    for kind, pool in _labeled_pools(cfg, epoch, synthetic, weak):
        order = rng.permutation(len(pool))
        for i in range(0, len(pool), bs):
            labeled.append(_stack_labeled(kind, pool, order[i:i + bs]))
    labeled = [labeled[i] for i in rng.permutation(len(labeled))]

    use_unlabeled = epoch > cfg.transfer_epochs and unlabeled
    pairs = []
    if use_unlabeled:
        u_order = rng.permutation(len(unlabeled))
        cursor = 0
        for lb in labeled:
            take = []
            for _ in range(min(bs, len(lb.clip_ids))):
                if cursor == len(u_order):  # wrap: redraw a fresh pass
                    u_order = rng.permutation(len(unlabeled))
                    cursor = 0
                take.append(u_order[cursor])
                cursor += 1
            ub = Batch(kind="unlabeled",
                       clip_ids=[unlabeled[i][0] for i in take],
                       features=np.stack([unlabeled[i][1] for i in take]))
            pairs.append((lb, ub))
    else:
        pairs = [(lb, None) for lb in labeled]
    return pairs


def _count_labeled_batches(cfg: TrainConfig, epoch: int, synthetic, weak) -> int:
    total = 0
    for _, pool in _labeled_pools(cfg, epoch, synthetic, weak):
        total += -(-len(pool) // cfg.batch_size)
    return total


def fit(cfg: TrainConfig, model_cfg: models.ModelConfig, synthetic, weak,
        unlabeled, labels: list[str], out_dir) -> TrainResult:
    """Run the full schedule and write per-epoch checkpoints plus a loss log.

    synthetic/weak entries: (clip_id, features(T,M), y_f(T,K), y_c(K,));
    unlabeled entries: (clip_id, features). Transfer epochs see synthetic
    data only; afterwards the mode decides the labeled mix and unlabeled
    clips join via the ramped consistency term.
    """
    for epoch in range(1, cfg.epochs + 1):
        for kind, pool in _labeled_pools(cfg, epoch, synthetic, weak):
            if not pool:
                raise ValueError(
                    f"epoch {epoch} needs nonempty {kind} data ({cfg.mode})"
                )
        if epoch > cfg.transfer_epochs and not unlabeled:
            raise ValueError(f"epoch {epoch} needs unlabeled clips ({cfg.mode})")

    os.makedirs(out_dir, exist_ok=True)
    sm = models.build_sm(model_cfg)
    dm = models.build_dm(replace(model_cfg, seed=model_cfg.seed + 1))
    t_i = cfg.t_i_initial
    if t_i <= 0:
        t_i = max(1, _count_labeled_batches(cfg, 1, synthetic, weak))
    state = init_state(sm, dm, cfg, t_i)

    log_path = os.path.join(out_dir, "train_log.tsv")
    sm_paths, dm_paths = [], []
    with open(log_path, "w", encoding="utf-8") as log:
        log.write("step\tepoch\tlr\tw\tl_f\tl_c\tl_con\tl_unlabel\trestart\n")
        for epoch in range(1, cfg.epochs + 1):
            state.epoch = epoch
            for lb, ub in _epoch_plan(cfg, epoch, synthetic, weak, unlabeled):
                rec = train_step(state, cfg, lb, ub)
                log.write(
                    f"{rec.step}\t{rec.epoch}\t{rec.lr:.10g}\t{rec.w:.10g}"
                    f"\t{rec.l_f:.10g}\t{rec.l_c:.10g}\t{rec.l_con:.10g}"
                    f"\t{rec.l_unlabel:.10g}\t{int(rec.restarted)}\n"
                )
            extra = {"epoch": epoch, "mode": cfg.mode, "seed": cfg.seed}
            sm_path = os.path.join(out_dir, f"epoch_{epoch:03d}.sm.npz")
            dm_path = os.path.join(out_dir, f"epoch_{epoch:03d}.dm.npz")
            models.save_model(sm_path, sm, model_cfg, "sm", labels, extra)
            models.save_model(dm_path, dm, model_cfg, "dm", labels, extra)
            sm_paths.append(sm_path)
            dm_paths.append(dm_path)
    return TrainResult(sm_paths=sm_paths, dm_paths=dm_paths,
                       log_path=log_path, state=state)
