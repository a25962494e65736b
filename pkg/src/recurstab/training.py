"""Training loop: noisy/clean clip sampling, truncated BPTT, Adam, loss curves.

Clips are sampled either by cropping user-supplied sequences or by generating
synthetic-motion clips from still images (the long-sequence protocol at desk
scale). The loss is per-frame MSE summed over the output frames and averaged
over the batch. Normalization is recomputed once per step (one power
iteration per layer, warm-started), and the same traced kernels serve every
clip in the batch so gradients accumulate into the raw kernels.

All randomness is keyed by (seed, role, step), so an interrupted run resumed
from a checkpoint reproduces the uninterrupted loss curve exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dataio import DataError, SyntheticMotionSource, sample_crops
from .diagnostics import psnr
from .models import save_checkpoint
from .optim import AdamState, adam_step
from .tensor import Tensor

_ROLE_STILL, _ROLE_NOISE, _ROLE_VAL = 0x51, 0x52, 0x53


@dataclass
class TrainConfig:
    frames: int = 7              # BPTT length T
    crop: int = 64
    sigma255: float = 30.0       # noise std on the 0..255 scale
    steps: int = 1000
    lr: float = 1e-4
    batch: int = 4
    seed: int = 0
    grad_clip: float | None = None   # optional; default off
    nonfinite: str = "continue"      # continue | halt
    val_every: int = 200
    v_max: float = 2.0
    vel_std: float = 0.25

    def __post_init__(self):
        if self.nonfinite not in ("continue", "halt"):
            raise ValueError("nonfinite policy must be 'continue' or 'halt'")
        if self.frames < 1 or self.steps < 0 or self.batch < 1:
            raise ValueError("frames, steps and batch must be positive")


@dataclass
class TrainResult:
    curve: list = field(default_factory=list)   # (step, loss, val_psnr-or-nan)
    events: list = field(default_factory=list)
    adam: AdamState | None = None
    steps_done: int = 0

    def curve_csv_rows(self):
        rows = [("step", "loss", "val_psnr")]
        for s, l, v in self.curve:
            rows.append((s, f"{l:.8g}", "" if math.isnan(v) else f"{v:.5f}"))
        return rows


def _clip_batch(stills, sequences, cfg, step):
    """One batch of clean clips [B, T, crop, crop, c], deterministically keyed."""
    rng = np.random.default_rng([cfg.seed, _ROLE_STILL, step])
    clips = []
    for b in range(cfg.batch):
        if stills is not None:
            still = stills[int(rng.integers(0, len(stills)))]
            src = SyntheticMotionSource(still, cfg.frames, cfg.crop,
                                        seed=int(rng.integers(0, 2 ** 31)),
                                        v_max=cfg.v_max, vel_std=cfg.vel_std)
            clips.append(np.stack(src.frames()))
        else:
            seq = sequences[int(rng.integers(0, len(sequences)))]
            clips.append(sample_crops(seq, cfg.crop, cfg.frames, 1,
                                      seed=int(rng.integers(0, 2 ** 31)))[0])
    return np.stack(clips)


def _noisy(clean, cfg, step):
    rng = np.random.default_rng([cfg.seed, _ROLE_NOISE, step])
    sigma = cfg.sigma255 / 255.0
    return clean + rng.normal(0.0, sigma, size=clean.shape).astype(np.float32)


def _val_clip(stills, sequences, cfg):
    rng = np.random.default_rng([cfg.seed, _ROLE_VAL])
    if stills is not None:
        src = SyntheticMotionSource(stills[0], cfg.frames, cfg.crop,
                                    seed=int(rng.integers(0, 2 ** 31)),
                                    v_max=cfg.v_max, vel_std=cfg.vel_std)
        clean = np.stack(src.frames())
    else:
        clean = sample_crops(sequences[0], cfg.crop, cfg.frames, 1,
                             seed=int(rng.integers(0, 2 ** 31)))[0]
    noisy = clean + rng.normal(0.0, cfg.sigma255 / 255.0, size=clean.shape).astype(np.float32)
    return clean, noisy


def _validate(model, clean, noisy):
    ys, _ = model.unroll([Tensor(noisy[t]) for t in range(len(noisy))])
    vals = [psnr(y.data, clean[t]) for t, y in enumerate(ys)]
    finite = [v for v in vals if math.isfinite(v)]
    return float(np.mean(finite)) if finite else -math.inf


def train(model, cfg, stills=None, sequences=None, adam=None, start_step=0,
          checkpoint_base=None, log=None):
    """Run ``cfg.steps`` optimization steps; returns a TrainResult.

    ``stills`` (list of [H, W, c] arrays) selects the synthetic-motion
    protocol; ``sequences`` (list of [T, H, W, c] arrays) selects aligned
    spatio-temporal crops. Non-finite losses are recorded as events and,
    under the "continue" policy, the parameter update for that step is
    skipped so the anomaly stays observable without corrupting the weights.
    """
    if (stills is None) == (sequences is None):
        raise DataError("pass exactly one of stills= or sequences=")
    if stills is not None:
        c = stills[0].shape[2]
    else:
        c = sequences[0].shape[3]
    if c != model.spec.in_channels:
        raise DataError(f"data has {c} channels, model expects {model.spec.in_channels}")
    model.norm_n = model.norm_n or cfg.crop
    params = model.parameters()
    if adam is None:
        adam = AdamState.for_params(params, lr=cfg.lr)
    result = TrainResult(adam=adam)
    val_clean, val_noisy = _val_clip(stills, sequences, cfg)

    for step in range(start_step, start_step + cfg.steps):
        clean = _clip_batch(stills, sequences, cfg, step)
        noisy = _noisy(clean, cfg, step)
        for p in params:
            p.zero_grad()
        kernels = model.begin_step(cfg.crop)  # one power iteration, shared by the batch

        loss_t = None
        for b in range(cfg.batch):
            ys, _ = model.unroll([Tensor(noisy[b, t]) for t in range(cfg.frames)])
            clip_loss = None
            for t, y in enumerate(ys):
                term = T.mse(y, Tensor(clean[b, t]))
                clip_loss = term if clip_loss is None else clip_loss + term
            loss_t = clip_loss if loss_t is None else loss_t + clip_loss
        loss_t = T.scale(loss_t, 1.0 / cfg.batch)
        loss = float(loss_t.data)

        val = math.nan
        if cfg.val_every and (step + 1) % cfg.val_every == 0:
            val = _validate(model, val_clean, val_noisy)
        result.curve.append((step, loss, val))
        result.steps_done = step - start_step + 1
        if log:
            log(step, loss, val)

        if not math.isfinite(loss):
            result.events.append(f"step {step}: non-finite training loss ({loss})")
            model._step_kernels = None
            if cfg.nonfinite == "halt":
                break
            continue

        loss_t.backward()
        events = adam_step(params, adam, nonfinite="clamp", grad_clip=cfg.grad_clip)
        result.events.extend(events)
        model._step_kernels = None

    if checkpoint_base is not None:
        save_checkpoint(model, checkpoint_base, metadata={
            "steps": start_step + result.steps_done,
            "sigma255": cfg.sigma255,
            "train_seed": cfg.seed,
        })
        # adam moments ride along for exact resume
        from .archive import save_rvpt
        moments = [(f"adam.m.{i}", m) for i, m in enumerate(adam.m)]
        moments += [(f"adam.v.{i}", v) for i, v in enumerate(adam.v)]
        moments.append(("adam.step", np.array([adam.step], dtype=np.float32)))
        save_rvpt(f"{checkpoint_base}.adam.rvpt", moments)
    return result


def load_adam(path, params, lr):
    """Restore Adam moments written next to a checkpoint for exact resume."""
    from .archive import load_rvpt
    data = load_rvpt(path)
    st = AdamState.for_params(params, lr=lr)
    st.step = int(data["adam.step"][0])
    for i in range(len(params)):
        st.m[i] = data[f"adam.m.{i}"]
        st.v[i] = data[f"adam.v.{i}"]
    return st
