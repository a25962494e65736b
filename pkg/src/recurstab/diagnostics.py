"""Stability diagnostics: adversarial receptive-field search, random-init
divergence probes, the long-sequence harness with onset statistics, and PSNR.

Two complementary tests of a trained model:

* ``strf_search`` optimizes an input sequence to blow up a chosen output
  statistic, visualizing the spatio-temporal receptive field: if frames in
  the distant past still influence the output (or the outputs after t=0
  diverge), the model is declared unbounded.
* ``stability_harness`` streams a long noisy sequence through the model,
  records an instability onset whenever per-frame PSNR falls below the
  failure threshold, resets the state, and summarizes onsets by deciles.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .models import ArchitectureSpec, RECURRENCES, build
from .optim import AdamState, adam_step
from .tensor import Tensor

DIVERGENCE_LIMIT = 1e30  # norm past which a run is frozen as diverged


def psnr(a, b, peak=1.0):
    """10 * log10(peak^2 / MSE); +inf when the frames match exactly."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    m = float(np.mean((a - b) ** 2))
    if m == 0.0:
        return math.inf
    if not math.isfinite(m):
        return -math.inf
    return 10.0 * math.log10(peak * peak / m)


# -- STRF ---------------------------------------------------------------------------


@dataclass
class StrfReport:
    """Adversarial input sequence, its outputs, and the boundedness verdict."""

    X: np.ndarray
    Y: np.ndarray
    loss_trace: list
    influence: np.ndarray          # e_t, indexed t = -tau .. +tau
    temporal_extent: int
    verdict: str                   # "bounded" | "unbounded"
    diverged: bool
    dead_gradient: bool
    tau: int
    loss_kind: str
    restarts: int
    best_restart: int
    theta_infl: float
    theta_div: float

    def summary(self):
        return {
            "verdict": self.verdict,
            "temporal_extent": self.temporal_extent,
            "diverged": self.diverged,
            "dead_gradient": self.dead_gradient,
            "best_loss": self.loss_trace[-1] if self.loss_trace else None,
            "tau": self.tau,
            "loss_kind": self.loss_kind,
            "restarts": self.restarts,
            "best_restart": self.best_restart,
            "theta_infl": self.theta_infl,
            "theta_div": self.theta_div,
            "influence": [float(v) for v in self.influence],
        }

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(self.summary(), f, indent=2, sort_keys=True)
        return path


def _strf_loss(ys, mid, kind):
    if kind == "norm_y0":
        return T.l2_norm(ys[mid])
    if kind == "center_pixel":
        return T.l1_center_pixel(ys[mid])
    raise ValueError(f"unknown STRF loss kind {kind!r}; use 'norm_y0' or 'center_pixel'")


def _strf_one_restart(model, loss_kind, tau, n, iters, lr, rng):
    c = model.spec.in_channels
    frames = 2 * tau + 1
    x0 = rng.uniform(0.0, 1.0, size=(frames, n, n, c)).astype(np.float32)
    xs = [Tensor(x0[t].copy(), requires_grad=True) for t in range(frames)]
    adam = AdamState.for_params(xs, lr=lr)
    trace = []
    best_loss = -math.inf
    best_x = x0.copy()
    dead = False
    for it in range(iters):
        for x in xs:
            x.zero_grad()
        ys, _ = model.unroll(xs)
        loss = _strf_loss(ys, tau, loss_kind)
        val = float(loss.data)
        if math.isfinite(val) and val > best_loss:
            best_loss = val
            best_x = np.stack([x.data for x in xs])
        trace.append(val)
        loss.backward()
        if it == 0 and all(
            x.grad is None or not np.any(x.grad) for x in xs
        ):
            dead = True
            break
        adam_step(xs, adam, maximize=True, nonfinite="clamp")
        for x in xs:
            np.clip(x.data, 0.0, 1.0, out=x.data)  # projection onto the box
    return best_loss, best_x, trace, dead, x0


def strf_search(model, loss_kind="center_pixel", tau=40, n=64, iters=1000, lr=1e-2,
                seed=0, restarts=3, theta_infl=1e-3, theta_div=1e3):
    """Search for unstable input sequences by projected gradient ascent.

    X (length 2*tau+1, values in [0, 1]) is optimized with Adam to maximize
    either the norm of y_0 or the absolute center pixel of y_0, unrolling
    from the zero hidden state. Multiple restarts keep the best objective.

    The influence profile e_t is the mean absolute deviation of the optimized
    x_t from its initialization; the temporal extent counts frames t <= 0
    with influence above ``theta_infl``. Verdict is "unbounded" iff the
    earliest frame is influential (e_{-tau} > theta_infl) or the outputs
    after t = 0 grow past ``theta_div`` relative to y_0.
    """
    if not model.frozen:
        raise ValueError("strf_search expects a frozen (inference-ready) model")
    best = None
    traces = []
    for r in range(restarts):
        rng = np.random.default_rng([seed, 0x57F, r])
        loss, x_opt, trace, dead, x0 = _strf_one_restart(
            model, loss_kind, tau, n, iters, lr, rng)
        traces.append(trace)
        if best is None or loss > best[0]:
            best = (loss, x_opt, x0, dead, r)
    loss, x_opt, x0, dead, best_r = best
    # replay the best sequence to collect outputs
    ys, _ = model.unroll([Tensor(x_opt[t]) for t in range(2 * tau + 1)])
    Y = np.stack([y.data for y in ys])
    influence = np.abs(x_opt - x0).mean(axis=(1, 2, 3))
    extent = int(np.sum(influence[: tau + 1] > theta_infl))
    with np.errstate(over="ignore", invalid="ignore"):
        norms = np.array([float(np.linalg.norm(Y[t].astype(np.float64))) for t in range(len(Y))])
    y0n = max(norms[tau], 1e-30)
    post = norms[tau + 1:]
    grew = bool(post.size and (np.nanmax(post) > theta_div * y0n or not np.isfinite(post).all()))
    diverged = bool(not np.isfinite(norms).all() or np.nanmax(norms) > theta_div * y0n)
    unbounded = influence[0] > theta_infl or grew
    # best-so-far across restarts is nondecreasing by construction
    running = []
    best_so_far = -math.inf
    for tr in traces:
        m = max((v for v in tr if math.isfinite(v)), default=-math.inf)
        best_so_far = max(best_so_far, m)
        running.append(best_so_far)
    return StrfReport(
        X=x_opt, Y=Y, loss_trace=running, influence=influence,
        temporal_extent=extent, verdict="unbounded" if unbounded else "bounded",
        diverged=diverged, dead_gradient=dead, tau=tau, loss_kind=loss_kind,
        restarts=restarts, best_restart=best_r, theta_infl=theta_infl, theta_div=theta_div,
    )


# -- random-init divergence probe ------------------------------------------------------


@dataclass
class ProbeTrace:
    architecture: str
    seed: int
    norms: np.ndarray
    growth: float
    classification: str  # "bounded" | "divergent" | "intermediate"


def _growth_classification(growth, bounded_ratio=10.0, divergent_ratio=1e3):
    if not math.isfinite(growth) or growth > divergent_ratio:
        return "divergent"
    if growth <= bounded_ratio:
        return "bounded"
    return "intermediate"


def run_output_norms(model, T_frames, n, seed, input_kind="uniform"):
    """Feed random frames through a frozen model; ||y_t|| trace (NaN/Inf recorded)."""
    rng = np.random.default_rng([seed, 0xF0])
    state = model.init_state(n)
    norms = np.empty(T_frames)
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T_frames):
            if input_kind == "uniform":
                x = rng.uniform(0.0, 1.0, size=(n, n, model.spec.in_channels)).astype(np.float32)
            else:
                x = np.full((n, n, model.spec.in_channels), 0.5, dtype=np.float32)
            y, state = model.step(state, x)
            norms[t] = np.linalg.norm(y.astype(np.float64))
            if state.diverged or norms[t] > DIVERGENCE_LIMIT:
                norms[t + 1:] = np.inf
                break
    return norms


def divergence_probe(recurrences=RECURRENCES, seeds=range(20), T_frames=50, n=16,
                     channels=16, depth=5, kernel_size=3, in_channels=1,
                     sigma_init=0.1, rescale_sigma1=None, backbone="vdncnn"):
    """Output-norm traces of randomly initialized architectures over random input.

    Models are Gaussian(sigma_init)-initialized; if ``rescale_sigma1`` is set,
    every conv kernel is scalar-rescaled so its layer operator norm equals the
    target. Returns {architecture: [ProbeTrace, ...]}.
    """
    results = {}
    for rec in recurrences:
        traces = []
        for seed in seeds:
            spec = ArchitectureSpec(backbone=backbone, recurrence=rec, channels=channels,
                                    depth=depth, kernel_size=kernel_size,
                                    in_channels=in_channels)
            model = build(spec, seed=seed, init="gaussian", sigma_init=sigma_init)
            if rescale_sigma1 is not None:
                model.rescale_layer_sigmas(rescale_sigma1, n=n)
            model.freeze(n)
            norms = run_output_norms(model, T_frames, n, seed)
            base = norms[0] if norms[0] > 0 else 1e-30
            with np.errstate(over="ignore", invalid="ignore"):
                growth = float(np.nanmax(norms) / base)
            traces.append(ProbeTrace(rec, int(seed), norms, growth,
                                     _growth_classification(growth)))
        results[rec] = traces
    return results


def probe_csv_rows(results):
    """Flatten probe results to (architecture, seed, frame, norm) rows."""
    rows = []
    for rec, traces in results.items():
        for tr in traces:
            for t, v in enumerate(tr.norms):
                rows.append((rec, tr.seed, t, v))
    return rows


# -- long-sequence stability harness -----------------------------------------------------


@dataclass
class StabilityReport:
    """Instability onsets between state resets, summarized by deciles."""

    onsets: list
    d1: float
    d9: float
    frames: int
    psnr_fail: float
    decile_fallback: bool
    psnr_trace: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def summary(self):
        fmt = lambda v: "inf" if math.isinf(v) else v
        return {
            "onsets": self.onsets,
            "d1": fmt(self.d1),
            "d9": fmt(self.d9),
            "frames": self.frames,
            "psnr_fail": self.psnr_fail,
            "decile_fallback": self.decile_fallback,
            "events": self.events,
        }

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(self.summary(), f, indent=2, sort_keys=True)
        return path


def onset_deciles(onsets):
    """(d1, d9, fallback_flag): linear interpolation between order statistics.

    With fewer than 10 onsets the deciles fall back to min/max (flagged);
    with none, both are the +inf sentinel.
    """
    if not onsets:
        return math.inf, math.inf, False
    s = sorted(onsets)
    if len(s) < 10:
        return float(s[0]), float(s[-1]), True

    def q(p):
        h = (len(s) - 1) * p
        lo = int(math.floor(h))
        hi = min(lo + 1, len(s) - 1)
        return s[lo] + (h - lo) * (s[hi] - s[lo])

    return float(q(0.1)), float(q(0.9)), False


def stability_harness(model, stream, noise=None, psnr_fail=0.0, max_frames=None,
                      trace_decimate=1, peak=1.0):
    """Stream noisy frames through the model; record onsets and reset on failure.

    ``stream`` yields clean frames; ``noise`` (a NoiseSpec) corrupts the model
    input while PSNR is measured against the clean frame. Whenever PSNR drops
    below ``psnr_fail`` the onset (frames since the last reset, 1-based) is
    recorded and the recurrent state is reset to zero. Deterministic given
    (model, stream, noise seed).
    """
    from .dataio import add_noise  # local import to avoid cycle at module load

    onsets = []
    events = []
    trace = []
    state = None
    since_reset = 0
    total = 0
    for idx, clean in enumerate(stream):
        if max_frames is not None and total >= max_frames:
            break
        if state is None:
            state = model.init_state(clean.shape[0], clean.shape[1])
        x = add_noise(clean, noise, idx) if noise is not None else np.asarray(clean, np.float32)
        with np.errstate(over="ignore", invalid="ignore"):
            y, state = model.step(state, x)
        total += 1
        since_reset += 1
        if np.isfinite(y).all():
            value = psnr(y, clean, peak=peak)
        else:
            events.append(f"frame {total}: non-finite output")
            value = -math.inf
        if trace_decimate and (total - 1) % trace_decimate == 0:
            trace.append((total, value))
        if value < psnr_fail:
            onsets.append(since_reset)
            since_reset = 0
            state.reset()
    if total < 2:
        raise ValueError(f"stability harness needs at least 2 frames, got {total}")
    d1, d9, fallback = onset_deciles(onsets)
    return StabilityReport(onsets=onsets, d1=d1, d9=d9, frames=total, psnr_fail=psnr_fail,
                           decile_fallback=fallback, psnr_trace=trace, events=events)


class FailureInjector:
    """Wraps a model, forcing the output to a constant at given absolute frames.

    A deterministic stand-in for an unstable model, used to exercise the
    harness bookkeeping (onsets, resets, deciles) without training anything.
    Frame indices are 1-based.
    """

    def __init__(self, inner, fail_frames, value=1.0):
        self.inner = inner
        self.fail_frames = set(int(f) for f in fail_frames)
        self.value = value
        self.spec = inner.spec
        self._count = 0

    def init_state(self, h, w=None):
        self._count = 0
        return self.inner.init_state(h, w)

    def step(self, state, x):
        y, state = self.inner.step(state, x)
        self._count += 1
        if self._count in self.fail_frames:
            y = np.full_like(y, self.value) if isinstance(y, np.ndarray) else y
        return y, state


class IdentityModel:
    """Passes frames through unchanged; the trivial 'denoiser' for harness tests."""

    def __init__(self, in_channels=1):
        self.spec = ArchitectureSpec(backbone="tiny_vdncnn", recurrence="none_single",
                                     in_channels=in_channels, channels=1)
        self.frozen = True

    def init_state(self, h, w=None):
        from .models import RecurrentState
        return RecurrentState({})

    def step(self, state, x):
        from .models import RecurrentState
        return np.asarray(x, dtype=np.float32), RecurrentState({}, state.frame + 1, False)
