"""Recurrent video-processing models: two conv backbones, six temporal wirings.

Backbones
    vdncnn       — plain stack of ``depth`` convolutions (default 10) with ReLU
                   after every conv except the last.
    tiny_vdncnn  — vdncnn with a single internal convolution (depth 3 total),
                   small enough to unroll 56 steps through time.
    vresnet      — head conv, ``depth`` residual blocks (default 5) of two convs
                   with a ReLU between them and an identity skip, tail conv.

Temporal wirings (state h_t in parentheses)
    none_single   — frame-in frame-out, no state.
    none_multi    — sliding window of the last ``frame_window`` input frames
                    concatenated at the input (state: raw frame delay line).
    feature_shift — features tapped after the first conv are re-injected one
                    frame later at a *deeper* layer; delayed but feedback-free,
                    hence feedforward.
    frame         — previous output frame concatenated to the input (h_t = y_t).
    feature       — features tapped after the middle conv/block are fed back
                    and concatenated after the first conv.
    rlsp          — the deepest internal features (widest latent) are fed back
                    and concatenated after the first conv.

Exact tap/injection indices are resolved in ``wiring_plan`` and are a
schematic-faithful reconstruction; taps take post-ReLU features by default
(``tap_activation="preact"`` switches to pre-activation features).

The recurrence update is ``h_t = phi(h_{t-1}, x_t)``, ``y_t = psi(h_t)``; a
``step`` performs one update, ``unroll`` records the whole sequence for
backpropagation through time.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .archive import load_rvpt, save_rvpt
from .normalize import NormalizedLayer, NormalizerConfig
from .spectral import PowerIterationState, fft_exact_spectrum
from .tensor import DEFAULT_PAD, Tensor, conv2d_raw

BACKBONES = ("vdncnn", "vresnet", "tiny_vdncnn")
RECURRENCES = ("none_single", "none_multi", "feature_shift", "frame", "feature", "rlsp")
FEEDFORWARD = ("none_single", "none_multi", "feature_shift")
UNROLL_GUARDRAIL = 128


class ModelError(ValueError):
    pass


@dataclass
class ArchitectureSpec:
    backbone: str = "vdncnn"
    recurrence: str = "feature"
    channels: int = 0          # 0 -> backbone default (64, tiny: 16)
    depth: int = 0             # 0 -> backbone default (vdncnn convs: 10, vresnet blocks: 5)
    kernel_size: int = 3
    in_channels: int = 3
    tap_activation: str = "postact"
    frame_window: int = 3

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ModelError(f"unknown backbone {self.backbone!r}; supported: {BACKBONES}")
        if self.recurrence not in RECURRENCES:
            raise ModelError(f"unknown recurrence {self.recurrence!r}; supported: {RECURRENCES}")
        if self.channels == 0:
            self.channels = 16 if self.backbone == "tiny_vdncnn" else 64
        if self.depth == 0:
            self.depth = {"vdncnn": 10, "vresnet": 5, "tiny_vdncnn": 1}[self.backbone]
        if self.channels < 1:
            raise ModelError("channels must be >= 1")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ModelError("kernel_size must be odd and >= 1")
        if self.in_channels not in (1, 3):
            raise ModelError("in_channels must be 1 (gray) or 3 (RGB)")
        if self.tap_activation not in ("postact", "preact"):
            raise ModelError("tap_activation must be 'postact' or 'preact'")
        if self.recurrence == "none_multi" and self.frame_window < 2:
            raise ModelError("none_multi needs frame_window >= 2")
        n_convs = self.total_convs()
        if self.recurrence != "none_single" and n_convs < 3 and self.backbone != "vresnet":
            raise ModelError(
                f"{self.backbone} with {n_convs} convs cannot host recurrence "
                f"{self.recurrence!r}; supported matrix: any backbone with >= 3 convs "
                f"(vresnet: >= 1 block) x {RECURRENCES}"
            )
        if self.backbone == "vresnet" and self.depth < 1:
            raise ModelError("vresnet needs at least one residual block")

    def total_convs(self):
        if self.backbone == "vresnet":
            return 2 + 2 * self.depth
        if self.backbone == "tiny_vdncnn":
            return self.depth + 2
        return self.depth


def wiring_plan(spec):
    """Resolve tap/injection indices for a spec.

    For conv stacks, indices count convolutions; for vresnet, blocks.
    Injection concatenates state channels into the input of the indexed unit;
    taps read that unit's output.
    """
    if spec.backbone == "vresnet":
        blocks = spec.depth
        plan = {"inject": None, "tap": None}
        if spec.recurrence in ("feature", "rlsp"):
            plan["inject"] = 0
            plan["tap"] = blocks // 2 if spec.recurrence == "feature" else blocks - 1
        elif spec.recurrence == "feature_shift":
            plan["inject"] = blocks // 2
            plan["tap"] = -1  # head conv output
        return plan
    n_convs = spec.total_convs()
    plan = {"inject": None, "tap": None}
    if spec.recurrence in ("feature", "rlsp"):
        plan["inject"] = 1
        plan["tap"] = n_convs // 2 if spec.recurrence == "feature" else n_convs - 2
    elif spec.recurrence == "feature_shift":
        plan["inject"] = n_convs // 2
        plan["tap"] = 0
    return plan


def _zeros_like(value):
    if isinstance(value, list):
        return [_zeros_like(v) for v in value]
    if isinstance(value, Tensor):
        return np.zeros_like(value.data)
    return np.zeros_like(value)


def _copy_entry(value):
    if isinstance(value, list):
        return [_copy_entry(v) for v in value]
    if isinstance(value, Tensor):
        return value  # traced entries are immutable nodes; share them
    return value.copy()


@dataclass
class RecurrentState:
    """Hidden tensors plus a frame counter; reset() zeroes everything.

    Entries are float32 arrays on the frozen path and traced Tensors inside a
    recorded unroll, so gradients flow through time. reset() always drops back
    to detached zeros (the null initial state).
    """

    tensors: dict = field(default_factory=dict)
    frame: int = 0
    diverged: bool = False

    def reset(self):
        for k in self.tensors:
            self.tensors[k] = _zeros_like(self.tensors[k])
        self.frame = 0
        self.diverged = False

    def copy(self):
        return RecurrentState({k: _copy_entry(v) for k, v in self.tensors.items()},
                              self.frame, self.diverged)


class RecurrentModel:
    """Parameters, normalization wrappers and the (phi, psi) recurrence wiring."""

    def __init__(self, spec, layers, norm_config, norm_n=None, pad=DEFAULT_PAD,
                 dampening=1.0, dampen_route="features", seed=0):
        self.spec = spec
        self.layers = layers            # ordered list of NormalizedLayer
        self.by_name = {l.name: l for l in layers}
        self.norm_config = norm_config
        self.norm_n = norm_n
        self.pad = pad
        self.dampening = dampening
        self.dampen_route = dampen_route
        self.seed = seed
        self.frozen = False
        self._step_kernels = None
        self.plan = wiring_plan(spec)

    # -- parameters and normalization -----------------------------------------

    def parameters(self):
        params = []
        for layer in self.layers:
            params.extend(layer.parameters())
        return params

    def begin_step(self, n=None):
        """Recompute traced normalized kernels (one power iteration per layer)."""
        n = n or self.norm_n
        self._step_kernels = {l.name: l.effective_kernel(n) for l in self.layers}
        return self._step_kernels

    def freeze(self, n=None, iters=400, tol=1e-9):
        """Converge every layer's power iteration and cache inference kernels."""
        n = n or self.norm_n
        for layer in self.layers:
            layer.freeze(n, iters=iters, tol=tol)
        self.frozen = True
        return self

    def unfreeze(self):
        for layer in self.layers:
            layer.unfreeze()
        self.frozen = False

    # -- state ------------------------------------------------------------------

    def init_state(self, h, w=None):
        w = w or h
        spec = self.spec
        m, c = spec.channels, spec.in_channels
        if spec.recurrence == "none_single":
            tensors = {}
        elif spec.recurrence == "none_multi":
            tensors = {"frames": [np.zeros((h, w, c), dtype=np.float32)
                                  for _ in range(spec.frame_window - 1)]}
        elif spec.recurrence == "frame":
            tensors = {"prev_y": np.zeros((h, w, c), dtype=np.float32)}
        else:  # feature, rlsp, feature_shift
            tensors = {"h": np.zeros((h, w, m), dtype=np.float32)}
        return RecurrentState(tensors)

    # -- forward ------------------------------------------------------------------

    def _kernels_for(self, traced):
        if traced:
            if self.frozen:
                return {l.name: Tensor(l.frozen_kernel) for l in self.layers}
            if self._step_kernels is None:
                self.begin_step()
            return self._step_kernels
        if not self.frozen:
            raise ModelError("array-mode step needs a frozen model; call freeze() "
                             "or pass Tensor inputs for the traced path")
        return {l.name: l.frozen_kernel for l in self.layers}

    def _dampened_state(self, h_state, ops):
        lam = self.dampening
        if self.dampen_route == "features" and lam != 1.0:
            return ops["scale"](h_state, lam)
        return h_state

    def _dampen_mask(self, name):
        """Kernel-route dampening mask for the recurrent input-channel slice."""
        if self.dampen_route != "kernel" or self.dampening == 1.0:
            return None
        rec = self._rec_channels(name)
        if rec == 0:
            return None
        m_in = self.by_name[name].m_in
        mask = np.ones((1, 1, m_in, 1), dtype=np.float32)
        mask[:, :, m_in - rec:, :] = self.dampening
        return mask

    def _rec_channels(self, name):
        """Number of trailing recurrent input channels of the injection conv."""
        spec = self.spec
        if spec.recurrence == "frame" and name in ("conv00", "head"):
            return spec.in_channels
        if spec.recurrence in ("feature", "rlsp"):
            inj = self.plan["inject"]
            if spec.backbone == "vresnet" and name == f"b{inj}a":
                return spec.channels
            if spec.backbone != "vresnet" and name == f"conv{inj:02d}":
                return spec.channels
        return 0

    def step(self, state, x, collect_taps=False):
        """One recurrence update: returns (y, new_state).

        Traced when ``x`` is a Tensor (records the tape; gradients can flow to
        inputs and parameters), plain float32 numpy otherwise (requires a
        frozen model). NaN/Inf in the output sets ``new_state.diverged``
        instead of raising, so harnesses can observe divergence.
        """
        traced = isinstance(x, Tensor)
        kernels = self._kernels_for(traced)
        if traced:
            def conv_op(z, K, b, name):
                mask = self._dampen_mask(name)
                if mask is not None:
                    K = T.mul(K, Tensor(mask))
                return T.conv2d(z, K, pad=self.pad, bias=b, unchecked=True)

            ops = {
                "conv": conv_op,
                "relu": T.relu,
                "concat": T.concat_channels,
                "scale": T.scale,
                "add": lambda a, b: a + b,
            }
        else:
            def conv_op(z, K, b, name):
                mask = self._dampen_mask(name)
                if mask is not None:
                    K = K * mask
                y = conv2d_raw(z, K, pad=self.pad)
                if b is not None:
                    y = y + (b.data if isinstance(b, Tensor) else b)
                return y

            ops = {
                "conv": conv_op,
                "relu": lambda z: np.maximum(z, 0),
                "concat": lambda parts: np.concatenate(parts, axis=-1),
                "scale": lambda z, c: z * np.float32(c),
                "add": lambda a, b: a + b,
            }
        y, new_tensors, taps = self._forward(x, state.tensors, kernels, ops, traced)
        y_data = y.data if traced else y
        new_state = RecurrentState(new_tensors, state.frame + 1,
                                   diverged=not bool(np.isfinite(y_data).all()))
        if collect_taps:
            return y, new_state, taps
        return y, new_state

    def _forward(self, x, st, kernels, ops, traced):
        spec = self.spec
        plan = self.plan

        def as_const(arr):
            return Tensor(arr) if traced and not isinstance(arr, Tensor) else arr

        def conv(name, z):
            layer = self.by_name[name]
            return ops["conv"](z, kernels[name], layer.bias, name)

        taps = {}
        rec = spec.recurrence
        # assemble network input
        if rec == "frame":
            net_in = ops["concat"]([x, self._dampened_state(as_const(st["prev_y"]), ops)])
        elif rec == "none_multi":
            past = [as_const(f) for f in st["frames"]]
            net_in = ops["concat"](past + [x])
        else:
            net_in = x

        h_in = None
        if rec in ("feature", "rlsp", "feature_shift"):
            h_in = as_const(st["h"])
            if rec in ("feature", "rlsp"):
                h_in = self._dampened_state(h_in, ops)

        new_tap = None
        if spec.backbone == "vresnet":
            f = conv("head", net_in)
            f = ops["relu"](f)
            if rec == "feature_shift" and plan["tap"] == -1:
                new_tap = f
            for j in range(spec.depth):
                block_in = f
                if plan["inject"] == j and rec in ("feature", "rlsp", "feature_shift"):
                    block_in = ops["concat"]([f, h_in])
                g = conv(f"b{j}a", block_in)
                g = ops["relu"](g)
                g = conv(f"b{j}b", g)
                f = ops["add"](f, g)  # identity skip over the non-recurrent half
                if plan["tap"] == j and rec in ("feature", "rlsp"):
                    new_tap = f
            y = conv("tail", f)
        else:
            n_convs = spec.total_convs()
            f = net_in
            for i in range(n_convs):
                if plan["inject"] == i and rec in ("feature", "rlsp", "feature_shift"):
                    f = ops["concat"]([f, h_in])
                f = conv(f"conv{i:02d}", f)
                pre = f
                if i < n_convs - 1:
                    f = ops["relu"](f)
                if plan["tap"] == i and rec in ("feature", "rlsp", "feature_shift"):
                    new_tap = pre if spec.tap_activation == "preact" else f
            y = f

        # state entries stay traced inside a recorded run so BPTT sees them
        new_tensors = {}
        if rec == "frame":
            new_tensors["prev_y"] = y
        elif rec == "none_multi":
            new_tensors["frames"] = list(st["frames"][1:]) + [x]
        elif rec in ("feature", "rlsp", "feature_shift"):
            new_tensors["h"] = new_tap
            taps["h"] = new_tap
        return y, new_tensors, taps

    def unroll(self, X, n=None):
        """Differentiable unroll over a sequence from the zero state.

        Returns (list of output Tensors, final state). Memory grows with the
        sequence length; runs longer than 128 frames must be truncated.
        """
        if len(X) > UNROLL_GUARDRAIL:
            raise ModelError(
                f"unroll length {len(X)} exceeds guardrail {UNROLL_GUARDRAIL}; "
                "run truncated segments and carry the state"
            )
        first = X[0]
        h, w = (first.shape[0], first.shape[1])
        state = self.init_state(h, w)
        if not self.frozen and self._step_kernels is None:
            self.begin_step(n or self.norm_n or h)
        ys = []
        for x in X:
            xt = x if isinstance(x, Tensor) else Tensor(x)
            y, state = self.step(state, xt)
            ys.append(y)
        return ys, state

    # -- recurrent path for the Lipschitz bound --------------------------------

    def recurrent_path(self):
        """Conv layers between state injection and state tap, in order.

        Elements are ("conv", name, kernel_array) or ("residual", name, Ka, Kb).
        Feedforward wirings return an empty path. Frame recurrence passes
        through the whole network (the output is the state).
        """
        spec = self.spec
        kern = lambda name: (self.by_name[name].frozen_kernel
                             if self.frozen and self.by_name[name].frozen_kernel is not None
                             else self._alpha_scaled_raw(name))
        if spec.recurrence in FEEDFORWARD:
            return []
        path = []
        if spec.backbone == "vresnet":
            if spec.recurrence == "frame":
                path.append(("conv", "head", kern("head")))
                for j in range(spec.depth):
                    path.append(("residual", f"b{j}", kern(f"b{j}a"), kern(f"b{j}b")))
                path.append(("conv", "tail", kern("tail")))
                return path
            inj, tap = self.plan["inject"], self.plan["tap"]
            path.append(("conv", f"b{inj}a", kern(f"b{inj}a")))
            path.append(("conv", f"b{inj}b", kern(f"b{inj}b")))
            for j in range(inj + 1, tap + 1):
                path.append(("residual", f"b{j}", kern(f"b{j}a"), kern(f"b{j}b")))
            return path
        n_convs = spec.total_convs()
        if spec.recurrence == "frame":
            lo, hi = 0, n_convs - 1
        else:
            lo, hi = self.plan["inject"], self.plan["tap"]
        for i in range(lo, hi + 1):
            path.append(("conv", f"conv{i:02d}", kern(f"conv{i:02d}")))
        return path

    def _alpha_scaled_raw(self, name):
        """Best available kernel for bounds when not frozen: raw K (scheme none)
        or a frozen-on-demand copy."""
        layer = self.by_name[name]
        if layer.config.scheme == "none":
            return layer.kernel.data
        return layer.freeze(self.norm_n)

    def rescale_layer_sigmas(self, target, n=None):
        """Scalar-rescale every conv kernel so its layer sigma1 equals target."""
        n = n or self.norm_n
        for layer in self.layers:
            s1 = fft_exact_spectrum(layer.kernel.data, n).sigma1
            if s1 > 0:
                layer.kernel.data = (layer.kernel.data * np.float32(target / s1))
        if self.frozen:
            self.freeze(n)
        return self


# -- construction ---------------------------------------------------------------


def _layer_channel_plan(spec):
    """Ordered (name, c_in, c_out) triples for every conv in the architecture."""
    m, c = spec.channels, spec.in_channels
    plan = wiring_plan(spec)
    rows = []
    in0 = c
    if spec.recurrence == "frame":
        in0 = 2 * c
    elif spec.recurrence == "none_multi":
        in0 = spec.frame_window * c
    if spec.backbone == "vresnet":
        rows.append(("head", in0, m))
        for j in range(spec.depth):
            cin = 2 * m if plan["inject"] == j and spec.recurrence in (
                "feature", "rlsp", "feature_shift") else m
            rows.append((f"b{j}a", cin, m))
            rows.append((f"b{j}b", m, m))
        rows.append(("tail", m, c))
        return rows
    n_convs = spec.total_convs()
    for i in range(n_convs):
        cin = in0 if i == 0 else m
        if plan["inject"] == i and spec.recurrence in ("feature", "rlsp", "feature_shift"):
            cin += m
        cout = c if i == n_convs - 1 else m
        rows.append((f"conv{i:02d}", cin, cout))
    return rows


def build(spec, seed=0, init="gaussian", sigma_init=0.1, norm=None, norm_n=None,
          pad=DEFAULT_PAD, bias=True, dampening=1.0, dampen_route="features"):
    """Construct a model with deterministic initialization.

    ``init="gaussian"`` draws N(0, sigma_init) weights (the random-model probe
    setting); ``init="he"`` uses fan-in scaled draws for training builds.
    """
    if init not in ("gaussian", "he"):
        raise ModelError(f"unknown init {init!r}")
    norm = norm or NormalizerConfig()
    rng = np.random.default_rng(seed)
    k = spec.kernel_size
    layers = []
    rows = _layer_channel_plan(spec)
    last_name = rows[-1][0]
    for name, cin, cout in rows:
        std = sigma_init if init == "gaussian" else np.sqrt(2.0 / (k * k * cin))
        w = rng.normal(0.0, std, size=(k, k, cin, cout)).astype(np.float32)
        b = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True) if bias else None
        cfg = norm
        if name == last_name and norm.scheme != "none" and not norm.include_output:
            cfg = replace(norm, scheme="none")
        layers.append(NormalizedLayer(name, Tensor(w, requires_grad=True), bias=b,
                                      config=cfg, norm_n=norm_n, pad=pad, seed=seed))
    return RecurrentModel(spec, layers, norm, norm_n=norm_n, pad=pad,
                          dampening=dampening, dampen_route=dampen_route, seed=seed)


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(model, path_base, metadata=None):
    """Write parameters + power-iteration state to {base}.rvpt and a JSON sidecar."""
    tensors = []
    for layer in model.layers:
        tensors.append((f"param.{layer.name}.kernel", layer.kernel.data))
        if layer.bias is not None:
            tensors.append((f"param.{layer.name}.bias", layer.bias.data))
        if layer.config.scheme == "srnl" and layer.pi_state is not None:
            tensors.append((f"pi.{layer.name}", layer.pi_state.u))
        elif layer.config.scheme == "srn" and layer.pi_state is not None:
            tensors.append((f"pi.{layer.name}", np.asarray(layer.pi_state, dtype=np.float32)))
    save_rvpt(f"{path_base}.rvpt", tensors)
    meta = {
        "architecture": asdict(model.spec),
        "normalizer": asdict(model.norm_config),
        "norm_n": model.norm_n,
        "pad": model.pad,
        "dampening": model.dampening,
        "dampen_route": model.dampen_route,
        "seed": model.seed,
    }
    meta.update(metadata or {})
    with open(f"{path_base}.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return f"{path_base}.rvpt"


def load_checkpoint(path_base, freeze=True, freeze_iters=400):
    """Rebuild a model from {base}.rvpt / {base}.json; optionally freeze it."""
    if path_base.endswith(".rvpt") or path_base.endswith(".json"):
        path_base = path_base.rsplit(".", 1)[0]
    with open(f"{path_base}.json") as f:
        meta = json.load(f)
    spec = ArchitectureSpec(**meta["architecture"])
    norm = NormalizerConfig(**meta["normalizer"])
    model = build(spec, seed=meta.get("seed", 0), norm=norm, norm_n=meta.get("norm_n"),
                  pad=meta.get("pad", DEFAULT_PAD), dampening=meta.get("dampening", 1.0),
                  dampen_route=meta.get("dampen_route", "features"))
    data = load_rvpt(f"{path_base}.rvpt")
    for layer in model.layers:
        key = f"param.{layer.name}.kernel"
        if key not in data:
            raise ModelError(f"checkpoint {path_base}: missing tensor {key} for this architecture")
        if data[key].shape != layer.kernel.data.shape:
            raise ModelError(
                f"checkpoint {path_base}: {key} has shape {data[key].shape}, architecture "
                f"expects {layer.kernel.data.shape}"
            )
        layer.kernel.data = data[key]
        bkey = f"param.{layer.name}.bias"
        if layer.bias is not None and bkey in data:
            layer.bias.data = data[bkey]
        pkey = f"pi.{layer.name}"
        if pkey in data:
            if layer.config.scheme == "srnl":
                layer.pi_state = PowerIterationState(u=data[pkey])
            elif layer.config.scheme == "srn":
                layer.pi_state = data[pkey].astype(np.float64)
    model.meta = meta
    if freeze:
        model.freeze(iters=freeze_iters)
    return model
