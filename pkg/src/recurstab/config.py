"""Line-oriented run configuration: ``section.key = value`` with a fixed schema.

Unknown keys are rejected with the offending key path. Every command writes
its fully resolved configuration next to its outputs, and can be re-run from
that file alone.
"""

from __future__ import annotations

import math


class ConfigError(ValueError):
    pass


def _bool(v):
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {v!r}")


def _opt_float(v):
    s = str(v).strip().lower()
    if s in ("", "none", "off"):
        return None
    return float(v)


# key -> (parser, default, help)
SCHEMA = {
    "run.seed": (int, 0, "master seed; per-component streams derive from it"),
    "run.out": (str, "out", "output directory"),
    "run.threads": (int, 1, "worker threads for seed/restart fan-out"),
    "io.checkpoint": (str, "", "checkpoint base path (without extension)"),
    "io.stream": (str, "", "frame stream: directory, .rvpt, or synth:<still.pgm>"),

    "arch.backbone": (str, "vdncnn", "vdncnn | vresnet | tiny_vdncnn"),
    "arch.recurrence": (str, "feature", "none_single|none_multi|feature_shift|frame|feature|rlsp"),
    "arch.channels": (int, 0, "feature channels (0 = backbone default)"),
    "arch.depth": (int, 0, "convs (vdncnn) / blocks (vresnet) / internal convs (tiny); 0 = default"),
    "arch.kernel_size": (int, 3, "odd spatial kernel size"),
    "arch.in_channels": (int, 1, "1 gray or 3 RGB"),
    "arch.tap_activation": (str, "postact", "recurrent tap point: postact | preact"),

    "norm.scheme": (str, "none", "none | srn | srnl"),
    "norm.alpha": (float, 1.0, "target spectral norm"),
    "norm.beta": (float, 1.0, "target stable-rank fraction in (0, 1]"),
    "norm.epsilon": (float, 1e-12, "normalization division guard"),
    "norm.power_iters": (int, 1, "power iterations per training step"),
    "norm.include_output": (_bool, True, "normalize the final output conv too"),

    "dampening.lambda": (float, 1.0, "recurrent feature dampening factor in [0, 1]"),
    "dampening.route": (str, "features", "apply to 'features' or 'kernel'"),

    "train.frames": (int, 7, "BPTT sequence length"),
    "train.crop": (int, 64, "training crop size"),
    "train.sigma": (float, 30.0, "Gaussian noise std on the 0..255 scale"),
    "train.steps": (int, 1000, "optimization steps"),
    "train.lr": (float, 1e-4, "Adam learning rate"),
    "train.batch": (int, 4, "clips per step (gradient accumulation)"),
    "train.val_every": (int, 200, "validation PSNR cadence (0 = off)"),
    "train.grad_clip": (_opt_float, None, "gradient norm clip (off by default)"),
    "train.nonfinite": (str, "continue", "non-finite loss policy: continue | halt"),

    "data.path": (str, "", "directory of stills/frames for training"),
    "data.synthetic_stills": (int, 4, "generated stills when data.path is empty"),
    "data.still_size": (int, 96, "generated still size"),
    "data.v_max": (float, 2.0, "synthetic motion: max velocity (px/frame)"),
    "data.vel_std": (float, 0.25, "synthetic motion: velocity random-walk std"),

    "strf.loss": (str, "center_pixel", "norm_y0 | center_pixel"),
    "strf.tau": (int, 40, "half sequence length (2*tau+1 frames)"),
    "strf.size": (int, 64, "adversarial image size"),
    "strf.iters": (int, 1000, "Adam iterations per restart"),
    "strf.lr": (float, 1e-2, "Adam step size on the input"),
    "strf.restarts": (int, 3, "random restarts, best objective kept"),
    "strf.theta_infl": (float, 1e-3, "influence threshold on e_t"),
    "strf.theta_div": (float, 1e3, "output growth threshold"),

    "stability.frames": (int, 2000, "frames to stream"),
    "stability.sigma": (float, 30.0, "stream noise std, 0..255 scale"),
    "stability.psnr_fail": (float, 0.0, "failure threshold in dB"),
    "stability.decimate": (int, 1, "PSNR trace decimation"),
    "stability.inject_failures": (str, "", "comma-separated absolute frames to force-fail"),

    "probe.frames": (int, 50, "probe sequence length"),
    "probe.seeds": (int, 20, "random seeds per architecture"),
    "probe.size": (int, 16, "probe image size"),
    "probe.channels": (int, 48, "probe feature channels (wide enough to show divergence)"),
    "probe.depth": (int, 5, "probe conv depth"),
    "probe.sigma_init": (float, 0.1, "Gaussian init std"),
    "probe.rescale_sigma1": (_opt_float, None, "rescale every layer to this sigma1"),

    "spectrum.size": (int, 16, "operator image size n for spectra"),

    "gendata.stills": (int, 4, "stills to generate"),
    "gendata.size": (int, 96, "still size"),
    "gendata.frames": (int, 0, "also write a motion sequence of this length"),
    "gendata.crop": (int, 32, "sequence crop size"),
}


class RunConfig:
    """Typed key-value store over the fixed schema."""

    def __init__(self, values=None):
        self.values = dict(values or {})
        for key in self.values:
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")

    def get(self, key):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values.get(key, SCHEMA[key][1])

    def set(self, key, raw):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        parser = SCHEMA[key][0]
        try:
            self.values[key] = parser(raw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from None

    def update(self, pairs):
        for k, v in pairs:
            self.set(k, v)
        return self

    def resolved(self):
        out = {}
        for key in sorted(SCHEMA):
            out[key] = self.get(key)
        return out


def parse_config_text(text):
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        cfg.set(key.strip(), raw.strip())
    return cfg


def load_config(path):
    with open(path) as f:
        return parse_config_text(f.read())


def write_resolved(cfg, path):
    lines = ["# resolved configuration (re-run any command from this file alone)"]
    for key, value in cfg.resolved().items():
        if value is None:
            value = "none"
        elif isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float) and math.isinf(value):
            value = "inf"
        lines.append(f"{key} = {value}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    return path
