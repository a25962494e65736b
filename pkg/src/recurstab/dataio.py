"""Sequence ingestion, Gaussian-noise pairing, crops and synthetic motion.

Frames are float32 [h, w, c] in [0, 1]; 8-bit image files map through /255.
Supported on-disk formats: binary PGM (P5) and PPM (P6) with maxval 255, and
RVPT archives (one tensor per frame, stored order).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .archive import load_rvpt, save_rvpt


class DataError(ValueError):
    pass


# -- Netpbm ----------------------------------------------------------------------


def _read_pnm_tokens(blob, count):
    """First ``count`` whitespace/comment-delimited header tokens and the offset after them."""
    tokens = []
    i = 0
    while len(tokens) < count:
        if i >= len(blob):
            raise DataError("truncated PNM header")
        ch = blob[i:i + 1]
        if ch == b"#":
            while i < len(blob) and blob[i:i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(blob) and not blob[j:j + 1].isspace() and blob[j:j + 1] != b"#":
                j += 1
            tokens.append(blob[i:j])
            i = j
    # exactly one whitespace byte separates the header from the raster
    return tokens, i + 1


def read_image(path):
    """Read a binary PGM/PPM file into float32 [h, w, 1|3] in [0, 1]."""
    with open(path, "rb") as f:
        blob = f.read()
    tokens, off = _read_pnm_tokens(blob, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: unsupported magic {magic!r}; only binary P5/P6 are supported")
    channels = 1 if magic == b"P5" else 3
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as e:
        raise DataError(f"{path}: malformed header: {e}") from None
    if maxval != 255:
        raise DataError(f"{path}: maxval {maxval} unsupported; expected 255")
    need = h * w * channels
    raster = blob[off:off + need]
    if len(raster) < need:
        raise DataError(f"{path}: raster truncated: {len(raster)} of {need} bytes")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, channels)
    return img.astype(np.float32) / 255.0


def write_image(path, frame):
    """Write float32 [h, w, 1|3] in [0, 1] as binary PGM/PPM (values clipped)."""
    frame = np.asarray(frame)
    if frame.ndim == 2:
        frame = frame[:, :, None]
    if frame.shape[2] not in (1, 3):
        raise DataError(f"cannot write {frame.shape[2]}-channel image; expected 1 or 3")
    magic = b"P5" if frame.shape[2] == 1 else b"P6"
    data = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (frame.shape[1], frame.shape[0]))
        f.write(data.tobytes())
    return path


# -- sequence sources --------------------------------------------------------------


def load_sequence(source):
    """Iterate clean frames from a directory, an RVPT archive, or a generator.

    Directories stream *.pgm / *.ppm files in lexicographic order; all frames
    must decode to identical shapes (the offending file is named otherwise).
    """
    if hasattr(source, "__iter__") and not isinstance(source, (str, os.PathLike)):
        yield from source
        return
    source = os.fspath(source)
    if os.path.isdir(source):
        names = sorted(n for n in os.listdir(source)
                       if n.lower().endswith((".pgm", ".ppm")))
        if not names:
            raise DataError(f"{source}: no .pgm/.ppm files found")
        shape = None
        for name in names:
            frame = read_image(os.path.join(source, name))
            if shape is None:
                shape = frame.shape
            elif frame.shape != shape:
                raise DataError(
                    f"{source}/{name}: frame shape {frame.shape} differs from first frame {shape}"
                )
            yield frame
        return
    if source.endswith(".rvpt"):
        tensors = load_rvpt(source)
        shape = None
        for idx, (name, arr) in enumerate(tensors.items()):
            if arr.ndim == 2:
                arr = arr[:, :, None]
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise DataError(f"{source}: tensor {name!r} (frame {idx}) has shape "
                                f"{arr.shape}, expected {shape}")
            yield arr
        return
    raise DataError(f"{source}: not a directory, .rvpt archive, or frame iterable")


def save_sequence_rvpt(path, frames):
    save_rvpt(path, [(f"frame_{i:06d}", f) for i, f in enumerate(frames)])
    return path


# -- noise --------------------------------------------------------------------------


@dataclass
class NoiseSpec:
    """Gaussian noise level on the [0, 1] scale plus the stream seed."""

    sigma: float
    seed: int = 0
    clip: bool = False

    def __post_init__(self):
        if self.sigma < 0:
            raise DataError(f"noise sigma must be >= 0, got {self.sigma}")

    @classmethod
    def from_8bit(cls, sigma255, seed=0, clip=False):
        return cls(sigma=sigma255 / 255.0, seed=seed, clip=clip)


def add_noise(frame, spec, index):
    """Clean frame + i.i.d. Gaussian noise, reproducible per (seed, frame index).

    Noise is not clipped by default: clipping would skew its statistics; pass
    clip=True on the spec to force the noisy frame back into [0, 1].
    """
    if spec.sigma == 0.0:
        return np.asarray(frame, dtype=np.float32)
    rng = np.random.default_rng([spec.seed, int(index)])
    noisy = np.asarray(frame, dtype=np.float32) + rng.normal(
        0.0, spec.sigma, size=np.shape(frame)).astype(np.float32)
    if spec.clip:
        noisy = np.clip(noisy, 0.0, 1.0)
    return noisy


# -- synthetic motion ------------------------------------------------------------------


def _bilinear_window(still, top, left, size):
    """Subpixel crop of a [H, W, c] still at float offsets, edge-clamped gather."""
    H, W = still.shape[:2]
    i0, j0 = int(np.floor(top)), int(np.floor(left))
    fi, fj = top - i0, left - j0
    rows = np.clip(np.arange(i0, i0 + size + 1), 0, H - 1)
    cols = np.clip(np.arange(j0, j0 + size + 1), 0, W - 1)
    patch = still[np.ix_(rows, cols)]
    top_blend = (1 - fi) * patch[:size] + fi * patch[1:size + 1]
    return ((1 - fj) * top_blend[:, :size] + fj * top_blend[:, 1:size + 1]).astype(np.float32)


def _reflect(pos, lo, hi):
    """Fold a coordinate into [lo, hi] by reflection at the boundaries."""
    if hi <= lo:
        return lo
    span = hi - lo
    t = (pos - lo) % (2 * span)
    return lo + (t if t <= span else 2 * span - t)


class SyntheticMotionSource:
    """Smooth random-walk translation over a still image: a long clean sequence.

    The window follows a velocity random walk (per-frame std ``vel_std``,
    clamped to ``v_max`` pixels/frame) and reflects off the still's borders,
    so the path never leaves the image. Bilinear subpixel resampling; integer
    positions reproduce exact pixel crops. Re-instantiating with the same
    arguments reproduces the stream bit-exactly.
    """

    def __init__(self, still, length, crop, seed=0, v_max=2.0, vel_std=0.25):
        self.still = np.asarray(still, dtype=np.float32)
        if self.still.ndim == 2:
            self.still = self.still[:, :, None]
        H, W = self.still.shape[:2]
        if H < crop or W < crop:
            raise DataError(f"still {H}x{W} smaller than crop {crop}")
        self.length = length
        self.crop = crop
        self.seed = seed
        self.v_max = v_max
        self.vel_std = vel_std

    def __iter__(self):
        rng = np.random.default_rng([self.seed, 0x6D6F])
        H, W = self.still.shape[:2]
        hi_i, hi_j = float(H - self.crop), float(W - self.crop)
        pos = np.array([rng.uniform(0, hi_i), rng.uniform(0, hi_j)])
        vel = np.zeros(2)
        for _ in range(self.length):
            yield _bilinear_window(self.still, pos[0], pos[1], self.crop)
            vel = vel + rng.normal(0.0, self.vel_std, size=2)
            vel = np.clip(vel, -self.v_max, self.v_max)
            pos = np.array([_reflect(pos[0] + vel[0], 0.0, hi_i),
                            _reflect(pos[1] + vel[1], 0.0, hi_j)])

    def frames(self):
        return list(self)


def synth_motion_sequence(still, length, seed=0, crop=None, v_max=2.0, vel_std=0.25):
    """Array [length, crop, crop, c] of synthetic-motion frames from one still."""
    crop = crop or min(still.shape[0], still.shape[1])
    src = SyntheticMotionSource(still, length, crop, seed=seed, v_max=v_max, vel_std=vel_std)
    return np.stack(src.frames())


# -- crops ------------------------------------------------------------------------------


def sample_crops(frames, crop, T, count, seed=0):
    """Aligned spatio-temporal crops: [count, T, crop, crop, c], deterministic."""
    frames = np.asarray(frames)
    total, H, W = frames.shape[:3]
    if H < crop or W < crop:
        raise DataError(f"frames {H}x{W} smaller than crop {crop}")
    if total < T:
        raise DataError(f"sequence length {total} shorter than clip length {T}")
    rng = np.random.default_rng([seed, 0xC309])
    out = np.empty((count, T, crop, crop, frames.shape[3]), dtype=np.float32)
    for b in range(count):
        t0 = rng.integers(0, total - T + 1)
        i0 = rng.integers(0, H - crop + 1)
        j0 = rng.integers(0, W - crop + 1)
        out[b] = frames[t0:t0 + T, i0:i0 + crop, j0:j0 + crop]
    return out


# -- bundled deterministic test stills ----------------------------------------------------


def make_test_still(size=96, kind="smooth", seed=0, channels=1):
    """Deterministic synthetic stills: band-limited noise textures and ramps.

    Stand-ins for natural images at desk scale ('smooth' has the spatial
    autocorrelation the motion generator tests rely on).
    """
    rng = np.random.default_rng([seed, 0x57])
    if kind == "smooth":
        # 1/f^2 spectrum: the roll-off of natural images, so subpixel motion
        # keeps consecutive frames highly correlated
        base = rng.normal(size=(size, size, channels))
        fx = np.fft.rfftfreq(size)[None, :, None]
        fy = np.fft.fftfreq(size)[:, None, None]
        spec = np.fft.rfft2(base, axes=(0, 1)) / (0.02 ** 2 + fx ** 2 + fy ** 2)
        img = np.fft.irfft2(spec, s=(size, size), axes=(0, 1))
        img = img - img.min()
        img = img / max(img.max(), 1e-9)
    elif kind == "ramp":
        gx = np.linspace(0, 1, size)[None, :, None]
        gy = np.linspace(0, 1, size)[:, None, None]
        img = np.repeat(0.5 * gx + 0.5 * gy, channels, axis=2)
    elif kind == "checker":
        ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        img = (((ii // 8) + (jj // 8)) % 2).astype(np.float32)[:, :, None]
        img = np.repeat(0.15 + 0.7 * img, channels, axis=2)
    else:
        raise DataError(f"unknown still kind {kind!r}")
    return img.astype(np.float32)


def write_test_stills(out_dir, count=4, size=96, seed=0, channels=1):
    """Write a small deterministic still set as PGM/PPM files; returns paths."""
    os.makedirs(out_dir, exist_ok=True)
    kinds = ["smooth", "smooth", "ramp", "checker"]
    paths = []
    for i in range(count):
        kind = kinds[i % len(kinds)]
        still = make_test_still(size=size, kind=kind, seed=seed + i, channels=channels)
        ext = "pgm" if channels == 1 else "ppm"
        paths.append(write_image(os.path.join(out_dir, f"still_{i:02d}_{kind}.{ext}"), still))
    return paths
