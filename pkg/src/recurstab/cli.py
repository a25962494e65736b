"""Command-line surface: train, strf, stability, spectrum, probe, normcheck, gendata.

Exit codes: 0 success (and stable verdict), 2 unstable verdict from strf /
stability, 1 error. Every run writes its resolved configuration next to its
outputs so it can be reproduced from that file alone.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .config import ConfigError, RunConfig, load_config, write_resolved
from .dataio import (
    DataError,
    NoiseSpec,
    SyntheticMotionSource,
    load_sequence,
    make_test_still,
    read_image,
    save_sequence_rvpt,
    write_image,
    write_test_stills,
)
from .diagnostics import (
    FailureInjector,
    divergence_probe,
    probe_csv_rows,
    stability_harness,
    strf_search,
)
from .models import ArchitectureSpec, ModelError, build, load_checkpoint
from .normalize import NormalizationError, NormalizerConfig
from .spectral import SpectralError, fft_exact_spectrum, lipschitz_upper_bound, stable_rank
from .training import TrainConfig, train


class CliError(ValueError):
    pass


def _outdir(cfg):
    out = cfg.get("run.out")
    os.makedirs(out, exist_ok=True)
    return out


def _write_csv(path, rows):
    with open(path, "w", newline="") as f:
        csv.writer(f).writerows(rows)
    return path


def _arch_from_config(cfg):
    return ArchitectureSpec(
        backbone=cfg.get("arch.backbone"),
        recurrence=cfg.get("arch.recurrence"),
        channels=cfg.get("arch.channels"),
        depth=cfg.get("arch.depth"),
        kernel_size=cfg.get("arch.kernel_size"),
        in_channels=cfg.get("arch.in_channels"),
        tap_activation=cfg.get("arch.tap_activation"),
    )


def _norm_from_config(cfg):
    return NormalizerConfig(
        scheme=cfg.get("norm.scheme"),
        alpha=cfg.get("norm.alpha"),
        beta=cfg.get("norm.beta"),
        epsilon=cfg.get("norm.epsilon"),
        power_iters_per_step=cfg.get("norm.power_iters"),
        include_output=cfg.get("norm.include_output"),
    )


def _load_stills(cfg):
    path = cfg.get("data.path")
    if path:
        if not os.path.isdir(path):
            raise CliError(f"data.path {path!r} is not a directory")
        names = sorted(n for n in os.listdir(path) if n.lower().endswith((".pgm", ".ppm")))
        if not names:
            raise CliError(f"data.path {path!r} holds no .pgm/.ppm stills")
        return [read_image(os.path.join(path, n)) for n in names]
    count = cfg.get("data.synthetic_stills")
    size = cfg.get("data.still_size")
    c = cfg.get("arch.in_channels")
    kinds = ["smooth", "smooth", "ramp", "checker"]
    return [make_test_still(size=size, kind=kinds[i % 4], seed=cfg.get("run.seed") + i,
                            channels=c) for i in range(count)]


def _open_stream(cfg, frames, crop):
    """Frame stream for the harness: directory, .rvpt, or synth:<still-file>."""
    spec = cfg.get("io.stream")
    if not spec:
        still = make_test_still(size=max(3 * crop, 96), kind="smooth",
                                seed=cfg.get("run.seed"), channels=cfg.get("arch.in_channels"))
        return SyntheticMotionSource(still, frames, crop, seed=cfg.get("run.seed"),
                                     v_max=cfg.get("data.v_max"), vel_std=cfg.get("data.vel_std"))
    if spec.startswith("synth:"):
        still = read_image(spec[len("synth:"):])
        return SyntheticMotionSource(still, frames, crop, seed=cfg.get("run.seed"),
                                     v_max=cfg.get("data.v_max"), vel_std=cfg.get("data.vel_std"))
    if not os.path.exists(spec):
        raise CliError(f"io.stream {spec!r} does not exist")
    return load_sequence(spec)


def _require_checkpoint(cfg):
    base = cfg.get("io.checkpoint")
    if not base:
        raise CliError("io.checkpoint is required (base path of a saved checkpoint)")
    probe = base if base.endswith(".json") else base + ".json"
    if not os.path.exists(probe):
        raise CliError(f"checkpoint sidecar {probe!r} not found")
    return load_checkpoint(base)


# -- commands -----------------------------------------------------------------------


def cmd_train(cfg):
    out = _outdir(cfg)
    stills = _load_stills(cfg)
    spec = _arch_from_config(cfg)
    norm = _norm_from_config(cfg)
    tcfg = TrainConfig(
        frames=cfg.get("train.frames"), crop=cfg.get("train.crop"),
        sigma255=cfg.get("train.sigma"), steps=cfg.get("train.steps"),
        lr=cfg.get("train.lr"), batch=cfg.get("train.batch"),
        seed=cfg.get("run.seed"), grad_clip=cfg.get("train.grad_clip"),
        nonfinite=cfg.get("train.nonfinite"), val_every=cfg.get("train.val_every"),
        v_max=cfg.get("data.v_max"), vel_std=cfg.get("data.vel_std"),
    )
    model = build(spec, seed=cfg.get("run.seed"), init="he", norm=norm,
                  norm_n=tcfg.crop, dampening=cfg.get("dampening.lambda"),
                  dampen_route=cfg.get("dampening.route"))
    base = os.path.join(out, "checkpoint")
    result = train(model, tcfg, stills=stills, checkpoint_base=base,
                   log=lambda s, l, v: print(f"step {s}: loss {l:.6g}"
                                             + (f" val_psnr {v:.2f}" if not math.isnan(v) else "")))
    _write_csv(os.path.join(out, "loss_curve.csv"), result.curve_csv_rows())
    if result.events:
        with open(os.path.join(out, "events.txt"), "w") as f:
            f.write("\n".join(result.events) + "\n")
        print(f"{len(result.events)} training anomalies recorded -> events.txt")
    write_resolved(cfg, os.path.join(out, "resolved.cfg"))
    print(f"checkpoint: {base}.rvpt  loss curve: {out}/loss_curve.csv")
    return 0


def _strf_image_grids(report, out, stride=5):
    """X and Y strips sampled every ``stride`` frames, written as PGM/PPM."""
    frames = report.X.shape[0]
    idx = list(range(0, frames, stride))
    xs = [report.X[i] for i in idx]
    ys = [np.clip(report.Y[i], 0.0, 1.0) for i in idx]
    write_image(os.path.join(out, "strf_X.pgm" if xs[0].shape[-1] == 1 else "strf_X.ppm"),
                np.concatenate(xs, axis=1))
    write_image(os.path.join(out, "strf_Y.pgm" if ys[0].shape[-1] == 1 else "strf_Y.ppm"),
                np.concatenate(ys, axis=1))


def cmd_strf(cfg):
    out = _outdir(cfg)
    model = _require_checkpoint(cfg)
    report = strf_search(
        model, loss_kind=cfg.get("strf.loss"), tau=cfg.get("strf.tau"),
        n=cfg.get("strf.size"), iters=cfg.get("strf.iters"), lr=cfg.get("strf.lr"),
        seed=cfg.get("run.seed"), restarts=cfg.get("strf.restarts"),
        theta_infl=cfg.get("strf.theta_infl"), theta_div=cfg.get("strf.theta_div"),
    )
    report.to_json(os.path.join(out, "strf_report.json"))
    save_sequence_rvpt(os.path.join(out, "strf_X.rvpt"), list(report.X))
    save_sequence_rvpt(os.path.join(out, "strf_Y.rvpt"),
                       list(np.nan_to_num(report.Y, posinf=0.0, neginf=0.0)))
    _strf_image_grids(report, out)
    write_resolved(cfg, os.path.join(out, "resolved.cfg"))
    print(f"STRF verdict: {report.verdict} (temporal extent {report.temporal_extent}, "
          f"diverged={report.diverged})")
    return 0 if report.verdict == "bounded" else 2


def cmd_stability(cfg):
    out = _outdir(cfg)
    model = _require_checkpoint(cfg)
    frames = cfg.get("stability.frames")
    crop = model.norm_n or cfg.get("train.crop")
    stream = _open_stream(cfg, frames, crop)
    inject = cfg.get("stability.inject_failures")
    subject = model
    if inject:
        subject = FailureInjector(model, [int(v) for v in inject.split(",") if v.strip()])
    noise = NoiseSpec.from_8bit(cfg.get("stability.sigma"), seed=cfg.get("run.seed"))
    report = stability_harness(subject, stream, noise=noise,
                               psnr_fail=cfg.get("stability.psnr_fail"),
                               max_frames=frames,
                               trace_decimate=cfg.get("stability.decimate"))
    report.to_json(os.path.join(out, "stability_report.json"))
    _write_csv(os.path.join(out, "psnr_trace.csv"),
               [("frame", "psnr")] + [(f, f"{p:.4f}") for f, p in report.psnr_trace])
    write_resolved(cfg, os.path.join(out, "resolved.cfg"))
    d = report.summary()
    print(f"onsets: {len(report.onsets)}  d1={d['d1']} d9={d['d9']} over {report.frames} frames")
    return 2 if report.onsets else 0


def cmd_spectrum(cfg):
    out = _outdir(cfg)
    model = _require_checkpoint(cfg)
    n = cfg.get("spectrum.size")
    rows = [("layer_index", "rank_index", "sigma")]
    summary = [("layer_index", "name", "sigma1", "frobenius", "srank")]
    spectra = []
    for li, layer in enumerate(model.layers):
        kern = layer.frozen_kernel if layer.frozen_kernel is not None else layer.kernel.data
        spec = fft_exact_spectrum(kern, n)
        spectra.append(spec.sigma)
        for ri, s in enumerate(spec.sigma):
            rows.append((li, ri, f"{s:.8g}"))
        summary.append((li, layer.name, f"{spec.sigma1:.8g}", f"{spec.frobenius:.8g}",
                        f"{stable_rank(spec):.8g}"))
    _write_csv(os.path.join(out, "spectra.csv"), rows)
    _write_csv(os.path.join(out, "spectra_summary.csv"), summary)
    # sorted spectra averaged pointwise across layers (the model-level panel)
    min_len = min(len(s) for s in spectra)
    avg = np.mean([s[:min_len] for s in spectra], axis=0)
    _write_csv(os.path.join(out, "spectrum_average.csv"),
               [("rank_index", "sigma")] + [(i, f"{s:.8g}") for i, s in enumerate(avg)])
    write_resolved(cfg, os.path.join(out, "resolved.cfg"))
    print(f"wrote spectra for {len(model.layers)} layers at n={n} -> {out}/spectra.csv")
    return 0


def cmd_probe(cfg):
    out = _outdir(cfg)
    seeds = list(range(cfg.get("probe.seeds")))
    threads = max(1, cfg.get("run.threads"))
    kwargs = dict(
        T_frames=cfg.get("probe.frames"), n=cfg.get("probe.size"),
        channels=cfg.get("probe.channels"), depth=cfg.get("probe.depth"),
        in_channels=cfg.get("arch.in_channels"), sigma_init=cfg.get("probe.sigma_init"),
        rescale_sigma1=cfg.get("probe.rescale_sigma1"),
    )
    if threads == 1:
        results = divergence_probe(seeds=seeds, **kwargs)
    else:
        # fan out seeds across workers; merge deterministically by seed index
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda s: divergence_probe(seeds=[s], **kwargs), seeds))
        results = {rec: [p[rec][0] for p in parts] for rec in parts[0]}
    _write_csv(os.path.join(out, "probe_traces.csv"),
               [("architecture", "seed", "frame", "output_norm")] + probe_csv_rows(results))
    summary = {rec: {
        "divergent": sum(t.classification == "divergent" for t in trs),
        "bounded": sum(t.classification == "bounded" for t in trs),
        "intermediate": sum(t.classification == "intermediate" for t in trs),
    } for rec, trs in results.items()}
    with open(os.path.join(out, "probe_summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    write_resolved(cfg, os.path.join(out, "resolved.cfg"))
    for rec, counts in summary.items():
        print(f"{rec:14s} bounded={counts['bounded']} divergent={counts['divergent']} "
              f"intermediate={counts['intermediate']}")
    return 0


def cmd_normcheck(cfg):
    out = _outdir(cfg)
    model = _require_checkpoint(cfg)
    n = model.norm_n or cfg.get("spectrum.size")
    rows = [("name", "sigma1", "srank")]
    print(f"{'layer':10s} {'sigma1':>10s} {'srank':>10s}")
    for layer in model.layers:
        kern = layer.frozen_kernel if layer.frozen_kernel is not None else layer.kernel.data
        spec = fft_exact_spectrum(kern, n)
        srank = stable_rank(spec)
        rows.append((layer.name, f"{spec.sigma1:.6g}", f"{srank:.6g}"))
        print(f"{layer.name:10s} {spec.sigma1:10.4f} {srank:10.2f}")
    bound = lipschitz_upper_bound(model, n=n)
    rows.append(("recurrent_path_bound", f"{bound.bound:.6g}",
                 "residual_adjusted" if bound.residual_adjusted else ""))
    print(f"recurrent-path bound: {bound.bound:.6g}"
          + (" (residual blocks bounded by 1 + s1*s1)" if bound.residual_adjusted else "")
          + ("" if bound.per_layer else " (no recurrent path)"))
    _write_csv(os.path.join(out, "normcheck.csv"), rows)
    write_resolved(cfg, os.path.join(out, "resolved.cfg"))
    return 0


def cmd_gendata(cfg):
    out = _outdir(cfg)
    stills_dir = os.path.join(out, "stills")
    paths = write_test_stills(stills_dir, count=cfg.get("gendata.stills"),
                              size=cfg.get("gendata.size"), seed=cfg.get("run.seed"),
                              channels=cfg.get("arch.in_channels"))
    msg = f"wrote {len(paths)} stills -> {stills_dir}"
    frames = cfg.get("gendata.frames")
    if frames:
        still = read_image(paths[0])
        src = SyntheticMotionSource(still, frames, cfg.get("gendata.crop"),
                                    seed=cfg.get("run.seed"),
                                    v_max=cfg.get("data.v_max"), vel_std=cfg.get("data.vel_std"))
        seq_path = save_sequence_rvpt(os.path.join(out, "sequence.rvpt"), src.frames())
        msg += f"; {frames}-frame motion sequence -> {seq_path}"
    write_resolved(cfg, os.path.join(out, "resolved.cfg"))
    print(msg)
    return 0


PRESETS = {
    # small grayscale long-sequence protocol: tiny backbone, 32x32 crops, sigma=20
    "appendix-c": {
        "arch.backbone": "tiny_vdncnn", "arch.recurrence": "feature",
        "arch.in_channels": 1, "train.crop": 32, "train.sigma": 20.0,
    },
}

COMMANDS = {
    "train": cmd_train,
    "strf": cmd_strf,
    "stability": cmd_stability,
    "spectrum": cmd_spectrum,
    "probe": cmd_probe,
    "normcheck": cmd_normcheck,
    "gendata": cmd_gendata,
}

_FLAG_KEYS = {
    "seed": "run.seed", "out": "run.out", "threads": "run.threads",
    "checkpoint": "io.checkpoint", "stream": "io.stream",
    "frames": "train.frames", "steps": "train.steps",
    "inject_failures": "stability.inject_failures",
}


def build_parser():
    p = argparse.ArgumentParser(prog="recurstab",
                                description="stability lab for recurrent video processors")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="run configuration file")
        sp.add_argument("--preset", choices=sorted(PRESETS), help="named protocol preset")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--threads", type=int)
        sp.add_argument("--checkpoint")
        sp.add_argument("--stream")
        sp.add_argument("--frames", type=int)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--inject-failures", dest="inject_failures")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.preset:
            cfg.update(PRESETS[args.preset].items())
        for name, key in _FLAG_KEYS.items():
            value = getattr(args, name, None)
            if value is not None:
                cfg.set(key, value)
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            key, _, raw = item.partition("=")
            cfg.set(key.strip(), raw.strip())
        return COMMANDS[args.command](cfg)
    except (CliError, ConfigError, DataError, ModelError, NormalizationError,
            SpectralError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
