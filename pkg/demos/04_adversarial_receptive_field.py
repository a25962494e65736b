"""Adversarial spatio-temporal receptive fields as a stability diagnostic.

Gradient ascent on the input sequence, maximizing the center pixel of the
middle output frame: whichever input frames the optimizer ends up touching
are the frames the model can still "see" from that output. For a contractive
model the influence dies out a few frames back and the outputs stay tame; for
an unstable model the influence reaches all the way to the start of the
sequence and the output sequence diverges after the target frame.
"""

import numpy as np

from recurstab import ArchitectureSpec, NormalizerConfig, build, strf_search

N = 16

print("=== contractive model (every layer normalized to sigma1 = 0.5) ===")
spec = ArchitectureSpec(backbone="vdncnn", recurrence="feature", channels=8,
                        depth=5, in_channels=1)
stable = build(spec, seed=0, init="he",
               norm=NormalizerConfig(scheme="srnl", alpha=0.5), norm_n=N)
stable.freeze(N)
rep = strf_search(stable, loss_kind="center_pixel", tau=40, n=N, iters=100,
                  seed=0, restarts=2)
print(f"verdict: {rep.verdict}; influential frames at/before t=0: {rep.temporal_extent}; "
      f"outputs diverged: {rep.diverged}")
print("influence profile (every 5 frames, t = -40 .. 0):")
print("  " + " ".join(f"{v:.1e}" for v in rep.influence[:41:5]))

print("\n=== unstable model (wide random init, no constraint) ===")
spec = ArchitectureSpec(backbone="vdncnn", recurrence="feature", channels=48,
                        depth=5, in_channels=1)
unstable = build(spec, seed=1, init="gaussian", sigma_init=0.1)
unstable.freeze(N)
rep = strf_search(unstable, loss_kind="center_pixel", tau=40, n=N, iters=30,
                  seed=0, restarts=1)
print(f"verdict: {rep.verdict}; influential frames at/before t=0: {rep.temporal_extent}; "
      f"outputs diverged: {rep.diverged}")
norms = [float(np.linalg.norm(y.astype(np.float64))) for y in rep.Y]
print("output norms after the target frame (t = 0, +10, ..., +40):")
print("  " + " ".join(f"{norms[40 + t]:.2e}" for t in range(0, 41, 10)))
