"""Random-init divergence probe: feedforward wirings are safe, feedback loops blow up.

Six temporal wirings over the same conv backbone, Gaussian(0.1)-initialized,
fed 50 frames of uniform random input. The three feedforward variants
(single-frame, multi-frame window, feature-shifting) keep output norms flat.
At this channel width the three feedback variants (frame-, feature-recurrence
and RLSP) amplify their own state and diverge within a few dozen frames.
"""

import numpy as np

from recurstab import divergence_probe

CHANNELS = 48   # wide enough that the random feedback loop gain exceeds 1

results = divergence_probe(seeds=range(8), T_frames=50, n=16,
                           channels=CHANNELS, depth=5, sigma_init=0.1)

print(f"Gaussian(0.1) init, {CHANNELS} channels, depth 5, 50 frames, 8 seeds\n")
print(f"{'wiring':15s} {'bounded':>8s} {'divergent':>10s}  median growth ||y_50||/||y_1||")
for rec, traces in results.items():
    growths = np.array([t.growth for t in traces])
    bounded = sum(t.classification == "bounded" for t in traces)
    divergent = sum(t.classification == "divergent" for t in traces)
    med = np.median(growths)
    print(f"{rec:15s} {bounded:8d} {divergent:10d}  {med:.3e}")

print("\nper-frame norms for one feature-recurrent seed:")
trace = results["feature"][0]
for t in range(0, 50, 7):
    print(f"  frame {t:2d}: ||y|| = {trace.norms[t]:.4e}")
