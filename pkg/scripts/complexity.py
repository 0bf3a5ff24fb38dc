"""Update cost vs block size, plus the memory snapshot size bound.

    python scripts/complexity.py --scales 1 2 4 8
"""

import argparse
import tempfile
from pathlib import Path

from giram.bench import snapshot_within_bound, update_scaling
from giram.synth import SynthSpec


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--scales", type=int, nargs="+", default=[1, 2, 4])
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--users", type=int, default=100)
    args = ap.parse_args()

    r = update_scaling(tuple(args.scales), args.repeats, SynthSpec(n_users=args.users, n_pois=120))
    print(f"{'trajectories':>12} {'seconds':>9} {'per traj (ms)':>14}")
    for n, s in zip(r.n_trajectories, r.seconds):
        print(f"{n:>12} {s:>9.3f} {1000 * s / n:>14.3f}")
    print(f"fit: {r.slope * 1000:.3f} ms/trajectory + {r.intercept:.3f}s, R^2 = {r.r2:.4f}")
    with tempfile.TemporaryDirectory() as tmp:
        size, allowed = snapshot_within_bound(r.memory, Path(tmp) / "m.npz", d_k=64)
    print(f"snapshot of the last memory: {size} bytes, bound {allowed} bytes")


if __name__ == "__main__":
    main()
