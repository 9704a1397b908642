"""Print success-rate and error curves of a reduced noise sweep.

    python demos/noise_curves.py --noise-type translation --objects 5 --seeds 4
"""
import argparse

from quadmap import SceneConfig, aggregate, run_sweep
from quadmap.sim import NOISE_TYPES


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--noise-type", choices=NOISE_TYPES, default="bbox")
    ap.add_argument("--objects", type=int, default=5)
    ap.add_argument("--seeds", type=int, default=4)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    cfg = SceneConfig(n_objects=args.objects, n_seeds=args.seeds)
    rows = aggregate(run_sweep(cfg, ["tri+yaw", "tri", "qslam"], [args.noise_type], args.jobs))
    print(f"{'level':>6} {'method':>8} {'success':>8} {'iou2d':>7} {'e_trans':>8} {'e_axe':>7}")
    for r in sorted(rows, key=lambda r: (r.noise_level, r.method)):
        print(f"{r.noise_level:6.2f} {r.method:>8} {r.success_rate:8.2f} {r.iou2d:7.3f} "
              f"{r.e_trans:8.3f} {r.e_axe:7.3f}")


if __name__ == "__main__":
    main()
