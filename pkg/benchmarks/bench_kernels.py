"""Compare the compiled rollout kernel against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py --steps 250 --repeat 20

Reports wall time per rollout for each backend and checks both return the
same floating-point results.
"""
import argparse
import timeit

import numpy as np

from optweave import kernels
from optweave.env import DEFAULT_PARAMS, ClipSpec, generate_clip, reset


def _inputs(steps: int, seed: int):
    clip = generate_clip(ClipSpec(length_steps=steps, dyn_level=0.5, perturb_prob=0.1,
                                  perturb_mag=4.0, seed=seed))
    return clip, reset(clip).as_kernel_state(), DEFAULT_PARAMS.kernel_params()


def run(fn, clip, vec, kp, steps, controller):
    out = np.zeros((steps, 3))
    st = vec.copy()
    res = fn(clip.ref_pos, clip.ref_vel, clip.ref_acc, clip.impulses, 0, 0, steps, controller, st, kp, out)
    return res, st, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--steps", type=int, default=250)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    clip, vec, kp = _inputs(args.steps, args.seed)
    backends = {"python": kernels.simulate_py}
    if kernels.simulate_ext is not None:
        backends["cython"] = kernels.simulate_ext
    else:
        print("compiled kernel unavailable; timing the fallback only")

    results, times = {}, {}
    for name, fn in backends.items():
        results[name] = [run(fn, clip, vec, kp, args.steps, c) for c in (0, 1)]
        t = timeit.repeat(lambda: run(fn, clip, vec, kp, args.steps, 1), number=1, repeat=args.repeat)
        times[name] = min(t)
        print(f"{name:7s} {times[name] * 1e3:9.3f} ms per {args.steps}-step rollout")

    if len(backends) == 2:
        same = all(np.array_equal(a[2], b[2]) and np.array_equal(a[1], b[1]) and a[0] == b[0]
                   for a, b in zip(results["python"], results["cython"]))
        print(f"speedup {times['python'] / times['cython']:.1f}x; outputs identical: {same}")
        return 0 if same else 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
