"""Time the compiled and pure-Python render kernels on random scenes.

    python benchmarks/bench_render.py --sizes 32 64 128 --repeat 5
"""

import argparse
import timeit

import numpy as np

from dfddps.forward import RgbdState, available_backends, render, render_vjp
from dfddps.optics import desk_camera, synthetic_coded_psf


def random_scene(n, seed):
    rng = np.random.default_rng(seed)
    return RgbdState(rng.random((n, n, 3)), 2.1 + 1.8 * rng.random((n, n)))


def best_time(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", type=int, nargs="+", default=[32, 64, 128])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)

    camera, psf = desk_camera(), synthetic_coded_psf()
    backends = available_backends()
    print(f"backends: {', '.join(backends)}")
    print(f"{'size':>6} {'op':>7} " + " ".join(f"{b:>10}" for b in backends) + "   speedup")
    for n in args.sizes:
        x = random_scene(n, n)
        cot = np.random.default_rng(n + 1).standard_normal((n, n, 3))
        for op, fn in (("render", lambda b: render(x, camera, psf, backend=b)),
                       ("vjp", lambda b: render_vjp(x, cot, camera, psf, backend=b))):
            times = {b: best_time(lambda: fn(b), args.repeat) for b in backends}
            speed = times["python"] / times["ext"] if {"ext", "python"} <= set(times) else float("nan")
            print(f"{n:>6} {op:>7} " + " ".join(f"{times[b] * 1e3:>8.1f}ms" for b in backends)
                  + f"   {speed:6.1f}x")


if __name__ == "__main__":
    main()
