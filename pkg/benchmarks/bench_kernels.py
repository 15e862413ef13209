"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py --size 128x128 --superpixels 400

Each kernel runs once to compile, then the best of ``--repeat`` timings is
reported. ``--epochs N`` also times N training epochs end to end under each
backend, in a subprocess per backend since the choice is made at import.
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numba
import numpy as np

from spixel_ssc import kernels
from spixel_ssc.superpixel import DEFAULT_G, grid_cells, pixel_coords

EPOCH_SCRIPT = """
import sys, time
from spixel_ssc.data import SynthSpec, make_synthetic, standardize
from spixel_ssc.train import TrainConfig, train
h, w, d, M, E = map(int, sys.argv[1:])
X = standardize(make_synthetic(SynthSpec(h, w, d, 4, seed=0))[0]).values
train(X, h, w, M, TrainConfig(epochs=1))
t0 = time.perf_counter()
train(X, h, w, M, TrainConfig(epochs=E))
print(time.perf_counter() - t0)
"""


def instance(h, w, D, M, G, seed=0):
    rng = np.random.default_rng(seed)
    N = h * w
    coords = pixel_coords(h, w, M)
    Xp = rng.standard_normal((N, D))
    cells = grid_cells(h, w, M)
    S = np.stack([Xp[cells == j].mean(axis=0) for j in range(M)])
    rS = np.stack([coords[cells == j].mean(axis=0) for j in range(M)])
    w_ = rng.uniform(0.2, 0.8, M)
    cand = kernels.np_candidates(coords, rS, G)
    spec, spat, probs = kernels.np_assign_forward(Xp, coords, S, rS, w_, cand, 0.1)
    S1, rS1, den = kernels.np_center_forward(Xp, coords, probs, cand, M, 1e-8)
    gS, grS = rng.standard_normal(S1.shape), rng.standard_normal(rS1.shape)
    gP = rng.standard_normal(probs.shape)
    return dict(Xp=Xp, coords=coords, S=S, rS=rS, w=w_, cand=cand, spec=spec, spat=spat, probs=probs,
                S1=S1, rS1=rS1, den=den, gS=gS, grS=grS, gP=gP, M=M, G=G, h=h, wd=w)


def calls(a):
    """Kernel name -> argument tuple."""
    return {
        "candidates": (a["coords"], a["rS"], a["G"]),
        "assign_forward": (a["Xp"], a["coords"], a["S"], a["rS"], a["w"], a["cand"], 0.1),
        "center_forward": (a["Xp"], a["coords"], a["probs"], a["cand"], a["M"], 1e-8),
        "center_backward": (a["Xp"], a["coords"], a["probs"], a["cand"], a["S1"], a["rS1"], a["den"],
                            a["gS"], a["grS"], 1e-8),
        "assign_backward": (a["Xp"], a["coords"], a["S"], a["rS"], a["w"], a["cand"], a["probs"], a["spec"],
                            a["spat"], a["gP"], 0.1),
        "consistency": (a["probs"], a["cand"], a["h"], a["wd"]),
    }


def best_time(fn, args, repeat):
    fn(*args)
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def epoch_time(backend, h, w, D, M, epochs):
    env = dict(os.environ, SPIXEL_SSC_BACKEND=backend)
    out = subprocess.run([sys.executable, "-c", EPOCH_SCRIPT, str(h), str(w), str(D), str(M), str(epochs)],
                         env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size", default="64x64")
    p.add_argument("--bands", type=int, default=20)
    p.add_argument("--superpixels", type=int, default=200)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--epochs", type=int, default=0)
    args = p.parse_args(argv)
    h, w = (int(v) for v in args.size.lower().split("x"))
    G = min(DEFAULT_G, args.superpixels)
    a = instance(h, w, args.bands, args.superpixels, G)

    print(f"{h}x{w}x{args.bands}, M={args.superpixels}, G={G}, "
          f"best of {args.repeat}, {numba.get_num_threads()} numba threads")
    print(f"{'kernel':<18}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, fn_args in calls(a).items():
        t_nb = best_time(getattr(kernels, f"nb_{name}"), fn_args, args.repeat)
        t_np = best_time(getattr(kernels, f"np_{name}"), fn_args, args.repeat)
        print(f"{name:<18}{1e3 * t_nb:>10.2f}{1e3 * t_np:>10.2f}{t_np / t_nb:>8.1f}x")

    if args.epochs:
        t_nb = epoch_time("numba", h, w, args.bands, args.superpixels, args.epochs)
        t_np = epoch_time("numpy", h, w, args.bands, args.superpixels, args.epochs)
        print(f"{args.epochs} training epochs: numba {t_nb:.2f} s, numpy {t_np:.2f} s, "
              f"speedup {t_np / t_nb:.1f}x")


if __name__ == "__main__":
    main()
