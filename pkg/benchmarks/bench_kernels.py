"""Compare the compiled and pure-Python kernel backends.

    python benchmarks/bench_kernels.py [--repeat N] [--width W --height H]

Times QOI-16 encode/decode of a densified depth frame and a two-unit
fuse_render into a virtual view at the same raster size.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from telestage import kernels
from telestage.capture import default_scene, ring_rig, render_ground_truth, sample_unit
from telestage.codec import qoi16_decode, qoi16_encode
from telestage.densify import Densifier
from telestage.pipeline import PipelineConfig, default_virtual_camera
from telestage.render import BiasConfig, fuse_render

NAMES = ("qoi16_encode_chunks", "qoi16_decode_chunks", "splat_unit")


def workload(width: int, height: int):
    cfg = PipelineConfig(width=width, height=height)
    cals = ring_rig(2, width, height)
    scene = default_scene(0)
    frames = []
    for cal in cals:
        dens = Densifier()
        for seq in range(3):
            gt = render_ground_truth(scene, cal, seq / 30, seq=seq).replace(unit_id=cal.unit_id)
            out = dens.process(sample_unit(gt, None, 0.01, 0.5, seed=seq))
        frames.append(out)
    return frames, cals, default_virtual_camera(cfg)


def use_backend(name: str):
    impl = kernels.BACKENDS[name]
    for n in NAMES:
        setattr(kernels, n, getattr(impl, n))


def best_ms(fn, repeat: int) -> float:
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1000


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--width", type=int, default=320)
    ap.add_argument("--height", type=int, default=240)
    args = ap.parse_args(argv)

    frames, cals, cam = workload(args.width, args.height)
    depth = frames[0].depth
    blob = qoi16_encode(depth)
    bias = BiasConfig(0.05)
    cases = {
        "qoi16 encode": lambda: qoi16_encode(depth),
        "qoi16 decode": lambda: qoi16_decode(blob),
        "fuse_render (2 units)": lambda: fuse_render(frames, cals, cam, bias),
    }
    results = {}
    saved = {n: getattr(kernels, n) for n in NAMES}
    try:
        for backend in sorted(kernels.BACKENDS):
            use_backend(backend)
            results[backend] = {k: best_ms(fn, args.repeat) for k, fn in cases.items()}
    finally:
        for n, f in saved.items():
            setattr(kernels, n, f)

    backends = sorted(results)
    print(f"raster {args.width}x{args.height}, {int(np.count_nonzero(depth))} valid depth px, "
          f"best of {args.repeat} (ms)")
    header = f"{'kernel':<24}" + "".join(f"{b:>12}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for k in cases:
        row = f"{k:<24}" + "".join(f"{results[b][k]:12.2f}" for b in backends)
        if len(backends) == 2:
            row += f"{results['python'][k] / results['compiled'][k]:9.1f}x"
        print(row)
    if "compiled" not in results:
        print("compiled backend not built; only the fallback was timed")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
