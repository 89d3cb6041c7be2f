"""Time the fused potential kernel under both backends.

    python3 benchmarks/bench_kernels.py [--batch 100 500 2000] [--repeat 20]

Reports the median wall time of one forward pass and of forward plus VJP,
then one full training step (loss and gradient through rk4) per backend.
BLAS is pinned to a single thread so the numbers compare the kernels,
not the thread pool.
"""

import argparse
import statistics
import time

import numpy as np
from threadpoolctl import threadpool_limits

from grassflow import datasets as ds
from grassflow import field as F
from grassflow import kernels
from grassflow import trainer as tr
from grassflow.prior import GrassmannGaussianPrior

CASES = {
    "texture Gr(1,3)": (F.TEXTURE_WIDTHS, 2),
    "dw4 Gr(2,4)": (F.DW4_WIDTHS, 4),
}


def make_inputs(widths, B, d, seed=0):
    rng = np.random.default_rng(seed)
    layers = []
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        layers.append((
            rng.uniform(-1, 1, (n_out, n_in)) / np.sqrt(n_in),
            rng.uniform(-1, 1, n_out),
            rng.uniform(-1, 1, n_out),
            rng.uniform(-1, 1, n_out),
            rng.uniform(-1, 1, n_out),
        ))
    z = rng.standard_normal((B, widths[0]))
    zd = rng.standard_normal((B, d, widths[0]))
    t = rng.uniform(0, 1, B)
    bars = (rng.standard_normal(B), rng.standard_normal((B, widths[0])), rng.standard_normal((B, d, d)))
    return layers, z, zd, t, bars


def median_ms(fn, repeat):
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return 1e3 * statistics.median(times)


def bench_kernel(name, widths, d, B, repeat):
    layers, z, zd, t, (vbar, gbar, Qbar) = make_inputs(widths, B, d)
    row = {}
    for backend in kernels.available_backends():
        mod = kernels.get_module(backend)

        def fwd():
            mod.bundle_forward(layers, z, zd, t, False)

        def both():
            *_, cache = mod.bundle_forward(layers, z, zd, t, True)
            mod.bundle_vjp(cache, vbar, gbar, Qbar)

        row[backend] = (median_ms(fwd, repeat), median_ms(both, repeat))
    return row


def bench_step(B, repeat):
    prior = GrassmannGaussianPrior.isotropic(np.eye(3)[:, :1], 0.09)
    params = F.init((3, 1), F.TEXTURE_WIDTHS, seed=0)
    batch = ds.texture_points("2spirals", B, np.random.default_rng(0))
    out = {}
    for backend in kernels.available_backends():
        kernels.use_backend(backend)
        out[backend] = median_ms(lambda: tr.loss_and_grad(params, prior, batch, 0.2), max(1, repeat // 5))
    kernels.use_backend(kernels.available_backends()[-1])
    return out


def fmt(row, key):
    py = row["python"][key] if isinstance(row["python"], tuple) else row["python"]
    if "compiled" not in row:
        return f"{py:9.2f}        n/a"
    c = row["compiled"][key] if isinstance(row["compiled"], tuple) else row["compiled"]
    return f"{py:9.2f} {c:9.2f} {py / c:6.2f}x"


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--batch", type=int, nargs="+", default=[100, 500, 2000])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)

    print(f"backends: {', '.join(kernels.available_backends())}")
    print(f"{'case':<18}{'B':>6}  {'stage':<12}{'python ms':>9} {'compiled':>9} {'speedup':>7}")
    with threadpool_limits(limits=1):
        for name, (widths, d) in CASES.items():
            for B in args.batch:
                row = bench_kernel(name, widths, d, B, args.repeat)
                print(f"{name:<18}{B:>6}  {'forward':<12}{fmt(row, 0)}")
                print(f"{'':<18}{'':>6}  {'fwd+vjp':<12}{fmt(row, 1)}")
        for B in args.batch:
            row = bench_step(B, args.repeat)
            print(f"{'train step':<18}{B:>6}  {'rk4 dt 0.2':<12}{fmt(row, 0)}")


if __name__ == "__main__":
    main()
