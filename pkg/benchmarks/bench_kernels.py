"""Time the compiled kernels against the NumPy fallback on the tiny-MLP Concrete shapes.

    python benchmarks/bench_kernels.py [--repeat 5] [--hidden 64 64]
"""

import argparse
import time

import numpy as np

from dattr import kernels, modelzoo as mz


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(K, spec, n, batch, n_vec, iters):
    rng = np.random.default_rng(0)
    dims, code = mz.dims_array(spec), mz.loss_code(spec)
    theta = mz.init_params(spec, 0)
    X = rng.normal(size=(n, spec.dims[0]))
    Y = rng.normal(size=(n, 1))
    idx = rng.choice(n, batch, replace=False).astype(np.int64)
    coef = np.full(batch, 1.0 / batch)
    g = np.empty_like(theta)
    G = np.empty((batch, theta.size))
    V = rng.normal(size=(n_vec, theta.size))
    HV = np.empty_like(V)
    sched = np.stack([rng.choice(n, batch, replace=False) for _ in range(iters)]).astype(np.int64)
    lrs = np.full(iters, 0.01)
    w = np.ones(n)

    def loop():
        th, v = theta.copy(), np.zeros_like(theta)
        K.train_loop(dims, code, th, v, X, Y, sched, w, lrs, 1e-5, 0.9, 1.0)

    return {
        f"forward (N={n})": lambda: K.forward(dims, theta, X),
        f"loss_grad (B={batch})": lambda: K.loss_grad(dims, code, theta, X, Y, idx, coef, g),
        f"per_example_grads (B={batch})": lambda: K.per_example_grads(dims, code, theta, X, Y, idx, G),
        f"hvp ({n_vec} vectors, B={batch})": lambda: K.hvp(dims, code, theta, X, Y, idx, coef, V, HV),
        f"train_loop ({iters} steps)": loop,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--hidden", type=int, nargs="+", default=[64, 64])
    ap.add_argument("--n", type=int, default=1020)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--vectors", type=int, default=50)
    ap.add_argument("--iters", type=int, default=580)
    args = ap.parse_args()
    spec = mz.MLPSpec((8, *args.hidden, 1))
    backends = kernels.available_backends()
    if "c" not in backends:
        print("compiled extension not available; timing the NumPy fallback only")
    results = {b: {name: best_of(fn, args.repeat)
                   for name, fn in cases(kernels.load_backend(b), spec, args.n, args.batch, args.vectors,
                                         args.iters).items()}
               for b in backends}
    names = list(results[backends[0]])
    width = max(len(s) for s in names)
    print(f"model {spec.dims}, d_param={mz.n_params(spec)}, best of {args.repeat}")
    print(f"{'kernel':<{width}}  " + "  ".join(f"{b:>10}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name in names:
        row = "  ".join(f"{results[b][name] * 1e3:8.3f}ms" for b in backends)
        if len(backends) > 1:
            row += f"  {results['python'][name] / results['c'][name]:9.1f}x"
        print(f"{name:<{width}}  {row}")


if __name__ == "__main__":
    main()
