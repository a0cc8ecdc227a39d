"""Timing comparison of the kernel backends.

Runs each kernel on shapes representative of the training hot loop (small
per-user attention blocks, layer norms, the sparse propagation matmul, and
Adam updates), then a short end-to-end training run per backend.

Usage: python benchmarks/bench_kernels.py [--train-epochs N]
"""

import argparse
import time

import numpy as np
import scipy.sparse as sp

from bundlegen import data as bgdata
from bundlegen import kernels
from bundlegen import training as bgtrain

rng = np.random.default_rng(0)


def timeit(fn, repeat):
    fn()  # warm up
    start = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - start) / repeat


def bench_attention(repeat=2000):
    q = rng.normal(size=(2, 12, 16))
    k = rng.normal(size=(2, 20, 16))
    v = rng.normal(size=(2, 20, 16))
    g = rng.normal(size=(2, 12, 16))

    def run():
        out, w = kernels.attention_forward(q, k, v, True)
        kernels.attention_backward(g, q, k, v, w, True)

    return timeit(run, repeat)


def bench_layer_norm(repeat=5000):
    x = rng.normal(size=(20, 32))
    gain = np.ones(32)
    bias = np.zeros(32)
    g = rng.normal(size=(20, 32))

    def run():
        y, mean, rstd = kernels.layer_norm_forward(x, gain, bias, 1e-5)
        kernels.layer_norm_backward(g, x, gain, mean, rstd)

    return timeit(run, repeat)


def bench_csr_matmul(repeat=2000):
    A = sp.random(500, 500, density=0.05, random_state=1, format="csr")
    X = rng.normal(size=(500, 32))

    def run():
        kernels.csr_matmul(A.indptr, A.indices, A.data, 500, X)

    return timeit(run, repeat)


def bench_adam(repeat=2000):
    p = rng.normal(size=50_000)
    g = rng.normal(size=50_000)
    m = np.zeros_like(p)
    v = np.zeros_like(p)

    def run():
        kernels.adam_step(p, g, m, v, 10, 1e-3, 0.9, 0.999, 1e-8)

    return timeit(run, repeat)


def bench_train(epochs):
    cfg_ds = bgdata.SyntheticConfig(60, 120, 40, 4, 0.1, (3, 6), (2, 4), seed=3)
    split = bgdata.split(bgdata.generate_synthetic(cfg_ds), seed=3)
    cfg = bgtrain.TrainConfig(
        epochs=epochs, seed=0, patience=0, embed_dim=16, d_model=32,
        max_len=20, k_range=(2, 6), batch_users=8,
    )
    start = time.perf_counter()
    bgtrain.train(split, cfg)
    return (time.perf_counter() - start) / epochs


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--train-epochs", type=int, default=5)
    args = parser.parse_args()

    benches = {
        "attention fwd+bwd (2h,12x20x16)": bench_attention,
        "layer_norm fwd+bwd (20x32)": bench_layer_norm,
        "csr_matmul (500x500 @ 5% x 32)": bench_csr_matmul,
        "adam_step (50k params)": bench_adam,
    }
    backends = kernels.available_backends()
    results = {}
    for backend in backends:
        kernels.use_backend(backend)
        results[backend] = {name: fn() for name, fn in benches.items()}
        results[backend]["train epoch (60 users)"] = bench_train(args.train_epochs)

    width = max(len(n) for n in list(benches) + ["train epoch (60 users)"])
    header = f"{'kernel':<{width}}" + "".join(f"{b:>14}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for name in list(benches) + ["train epoch (60 users)"]:
        row = f"{name:<{width}}"
        for backend in backends:
            row += f"{results[backend][name] * 1e6:>12.1f}us"
        if len(backends) == 2:
            ratio = results["python"][name] / results["compiled"][name]
            row += f"{ratio:>9.2f}x"
        print(row)


if __name__ == "__main__":
    main()
