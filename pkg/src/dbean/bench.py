"""Timing helpers: forward-time scaling in T and compiled-vs-numpy kernels.

Run ``python -m dbean.bench`` for a side-by-side table of both scan backends.
"""

from __future__ import annotations

import argparse
import json
import statistics
import time

import numpy as np

from . import kernels
from .model import ModelParams, backward_batch, forward_batch, make_batch
from .text import pad_truncate


def _random_example(T, vocab_size, rng, label=0):
    return pad_truncate(rng.integers(2, vocab_size, size=T).tolist(), label, max_len=T)


def _time(fn, trials):
    out = []
    for _ in range(trials):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return out


def scaling_ratio(t_small: int = 256, t_large: int = 512, hidden: int = 128, trials: int = 100,
                  embed_dim: int = 300, vocab_size: int = 1000, seed: int = 0, backend=None) -> dict:
    """Median single-sequence forward time at two lengths and their ratio.

    Trials alternate between the two lengths so slow drift hits both equally.
    """
    rng = np.random.default_rng(seed)
    params = ModelParams.init(vocab_size, embed_dim=embed_dim, hidden=hidden, seed=seed)
    batches = {T: make_batch([_random_example(T, vocab_size, rng)]) for T in (t_small, t_large)}
    times = {t_small: [], t_large: []}
    for T, b in batches.items():
        forward_batch(params, b, with_ssl=False, backend=backend)    # warm-up
    for _ in range(trials):
        for T, b in batches.items():
            t0 = time.perf_counter()
            forward_batch(params, b, with_ssl=False, backend=backend)
            times[T].append(time.perf_counter() - t0)
    med = {T: statistics.median(v) for T, v in times.items()}
    return {
        "t_small": t_small, "t_large": t_large, "hidden": hidden, "trials": trials,
        "median_small_s": med[t_small], "median_large_s": med[t_large],
        "ratio": med[t_large] / med[t_small],
        "backend": backend or kernels.BACKEND,
    }


def kernel_table(shapes=((1, 256, 128), (8, 128, 128), (32, 256, 128)), trials: int = 30,
                 dtype=np.float32, seed: int = 0) -> list[dict]:
    """Median scan forward+backward time for every available backend."""
    rng = np.random.default_rng(seed)
    rows = []
    for B, T, H in shapes:
        pre = rng.standard_normal((T, B, H)).astype(dtype)
        w = (rng.standard_normal((H, H)) / np.sqrt(H)).astype(dtype)
        g = rng.standard_normal((T, B, H)).astype(dtype)
        row = {"B": B, "T": T, "H": H}
        for be in kernels.available_backends():
            def step():
                states = kernels.scan_forward(pre, w, backend=be)
                kernels.scan_backward(states, g, w, backend=be)
            step()
            row[f"{be}_ms"] = 1e3 * statistics.median(_time(step, trials))
        rows.append(row)
    return rows


def model_table(batch_sizes=(1, 8, 32), T: int = 128, hidden: int = 128, trials: int = 10,
                seed: int = 0) -> list[dict]:
    """Median full-model forward+backward time per batch for every backend."""
    rng = np.random.default_rng(seed)
    params = ModelParams.init(1000, hidden=hidden, seed=seed)
    rows = []
    for B in batch_sizes:
        batch = make_batch([_random_example(T, 1000, rng, label=i % 4) for i in range(B)])
        row = {"B": B, "T": T, "H": hidden}
        for be in kernels.available_backends():
            def step():
                tr = forward_batch(params, batch, backend=be)
                backward_batch(params, tr, ssl_weight=0.1, backend=be)
            step()
            row[f"{be}_ms"] = 1e3 * statistics.median(_time(step, trials))
        rows.append(row)
    return rows


def _print_table(title, rows):
    print(title)
    backends = kernels.available_backends()
    print("  " + "  ".join(f"{c:>9}" for c in ["B", "T", "H"] + [f"{b} ms" for b in backends]))
    for r in rows:
        cells = [f"{r[c]:>9d}" for c in ("B", "T", "H")] + [f"{r[f'{b}_ms']:>9.3f}" for b in backends]
        print("  " + "  ".join(cells))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python -m dbean.bench", description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=30)
    ap.add_argument("--json", action="store_true", help="print raw rows as JSON")
    args = ap.parse_args(argv)
    kt = kernel_table(trials=args.trials)
    mt = model_table(trials=max(3, args.trials // 3))
    if args.json:
        print(json.dumps({"kernels": kt, "model": mt}, indent=2))
    else:
        print(f"default backend: {kernels.BACKEND}")
        _print_table("scan forward+backward (float32)", kt)
        _print_table("model forward+backward per batch", mt)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
