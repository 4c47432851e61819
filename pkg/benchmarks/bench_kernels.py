"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Reports the best-of-N wall time per call for each kernel and for a full
model step, plus the speed ratio. Both backends must produce identical
output; the script checks that before timing.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from eqspike import kernels
from eqspike.model import ModelConfig, embed, init_params, init_state, model_step


def cases(rng):
    s = (rng.random((64 * 16, 64)) < 0.3).astype(float)
    w = rng.normal(size=(64, 128))
    q = rng.normal(size=(32, 16, 32))
    sk = (rng.random((32, 16, 32)) < 0.3).astype(float)
    wts = rng.random((32, 16, 16))
    u = np.zeros(64 * 16 * 64)
    cur = rng.normal(0.5, 0.5, size=u.shape)
    num = np.zeros_like(u)

    cfg = ModelConfig(vocab_size=16, seq_len=16, d_emb=32, d_intermediate=64, n_encoders=2, n_heads=2,
                      init_std=0.5)
    params = init_params(cfg, rng)
    tokens = rng.integers(0, 16, size=(8, 16))
    y = embed(tokens, params)
    state = init_state(cfg, (8,))

    return {
        "spike_matmul 1024x64 @ 64x128": lambda: kernels.spike_matmul(s, w),
        "real @ spikes^T 32x16x32": lambda: kernels.real_matmul_spike_t(q, sk),
        "real @ spikes 32x16x16": lambda: kernels.real_matmul_spike(wts, sk),
        "lif_update 65536 neurons": lambda: kernels.lif_update(u, cur, num, 0.99, 1.0),
        "model_step batch 8, 2 encoders": lambda: model_step(params, state, y),
    }


def check_identical(rng_seed: int = 0) -> None:
    out = {}
    for name in ("python", "cython"):
        kernels.use_backend(name)
        rng = np.random.default_rng(rng_seed)
        s = (rng.random((50, 20)) < 0.4).astype(float)
        w = rng.normal(size=(20, 30))
        out[name] = kernels.spike_matmul(s, w)
    if out["python"].tobytes() != out["cython"].tobytes():
        raise SystemExit("backends disagree")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    try:
        kernels.use_backend("cython")
    except ImportError:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    check_identical()

    times = {}
    for name in ("python", "cython"):
        kernels.use_backend(name)
        for label, fn in cases(np.random.default_rng(1)).items():
            number = 3
            best = min(timeit.repeat(fn, number=number, repeat=args.repeat)) / number
            times.setdefault(label, {})[name] = best

    width = max(map(len, times))
    print(f"{'kernel':<{width}}  {'python ms':>10}  {'cython ms':>10}  {'speedup':>8}")
    for label, t in times.items():
        print(f"{label:<{width}}  {t['python'] * 1e3:>10.3f}  {t['cython'] * 1e3:>10.3f}  "
              f"{t['python'] / t['cython']:>7.1f}x")


if __name__ == "__main__":
    main()
