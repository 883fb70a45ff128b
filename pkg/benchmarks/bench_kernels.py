"""Time the numba kernels against the pure-numpy fallback.

Runs each hot kernel (softmax, masked softmax, layernorm, GELU, sigmoid,
forward and backward) at attention-shaped sizes, then a small end-to-end
forward/backward step with each backend. Invoke from the repo root:

    python benchmarks/bench_kernels.py [--repeats 50]

The active engine backend for the end-to-end section follows
TOKENHALT_KERNELS, so that part is reported for the current process
backend only; the per-kernel section always times both.
"""

import argparse
import time

import numpy as np

from tokenhalt.kernels import BACKEND, numpy_backend

try:
    from tokenhalt.kernels import numba_backend
except ImportError:
    numba_backend = None


def timeit(fn, repeats):
    fn()  # warmup (and numba compile)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def bench_kernels(repeats):
    r = np.random.Generator(np.random.PCG64(0))
    rows, cols = 16 * 4 * 129, 129          # batched attention scores
    x = r.normal(size=(rows, cols)).astype(np.float32)
    g = r.normal(size=(rows, cols)).astype(np.float32)
    mask = r.uniform(size=(rows, cols)) > 0.3
    mask[:, 0] = True
    ln_x = r.normal(size=(2064, 64)).astype(np.float32)
    gain = np.ones(64, dtype=np.float32)
    bias = np.zeros(64, dtype=np.float32)
    ln_g = r.normal(size=(2064, 64)).astype(np.float32)
    ew = r.normal(size=(2064, 256)).astype(np.float32)

    y = numpy_backend.softmax_fwd(x)
    _, mu, rstd = numpy_backend.layernorm_fwd(ln_x, gain, bias, np.float32(1e-5))

    cases = [
        ("softmax_fwd", lambda b: b.softmax_fwd(x)),
        ("softmax_masked_fwd", lambda b: b.softmax_masked_fwd(x, mask)),
        ("softmax_bwd", lambda b: b.softmax_bwd(y, g)),
        ("layernorm_fwd", lambda b: b.layernorm_fwd(ln_x, gain, bias, np.float32(1e-5))),
        ("layernorm_bwd", lambda b: b.layernorm_bwd(ln_x, gain, mu, rstd, ln_g)),
        ("gelu_fwd", lambda b: b.gelu_fwd(ew)),
        ("gelu_bwd", lambda b: b.gelu_bwd(ew, ew)),
        ("sigmoid_fwd", lambda b: b.sigmoid_fwd(ew)),
    ]
    backends = [("numpy", numpy_backend)]
    if numba_backend is not None:
        backends.append(("numba", numba_backend))
    print(f"{'kernel':<20}" + "".join(f"{name:>12}" for name, _ in backends) + f"{'speedup':>10}")
    for label, call in cases:
        times = [timeit(lambda b=impl: call(b), repeats) for _, impl in backends]
        cells = "".join(f"{t * 1e3:>10.3f}ms" for t in times)
        speed = f"{times[0] / times[-1]:>9.2f}x" if len(times) == 2 else ""
        print(f"{label:<20}{cells}{speed}")


def bench_end_to_end(repeats):
    from tokenhalt import engine as eng
    from tokenhalt.engine import Tape
    from tokenhalt.glimpser import GlimpseConfig
    from tokenhalt.halting import HaltingConfig, ponder_loss
    from tokenhalt.model import Model, ModelConfig
    from tokenhalt.rng import SeededRng
    from tokenhalt.training import task_loss
    from tokenhalt.video import DatasetSpec, synth_dataset

    rng = SeededRng(0)
    spec = DatasetSpec(frames=8, height=32, width=32, per_class=2, square=12, speed=4)
    clips = synth_dataset(spec, rng.child("ds"))
    cfg = ModelConfig(layers=4, dim=64, heads=4, patch=8, frames=8, height=32, width=32)
    m = Model.build(cfg, HaltingConfig(gamma=10, beta=-4, layers=4),
                    GlimpseConfig(0.5), rng=rng.child("i"))

    def step():
        with Tape():
            out = m.forward_clips(clips, mode="mask")
            loss = task_loss(out.logits, [c.label for c in clips]) + ponder_loss(out.state) * 0.01
            eng.backward(loss)

    t = timeit(step, max(3, repeats // 10))
    print(f"\nend-to-end fwd+bwd ({len(clips)} clips, backend={BACKEND}): {t * 1e3:.1f} ms")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=50)
    args = ap.parse_args()
    print(f"engine backend: {BACKEND} (set TOKENHALT_KERNELS to change)\n")
    bench_kernels(args.repeats)
    bench_end_to_end(args.repeats)
