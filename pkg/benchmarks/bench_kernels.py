"""Compares the compiled kernel extension against the numpy fallback.

Run:  python benchmarks/bench_kernels.py [--repeats 200]

Times the four hot kernels on shapes matching the two stacked encoder layers
at production size (L=500, d=512) and at the desk-scale test size, plus one
whole forward/backward step through the full encoder under each backend.
"""

import argparse
import importlib
import os
import sys
import time

import numpy as np

from mtca.tensor.kernels import numpy_backend

try:
    from mtca.tensor.kernels import _ckernels
except ImportError:
    _ckernels = None


def bench(fn, repeats):
    fn()  # warm up
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats * 1e6  # microseconds


def kernel_cases(rng):
    cases = []
    for tag, length, channels in (
        ("layer1@prod", 500, 256),
        ("layer2@prod", 250, 128),
        ("layer1@desk", 20, 16),
    ):
        x = rng.normal(size=(length, channels))
        w = rng.normal(size=(3, channels, channels))
        g = rng.normal(size=(length, channels))
        mask = np.ones(length, dtype=np.uint8)
        arg = numpy_backend.maxpool2_forward(x, mask)[1]
        cases.append((f"conv1d_forward   {tag}", lambda b, x=x, w=w: b.conv1d_forward(x, w)))
        cases.append(
            (f"conv1d_backward  {tag}", lambda b, x=x, w=w, g=g: b.conv1d_backward(x, w, g))
        )
        cases.append(
            (f"maxpool2_forward {tag}", lambda b, x=x, m=mask: b.maxpool2_forward(x, m))
        )
        gp = rng.normal(size=((length + 1) // 2, channels))
        cases.append(
            (
                f"maxpool2_backward {tag}",
                lambda b, g=gp, a=arg, n=length: b.maxpool2_backward(g, a, n),
            )
        )
    return cases


def encoder_step_time(backend_name: str, repeats: int) -> float:
    """Full forward+backward step timed in a subprocess pinned to one backend."""
    import subprocess

    code = f"""
import time
import numpy as np
from mtca.encoder import Encoder, EncoderConfig, build_encoded
from mtca.losses import one_hot
from mtca.training import kl_regularized_loss
from mtca import tensor as T

cfg = EncoderConfig(embed_dim=32, max_sentences=20, num_heads=2, top_queries=8, dropout=0.2)
enc = Encoder(cfg, np.random.default_rng(0))
rng = np.random.default_rng(1)
t = build_encoded(rng.normal(size=(20, 32)), cfg)
def step():
    with T.Tape() as tape:
        loss, _ = kl_regularized_loss(enc, t, one_hot(1), 0.3, rng)
    tape.backward(loss)
for _ in range(10):
    step()
start = time.perf_counter()
for _ in range({repeats}):
    step()
print((time.perf_counter() - start) / {repeats} * 1e6)
"""
    env = dict(os.environ, MTCA_BACKEND=backend_name)
    out = subprocess.run(
        [sys.executable, "-c", code], capture_output=True, text=True, env=env, check=True
    )
    return float(out.stdout.strip())


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=200)
    args = parser.parse_args()

    if _ckernels is None:
        print("compiled extension not built; run `pip install -e .` with Cython available")
        return 1

    rng = np.random.default_rng(0)
    print(f"{'kernel':<34}{'python us':>12}{'compiled us':>13}{'speedup':>9}")
    print("-" * 68)
    for name, fn in kernel_cases(rng):
        t_py = bench(lambda: fn(numpy_backend), args.repeats)
        t_c = bench(lambda: fn(_ckernels), args.repeats)
        print(f"{name:<34}{t_py:>12.1f}{t_c:>13.1f}{t_py / t_c:>8.2f}x")

    print()
    reps = max(50, args.repeats)
    t_py = encoder_step_time("python", reps)
    t_c = encoder_step_time("compiled", reps)
    print(f"{'full encoder train step (desk)':<34}{t_py:>12.1f}{t_c:>13.1f}{t_py / t_c:>8.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
