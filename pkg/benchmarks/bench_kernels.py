"""Time every hot kernel under the numba and pure-numpy implementations.

    python benchmarks/bench_kernels.py [--repeat 20] [--dtype float32]

Prints one row per kernel with the median wall time of each backend and the
speed-up, plus the max abs difference between the two outputs. A final section
times one full forward+backward step of the default model under whichever
backend ``TCAE_NUMBA`` selects.
"""

import argparse
import statistics
import time

import numpy as np

import tcae._kernels.numba_impl as numba_impl
from tcae._kernels import numpy_impl


def _time(fn, repeat):
    fn()  # warm-up / JIT compile
    ts = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t)
    return statistics.median(ts)


def cases(dtype):
    rng = np.random.default_rng(0)
    big = rng.standard_normal((16, 256, 256)).astype(dtype)
    rows = rng.standard_normal((16 * 256, 64)).astype(dtype)
    sm = rng.standard_normal((16 * 4 * 256, 256)).astype(dtype)
    img = rng.standard_normal((16, 64, 16, 16)).astype(dtype)
    pic = rng.standard_normal((3, 32, 32)).astype(dtype)
    xhat, rstd = numpy_impl.layernorm_fwd(rows, 1e-6)
    y = numpy_impl.softmax_fwd(sm)
    cols = numpy_impl.im2col(img, 3, 1, 1)
    return {
        "gelu_fwd": lambda m: m.gelu_fwd(big),
        "gelu_bwd": lambda m: m.gelu_bwd(big, big),
        "layernorm_fwd": lambda m: m.layernorm_fwd(rows, 1e-6)[0],
        "layernorm_bwd": lambda m: m.layernorm_bwd(rows, xhat, rstd),
        "softmax_fwd": lambda m: m.softmax_fwd(sm),
        "softmax_bwd": lambda m: m.softmax_bwd(y, sm),
        "im2col": lambda m: m.im2col(img, 3, 1, 1),
        "col2im": lambda m: m.col2im(cols, img.shape, 3, 1, 1),
        "bilinear_sample": lambda m: m.bilinear_sample(pic, 3.2, 1.7, 20.5, 24.0, 32, 32),
    }


def model_step(repeat):
    from tcae import tensor as T
    from tcae._kernels import BACKEND_NAME
    from tcae.model import TCAEConfig, TCAEModel

    model = TCAEModel(TCAEConfig(), seed=0)
    x = T.Tensor(np.random.default_rng(1).uniform(-1, 1, (16, 3, 32, 32)).astype(np.float32))

    def step():
        z, _ = model.encode(x)
        loss = T.mean(T.absolute(model.decode(z) - x))
        T.backward(loss)

    return BACKEND_NAME, _time(step, max(repeat // 4, 2))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    ap.add_argument("--skip-model", action="store_true")
    args = ap.parse_args()
    dtype = np.dtype(args.dtype)

    print(f"{'kernel':<16} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'max|diff|':>10}")
    for name, fn in cases(dtype).items():
        t_np = _time(lambda: fn(numpy_impl), args.repeat)
        t_nb = _time(lambda: fn(numba_impl), args.repeat)
        diff = float(np.max(np.abs(fn(numpy_impl) - fn(numba_impl))))
        print(f"{name:<16} {t_np * 1e3:>10.3f} {t_nb * 1e3:>10.3f} {t_np / t_nb:>8.2f} "
              f"{diff:>10.2e}")

    if not args.skip_model:
        backend, t = model_step(args.repeat)
        print(f"\nfull fwd+bwd step, default config, batch 16 [{backend}]: {t * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
