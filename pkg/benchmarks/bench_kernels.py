"""Compare the numba and numpy kernel paths.

    python benchmarks/bench_kernels.py [--repeat N]

Times every fused kernel (forward and backward) at the shapes the WPN sees in
10-way episodes, checks that both paths agree, and finishes with an end-to-end
timing of WPN training steps under each backend.
"""

import argparse
import time

import numpy as np

from mxml import kernels
from mxml.episodes import DomainSpec, make_synthetic_domain
from mxml.learners import TrainConfig, proto_train
from mxml.mixture import EnsembleModel, WpnTrainConfig, train_wpn
from mxml.wpn import WpnParams


def _time(fn, repeat):
    fn()  # warm-up (and JIT compile)
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def kernel_table(repeat):
    rng = np.random.default_rng(0)
    n, d_z, L, d_h = 10, 128, 15, 64
    mu, lv = rng.standard_normal((n, d_z)), 0.3 * rng.standard_normal((n, d_z))
    z = rng.standard_normal((L, d_z))
    q, p = rng.standard_normal((L, d_h)), rng.standard_normal((n, d_h))
    g_nn, g_ln = rng.standard_normal((n, n)), rng.standard_normal((L, n))
    cases = {
        "sqdist": lambda k: k.sqdist(q, p),
        "sqdist_grad": lambda k: k.sqdist_grad(q, p, g_ln),
        "pairwise_kl": lambda k: k.pairwise_kl(mu, lv),
        "pairwise_kl_grad": lambda k: k.pairwise_kl_grad(mu, lv, g_nn),
        "gauss_logpdf": lambda k: k.gauss_logpdf(z, mu, lv),
        "gauss_logpdf_grad": lambda k: k.gauss_logpdf_grad(z, mu, lv, g_ln),
    }
    print(f"{'kernel':<20}{'numpy us':>12}{'numba us':>12}{'speedup':>10}{'max |diff|':>14}")
    for name, fn in cases.items():
        ref, fast = fn(kernels.numpy_kernels), fn(kernels.numba_kernels)
        ref = ref if isinstance(ref, tuple) else (ref,)
        fast = fast if isinstance(fast, tuple) else (fast,)
        diff = max(float(np.max(np.abs(a - b))) for a, b in zip(ref, fast))
        t_np = _time(lambda: fn(kernels.numpy_kernels), repeat)
        t_nb = _time(lambda: fn(kernels.numba_kernels), repeat)
        print(f"{name:<20}{t_np * 1e6:>12.1f}{t_nb * 1e6:>12.1f}{t_np / t_nb:>10.2f}{diff:>14.2e}")


def end_to_end(steps):
    spec = DomainSpec("bench", n_classes=30, d_in=16, per_class=30, sigma_between=1.0)
    dom = make_synthetic_domain(spec, 0)
    classes = dom.class_ids
    learners = [proto_train(dom, classes, TrainConfig(epochs=1, episodes_per_epoch=5, seed=s))[0] for s in range(3)]
    for name in ("numpy", "numba"):
        kernels.use_backend(name)
        ens = EnsembleModel(learners, WpnParams(64, 128, 0.1, rng=np.random.default_rng(0)))
        train_wpn(ens, [(dom, classes)], WpnTrainConfig(steps=2))  # warm-up
        t = time.perf_counter()
        train_wpn(ens, [(dom, classes)], WpnTrainConfig(steps=steps))
        print(f"WPN training, {name:<5}: {(time.perf_counter() - t) / steps * 1e3:.2f} ms/step (M=3, 10-way 5-shot)")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=200)
    parser.add_argument("--steps", type=int, default=100)
    args = parser.parse_args()
    if kernels.numba_kernels is None:
        raise SystemExit("numba is not importable; nothing to compare")
    kernel_table(args.repeat)
    end_to_end(args.steps)


if __name__ == "__main__":
    main()
