"""Time the GRU recurrence under each available backend.

    python3 benchmarks/bench_gru.py [--repeat 5]

Shapes cover one dictionary-definition minibatch at a few hidden sizes.
"""

import argparse
import time

import numpy as np

from verbattr.gru import BACKENDS

SHAPES = [(32, 12, 32), (32, 12, 128), (64, 20, 300)]  # (batch, steps, hidden)


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'B':>4} {'T':>4} {'H':>4} {'backend':<8} {'forward ms':>11} {'backward ms':>12}")
    for B, T, H in SHAPES:
        gx = rng.normal(size=(B, T, 3 * H))
        u = rng.normal(0, 1 / np.sqrt(H), size=(3 * H, H))
        lengths = rng.integers(1, T + 1, size=B)
        dh = rng.normal(size=(B, H))
        reference = None
        for name, impl in BACKENDS.items():
            cache = impl.gru_forward(gx, lengths, u)
            grads = impl.gru_backward(dh, lengths, u, *cache)
            if reference is None:
                reference = (cache[0], grads)
            else:
                assert np.allclose(cache[0], reference[0]) and np.allclose(grads[1], reference[1][1])
            fwd = _best(lambda: impl.gru_forward(gx, lengths, u), args.repeat)
            bwd = _best(lambda: impl.gru_backward(dh, lengths, u, *cache), args.repeat)
            print(f"{B:4d} {T:4d} {H:4d} {name:<8} {1e3 * fwd:11.2f} {1e3 * bwd:12.2f}")


if __name__ == "__main__":
    main()
