"""Compare the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from hmmgrad import _pykernels, kernels
from hmmgrad.synthesis import sample_hmm, well_separated_model

try:
    from hmmgrad import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def cases(n_states, T, dim=13):
    m = well_separated_model(n_states, dim, 10.0, 0.95, seed=0)
    Y, _ = sample_hmm(m, T, np.random.default_rng(0))
    log_b = m.log_emissions(Y)
    log_alpha, ll = kernels.forward(m.log_pi, m.log_trans, log_b)
    log_beta = kernels.backward(m.log_trans, log_b)
    log_delta, bp = kernels.viterbi(m.log_pi, m.log_trans, log_b)
    return {
        "forward": lambda impl: kernels.forward(m.log_pi, m.log_trans, log_b, impl=impl),
        "backward": lambda impl: kernels.backward(m.log_trans, log_b, impl=impl),
        "xi_sum": lambda impl: kernels.xi_sum(log_alpha, log_beta, m.log_trans, log_b, ll[-1], impl=impl),
        "viterbi": lambda impl: kernels.viterbi(m.log_pi, m.log_trans, log_b, impl=impl),
        "incremental_paths": lambda impl: kernels.incremental_paths(log_delta, bp, impl=impl),
    }


def best_time(fn, repeat):
    number = 1
    while timeit.timeit(fn, number=number) < 0.05:
        number *= 2
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not available; build with `pip install -e . --no-build-isolation`")
        return 1
    print(f"{'kernel':<18} {'N':>2} {'T':>5} {'python ms':>10} {'cython ms':>10} {'speedup':>8}")
    for n, T in ((2, 200), (4, 200), (4, 1000)):
        for name, fn in cases(n, T).items():
            py = best_time(lambda: fn(_pykernels), args.repeat)
            cy = best_time(lambda: fn(_ckernels), args.repeat)
            print(f"{name:<18} {n:>2} {T:>5} {1e3 * py:>10.3f} {1e3 * cy:>10.3f} {py / cy:>7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
