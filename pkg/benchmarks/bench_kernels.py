"""Compare the compiled token kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--tokens 65536] [--repeat 200]
"""

import argparse
import timeit

import numpy as np

from agentserve import _pykernels

try:
    from agentserve import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def bench(impl, tokens, other, block, repeat):
    keys = timeit.timeit(lambda: impl.block_keys(tokens, block), number=repeat) / repeat
    pref = timeit.timeit(lambda: impl.common_prefix_len(tokens, other), number=repeat) / repeat
    return keys, pref


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tokens", type=int, default=65_536)
    ap.add_argument("--block", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    tokens = rng.integers(0, 50_000, args.tokens, dtype=np.int64)
    other = tokens.copy()
    other[-1] += 1  # worst case for prefix match: differ only at the end

    impls = [("python", _pykernels)]
    if _ckernels is not None:
        impls.append(("cython", _ckernels))
        a = _ckernels.block_keys(tokens, args.block)
        b = _pykernels.block_keys(tokens, args.block)
        assert list(a) == list(b), "backends disagree on block keys"
    else:
        print("compiled extension not available; timing the fallback only")

    print(f"{args.tokens} tokens, block {args.block}, {args.repeat} repeats")
    print(f"{'backend':<8}{'block_keys us':>16}{'prefix_len us':>16}")
    rows = {}
    for name, impl in impls:
        rows[name] = bench(impl, tokens, other, args.block, args.repeat)
        k, p = rows[name]
        print(f"{name:<8}{k * 1e6:>16.1f}{p * 1e6:>16.1f}")
    if len(rows) == 2:
        (pk, pp), (ck, cp) = rows["python"], rows["cython"]
        print(f"speedup  block_keys x{pk / ck:.1f}  prefix_len x{pp / cp:.1f}")


if __name__ == "__main__":
    main()
