"""Compare the compiled and NumPy matching backends on random codes.

    python3 benchmarks/bench_matching.py --pairs 200000 --codes 600

Both backends must return identical counts; the script checks that before
reporting throughput.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from irisgate.encoding import IrisCode
from irisgate.matching import BACKENDS, CodeBank, pack


def random_bank(n_codes: int, seed: int, mask_fraction: float = 0.8) -> CodeBank:
    rng = np.random.default_rng(seed)
    codes = []
    for _ in range(n_codes):
        bits = rng.random((2, 8, 200)) < 0.5
        mask = np.broadcast_to(rng.random((1, 8, 200)) < mask_fraction, bits.shape)
        codes.append(pack(IrisCode(bits, mask)))
    return CodeBank(codes)


def time_backend(bank, ia, ib, backend, workers, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = bank.match(ia, ib, backend=backend, workers=workers)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pairs", type=int, default=100_000)
    ap.add_argument("--codes", type=int, default=600)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    bank = random_bank(args.codes, args.seed)
    rng = np.random.default_rng(args.seed + 1)
    ia = rng.integers(0, args.codes, args.pairs)
    ib = rng.integers(0, args.codes, args.pairs)

    results = {}
    for name in sorted(BACKENDS):
        results[name] = time_backend(bank, ia, ib, name, args.workers, args.repeat)
    ref = next(iter(results.values()))[1]
    for name, (_, out) in results.items():
        for key in ("disagree", "overlap_bits", "shift"):
            if not np.array_equal(out[key], ref[key]):
                raise SystemExit(f"backend {name} disagrees on {key}")

    print(f"{args.pairs} pairs, 17 shifts each, {args.workers} worker(s), best of {args.repeat}")
    base = results.get("numpy", (None,))[0]
    for name, (secs, _) in sorted(results.items(), key=lambda kv: kv[1][0]):
        speed = f"  x{base / secs:.1f} vs numpy" if base and name != "numpy" else ""
        print(f"  {name:<7} {secs:8.3f} s  {args.pairs / secs:12,.0f} pairs/s{speed}")


if __name__ == "__main__":
    main()
