"""Compare the compiled and pure-Python tracker kernels.

    python3 benchmarks/bench_kernels.py [--N 600] [--K 6] [--J 90] [--sweeps 20]

Both backends run the same sweeps from the same start; the script prints
microseconds per basis update, the speedup and how far apart the two final
bases are.
"""

import argparse
import time

import numpy as np

from fedprog import _kernels_py

try:
    from fedprog import _kernels_cy
except ImportError:
    _kernels_cy = None


def make_problem(N, K, J, missing, seed):
    rng = np.random.default_rng(seed)
    Utrue = np.linalg.qr(rng.standard_normal((N, 3)))[0]
    X = Utrue @ rng.standard_normal((3, J)) * 10 + 0.3 * rng.standard_normal((N, J))
    indptr, ind, val = [0], [], []
    for j in range(J):
        keep = np.sort(rng.choice(N, size=int((1 - missing) * N), replace=False))
        ind.append(keep)
        val.append(X[keep, j])
        indptr.append(indptr[-1] + keep.size)
    U0 = np.linalg.qr(rng.standard_normal((N, K)))[0]
    return np.array(indptr, dtype=np.int64), np.concatenate(ind).astype(np.int64), np.concatenate(val), U0


def run(mod, U0, indptr, ind, val, sweeps):
    U = U0.copy()
    upd = 0
    t = time.perf_counter()
    for _ in range(sweeps):
        upd = mod.sweep(U, indptr, ind, val, upd, 100, 1e-10, 1e-10)[0]
    return U, time.perf_counter() - t


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--N", type=int, default=600)
    p.add_argument("--K", type=int, default=6)
    p.add_argument("--J", type=int, default=90)
    p.add_argument("--missing", type=float, default=0.3)
    p.add_argument("--sweeps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args(argv)
    indptr, ind, val, U0 = make_problem(a.N, a.K, a.J, a.missing, a.seed)
    n = a.sweeps * a.J
    Up, tp = run(_kernels_py, U0, indptr, ind, val, a.sweeps)
    print(f"python  {tp / n * 1e6:8.1f} us/update")
    if _kernels_cy is None:
        print("cython  not built (pip install -e . --no-build-isolation compiles it)")
        return 0
    Uc, tc = run(_kernels_cy, U0, indptr, ind, val, a.sweeps)
    cos = np.linalg.svd(Up.T @ Uc, compute_uv=False).min()
    print(f"cython  {tc / n * 1e6:8.1f} us/update")
    print(f"speedup {tp / tc:8.2f}x   min cosine between final subspaces {cos:.12f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
