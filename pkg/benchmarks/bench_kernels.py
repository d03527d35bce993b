"""Time the numba and numpy evaluator kernels on the same random inputs.

    python3 benchmarks/bench_kernels.py [--queries 500] [--gallery 2000] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from ocnet import kernels


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--queries", type=int, default=500)
    ap.add_argument("--gallery", type=int, default=2000)
    ap.add_argument("--dim-final", type=int, default=128)
    ap.add_argument("--dim-bb", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if kernels.numba is None:
        raise SystemExit("numba is not installed")

    rng = np.random.default_rng(0)
    nq, ng = args.queries, args.gallery
    qf, gf = rng.normal(size=(nq, args.dim_final)), rng.normal(size=(ng, args.dim_final))
    qb, gb = rng.normal(size=(nq, args.dim_bb)), rng.normal(size=(ng, args.dim_bb))
    q_ids, q_cams = rng.integers(0, nq // 4 + 1, nq), rng.integers(0, 6, nq)
    g_ids, g_cams = rng.integers(0, nq // 4 + 1, ng), rng.integers(0, 6, ng)

    # warm up the JIT so compile time is not timed
    d = kernels.fused_distance_matrix_numba(qf[:2], gf[:2], qb[:2], gb[:2], 1.0)
    order = np.argsort(kernels.fused_distance_matrix_numpy(qf, gf, qb, gb, 1.0), axis=1, kind="stable")
    kernels.rank_stats_numba(order[:2], q_ids[:2], q_cams[:2], g_ids, g_cams, True)

    cases = {
        "fused_distance": (lambda: kernels.fused_distance_matrix_numpy(qf, gf, qb, gb, 1.0),
                           lambda: kernels.fused_distance_matrix_numba(qf, gf, qb, gb, 1.0)),
        "rank_stats": (lambda: kernels.rank_stats_numpy(order, q_ids, q_cams, g_ids, g_cams),
                       lambda: kernels.rank_stats_numba(order, q_ids, q_cams, g_ids, g_cams, True)),
    }
    print(f"{nq} queries x {ng} gallery, dims {args.dim_final}+{args.dim_bb}, best of {args.repeat}")
    print(f"{'kernel':16s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}  max |diff|")
    for name, (f_np, f_nb) in cases.items():
        t_np = min(timeit.repeat(f_np, number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(f_nb, number=1, repeat=args.repeat)) * 1e3
        a, b = f_np(), f_nb()
        if isinstance(a, tuple):
            diff = max(float(np.abs(x - y).max()) for x, y in zip(a, b))
        else:
            diff = float(np.abs(a - b).max())
        print(f"{name:16s} {t_np:10.2f} {t_nb:10.2f} {t_np / t_nb:7.2f}x  {diff:.1e}")


if __name__ == "__main__":
    main()
