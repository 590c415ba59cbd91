"""HDBSCAN vs DBSCAN on two blobs of very different density.

    python3 scripts/density_contrast.py [--ratio 20] [--sweep 24]

Prints the HDBSCAN result and, for a log-spaced eps sweep, the DBSCAN cluster
count and noise fraction. A setting "works" when it finds exactly two clusters
with under 5% noise.
"""

import argparse

import numpy as np

from metricseg.cluster import ClusterParams, dbscan_baseline, hdbscan


def fixture(seed, tight, ratio, size=100, gap=3.0):
    rng = np.random.default_rng(seed)
    a = rng.normal([0.0, 0.0], tight, (size, 2))
    b = rng.normal([gap, 0.0], tight * ratio, (size, 2))
    return np.concatenate([a, b])


def works(res):
    return res.n_clusters == 2 and res.noise_fraction < 0.05


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--tight", type=float, default=0.01)
    ap.add_argument("--ratio", type=float, default=20.0)
    ap.add_argument("--sweep", type=int, default=24)
    ap.add_argument("--min-pts", type=int, default=5)
    args = ap.parse_args()

    x = fixture(args.seed, args.tight, args.ratio)
    res = hdbscan(x, ClusterParams(min_samples=args.min_pts))
    print(f"hdbscan: {res.n_clusters} clusters, noise {res.noise_fraction:.3f}, ok={works(res)}")
    print(f"{'eps':>9} {'clusters':>8} {'noise':>6}  ok")
    ok = 0
    for eps in np.geomspace(0.005, 3.5, args.sweep):
        r = dbscan_baseline(x, float(eps), args.min_pts)
        ok += works(r)
        print(f"{eps:9.4f} {r.n_clusters:8d} {r.noise_fraction:6.3f}  {works(r)}")
    print(f"dbscan works for {ok}/{args.sweep} eps values")


if __name__ == "__main__":
    main()
