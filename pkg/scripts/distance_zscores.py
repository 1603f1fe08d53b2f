"""Distribution of closed-form-versus-Monte-Carlo z-scores for the distance suite.

    python3 scripts/distance_zscores.py --seed 2024 --pairs 100

A correct implementation gives z-scores close to standard normal: mean near 0,
spread near 1, about 5% beyond 2 and 0.3% beyond 3.
"""

import argparse
import math
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))
import oracles  # noqa: E402
from probembed.gaussian import GaussianEmbedding, closed_form_distance  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--pairs", type=int, default=100)
    ap.add_argument("--samples", type=int, default=10**6)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    z = {k: [] for k in ("KL", "JS", "ELK", "BK")}
    for i in range(args.pairs):
        D = (1, 8, 64)[i % 3]
        mu1, mu2 = rng.normal(size=D) / math.sqrt(D), rng.normal(size=D) / math.sqrt(D)
        lv1, lv2 = rng.uniform(-3, 1, D), rng.uniform(-3, 1, D)
        p, q = GaussianEmbedding("p", "a", mu1, lv1), GaussianEmbedding("q", "b", mu2, lv2)
        est = oracles.distance_suite_mc(mu1, np.exp(lv1 / 2), mu2, np.exp(lv2 / 2), args.samples, rng)
        for k in z:
            z[k].append((closed_form_distance(k, p, q) - est[k][0]) / est[k][1])
    print("metric  mean    std    |z|>2  |z|>3  max|z|")
    for k, v in z.items():
        v = np.array(v)
        a = np.abs(v)
        print(f"{k:6s} {v.mean():6.3f} {v.std():6.3f} {int((a > 2).sum()):6d} {int((a > 3).sum()):6d} {a.max():7.2f}")


if __name__ == "__main__":
    main()
