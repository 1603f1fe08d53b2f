"""Held-out retrieval for probabilistic, mu-only and triplet training across seeds.

    python3 scripts/run_ablation.py --seeds 10 --ambiguity 0.3

Prints one row per seed (mean over both retrieval directions) and the win
counts used by the training-ablation acceptance check.
"""

import argparse

import numpy as np

from probembed import DatasetConfig, LossKind, Mode, SimilaritySpec, TrainConfig, embed_dataset, evaluate, generate, train


def score(model, test, kind):
    report = evaluate(embed_dataset(model, test), test, SimilaritySpec(kind, params=model.match_params))
    dirs = list(report.directions.values())
    return float(np.mean([d.r_precision for d in dirs])), float(np.mean([d.recall[1] for d in dirs]))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--ambiguity", type=float, default=0.3)
    ap.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    ap.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    ap.add_argument("--similarity", default="mean", help="test-time similarity kind")
    args = ap.parse_args()

    variants = {
        "prob": {},
        "mu-only": {"mode": Mode.MU_ONLY},
        "triplet": {"alt_mode": LossKind.TRIPLET_HNM},
    }
    print("seed  " + "  ".join(f"{n:>8s} R-P {n:>8s} R@1" for n in variants))
    wins_a = wins_b = 0
    for seed in range(args.seeds):
        train_set, test = generate(DatasetConfig(ambiguity_fraction=args.ambiguity, seed=seed)).split()
        res = {}
        for name, extra in variants.items():
            config = TrainConfig(seed=seed, epochs=args.epochs, learning_rate=args.lr, **extra)
            model, _ = train(train_set, config)
            res[name] = score(model, test, args.similarity)
        wins_a += res["prob"][0] >= res["mu-only"][0]
        wins_b += res["triplet"][1] >= res["triplet"][0] and res["triplet"][0] < res["prob"][0]
        print(f"{seed:4d}  " + "  ".join(f"{rp:12.3f} {r1:12.3f}" for rp, r1 in res.values()))
    print(f"prob R-P >= mu-only R-P: {wins_a}/{args.seeds}")
    print(f"triplet R@1 >= own R-P and R-P < prob: {wins_b}/{args.seeds}")


if __name__ == "__main__":
    main()
