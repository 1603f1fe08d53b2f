"""Mean sigma of a trained model as input features are progressively erased.

    python3 scripts/corruption_sweep.py --seed 0 --ratios 0,0.25,0.5,0.75
"""

import argparse

from probembed import DatasetConfig, TrainConfig, corruption_sweep, generate, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--ambiguity", type=float, default=0.3)
    ap.add_argument("--ratios", default="0,0.25,0.5,0.75")
    args = ap.parse_args()

    ratios = [float(r) for r in args.ratios.split(",")]
    data = generate(DatasetConfig(ambiguity_fraction=args.ambiguity, seed=args.seed))
    model, _ = train(data.split()[0], TrainConfig(seed=args.seed))
    print("ratio  mean_sigma")
    for ratio, sigma in corruption_sweep(model, data, ratios, args.seed):
        print(f"{ratio:5.2f}  {sigma:.6f}")


if __name__ == "__main__":
    main()
