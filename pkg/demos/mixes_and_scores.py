"""Compare training-set mixes and score toy predictions.

Part one samples the implicit/explicit mixes used for ablations from a
synthetic pool and checks the floor law. Part two scores a handful of
predictions with every answer metric and audits answer positions.

    python demos/mixes_and_scores.py
"""

import argparse

from qasynth.compose import CompositionConfig, mix, sample_size
from qasynth.counterfactual import correct_position
from qasynth.metrics import position_bias_audit, score
from qasynth.records import QAPair, QType

MIXES = [(1, 1), (0.66, 1), (0.33, 1), (0, 1), (1, 0.66), (1, 0.33), (1, 0)]


def pool(n_implicit: int, n_explicit: int) -> list[QAPair]:
    out = [QAPair(f"i::{k:05d}:q0", f"i::{k:05d}", f"why {k}?", "x", QType.IMPLICIT, "because")
           for k in range(n_implicit)]
    out += [QAPair(f"e::{k:05d}:q0", f"e::{k:05d}", f"what {k}?", "y", QType.EXPLICIT)
            for k in range(n_explicit)]
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--implicit", type=int, default=12_376)
    ap.add_argument("--explicit", type=int, default=12_294)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    pairs = pool(args.implicit, args.explicit)
    print(f"pool: {args.implicit} implicit, {args.explicit} explicit")
    print(f"{'mix':>9} {'implicit':>9} {'explicit':>9} {'total':>7}")
    for f, g in MIXES:
        dataset, rep = mix(pairs, CompositionConfig(f, g, args.seed))
        assert rep.n_implicit_sampled == sample_size(f, args.implicit)
        assert rep.n_explicit_sampled == sample_size(g, args.explicit)
        print(f"{CompositionConfig(f, g).label:>9} {rep.n_implicit_sampled:>9} "
              f"{rep.n_explicit_sampled:>9} {len(dataset):>7}")

    preds = ["Wuhan", "a seafood market in Wuhan", "5 days", "respiratory droplets", "SARS"]
    golds = ["Wuhan", "a seafood market", "5.2 days", "respiratory droplets", "80 percent identity with SARS"]
    print("\nscores:")
    for name, value in score(preds, golds).to_dict().items():
        print(f"  {name:>7}: {value if value is None or name == 'n' else round(value, 2)}")

    positions = [correct_position(args.seed, f"doc::{k:04d}:q0")[0] for k in range(2_000)]
    audit = position_bias_audit(positions)
    print(f"\nanswer positions over 2000 items: {audit['counts']} "
          f"(chi-square {audit['chi_square']:.2f}, p={audit['p_value']:.3f})")


if __name__ == "__main__":
    main()
