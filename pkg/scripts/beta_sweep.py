#!/usr/bin/env python3
"""Strength sweep on a prepared experiment: one training run per beta value,
then a CSV of dev NLL, both perplexity conventions and UID behavior — the
data behind the perplexity-vs-surprisal-variance trade-off plot.

Usage: python3 scripts/beta_sweep.py CONFIG.ini [beta,beta,...] [out.csv]
Defaults to the standard grid 0.006,0.008,0.01,0.02,0.03,0.04,0.05 and the
extended grid including a negative strength can be passed explicitly, e.g.
-0.01,0,0.01,0.03,0.05,0.07,0.09.
"""

import sys

from uidlm.cli import DEFAULT_BETA_GRID
from uidlm.expconfig import load_experiment_config
from uidlm import trainer as tr


def main() -> int:
    if len(sys.argv) < 2:
        print(__doc__.strip(), file=sys.stderr)
        return 3
    exp = load_experiment_config(sys.argv[1])
    betas = ([float(x) for x in sys.argv[2].split(",")]
             if len(sys.argv) > 2 else list(DEFAULT_BETA_GRID))
    out_csv = sys.argv[3] if len(sys.argv) > 3 else str(exp.out_dir / "sweep.csv")
    vocab = exp.load_vocab()
    splits = exp.load_splits(vocab)
    rows = tr.sweep_beta(exp.train, betas, splits, exp.model, exp.out_dir / "sweep",
                         vocab_hash=vocab.content_hash(),
                         log=lambda m: print("   " + m))
    tr.write_sweep_csv(rows, out_csv)
    print(f"wrote {len(rows)} rows to {out_csv}")
    for row in rows:
        print(f"  beta {row.beta:+.4g}: dev {row.dev_nll_per_token:.4f}, "
              f"ppl_token {row.ppl_token:.3f}, uid_behavior {row.uid_behavior:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
