#!/usr/bin/env python3
"""Dataset-size ablation: train a baseline and each regularizer on nested
subsets of the training split and report test-perplexity deltas per size.

Usage: python3 scripts/size_ablation.py CONFIG.ini sizes_in_tokens [out.csv]
e.g.   python3 scripts/size_ablation.py exp.ini 50000,100000,200000
"""

import sys

from uidlm.expconfig import load_experiment_config
from uidlm import trainer as tr


def main() -> int:
    if len(sys.argv) < 3:
        print(__doc__.strip(), file=sys.stderr)
        return 3
    exp = load_experiment_config(sys.argv[1])
    sizes = [int(x) for x in sys.argv[2].split(",")]
    out_csv = sys.argv[3] if len(sys.argv) > 3 else str(exp.out_dir / "ablation.csv")
    vocab = exp.load_vocab()
    splits = exp.load_splits(vocab)
    rows = tr.size_ablation(exp.train, sizes, splits, exp.model,
                            exp.out_dir / "ablation", seed=exp.train.data_seed,
                            vocab_hash=vocab.content_hash(),
                            log=lambda m: print("   " + m))
    tr.write_ablation_csv(rows, out_csv)
    print(f"wrote {len(rows)} rows to {out_csv}")
    for row in rows:
        print(f"  {row.subset_tokens:>9} tokens, {row.objective:<18}: "
              f"ppl_token {row.ppl_token:.3f} ({row.ppl_delta_vs_baseline:+.2f}% vs baseline)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
