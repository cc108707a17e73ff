"""Command-line surface for the whole pipeline.

Subcommands: prepare (tokenize/split/vocab), train, sweep (strength grid),
eval (held-out report), sample (generation analysis), significance (paired
permutation test), synth (synthetic oracle corpora).

Exit codes: 0 success, 2 I/O failure, 4 training divergence, 3 any other
validation failure.  Every randomized command takes an explicit --seed; there
is no wall-clock default, so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import corpus as cp
from . import evaluation as ev
from . import model as md
from . import stats as stx
from . import trainer as tr
from .expconfig import ExperimentConfig, load_experiment_config

EXIT_OK, EXIT_IO, EXIT_VALIDATION, EXIT_TRAINING = 0, 2, 3, 4

DEFAULT_BETA_GRID = (0.006, 0.008, 0.01, 0.02, 0.03, 0.04, 0.05)
SIGNIFICANCE_LEVEL = 0.05


def _log(msg: str) -> None:
    # UIDLM_QUIET=1 silences progress logging; data outputs are unaffected
    if not os.environ.get("UIDLM_QUIET"):
        print(msg, file=sys.stderr)


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = str(path) + ".tmp"
    Path(tmp).write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def cmd_prepare(args) -> int:
    lines = Path(args.corpus).read_text(encoding="utf-8").splitlines()
    ratios = tuple(float(x) for x in args.ratios.split(","))
    if len(ratios) != 3:
        raise ValueError("--ratios needs three comma-separated numbers")
    splits = cp.split_corpus(lines, ratios=ratios, seed=args.seed)
    vocab, coverage = cp.build_vocab(splits.train, args.vocab_size, lowercase=args.lowercase)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    for name, part in (("train", splits.train), ("dev", splits.dev), ("test", splits.test)):
        _write_atomic(out / f"{name}.txt", "\n".join(part) + ("\n" if part else ""))
    print(f"coverage = {coverage!r}")
    print(f"vocab_size = {vocab.size}")
    print(f"split_sizes = {len(splits.train)}/{len(splits.dev)}/{len(splits.test)}")
    return EXIT_OK


def _load_experiment(config_path: str) -> tuple[ExperimentConfig, "cp.Vocabulary", "cp.CorpusSplits"]:
    exp = load_experiment_config(config_path)
    vocab = exp.load_vocab()
    splits = exp.load_splits(vocab)
    return exp, vocab, splits


def cmd_train(args) -> int:
    exp, vocab, splits = _load_experiment(args.config)
    report = tr.train(exp.train, splits, exp.model, exp.out_dir,
                      vocab_hash=vocab.content_hash(), log=_log)
    print(f"best_update = {report.best_update}")
    print(f"best_checkpoint = {exp.out_dir / report.best_checkpoint}")
    print(f"best_dev_nll_per_token = "
          f"{next(r.dev_nll_per_token for r in report.records if r.update == report.best_update)!r}")
    return EXIT_OK


def _run_one_beta(payload):
    base, beta, splits, model_cfg, out_dir, vocab_hash = payload
    return tr.sweep_beta(base, [beta], splits, model_cfg, out_dir,
                         vocab_hash=vocab_hash)[0]


def cmd_sweep(args) -> int:
    exp, vocab, splits = _load_experiment(args.config)
    betas = ([float(x) for x in args.betas.split(",")]
             if args.betas else list(DEFAULT_BETA_GRID))
    out_dir = exp.out_dir / "sweep"
    if args.jobs > 1:
        payloads = [(exp.train, b, splits, exp.model, out_dir, vocab.content_hash())
                    for b in betas]
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_run_one_beta, payloads))
    else:
        rows = tr.sweep_beta(exp.train, betas, splits, exp.model, out_dir,
                             vocab_hash=vocab.content_hash(), log=_log)
    csv_path = Path(args.out) if args.out else exp.out_dir / "sweep.csv"
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    tr.write_sweep_csv(rows, csv_path)
    print(f"sweep_rows = {len(rows)}")
    print(f"sweep_csv = {csv_path}")
    return EXIT_OK


def _load_model_and_test(args):
    params, vocab_hash = md.load_checkpoint(args.checkpoint)
    vocab = cp.Vocabulary.load(args.vocab)
    if vocab_hash and vocab_hash != vocab.content_hash():
        raise ValueError(
            f"vocabulary {args.vocab} does not match the checkpoint's vocabulary hash")
    return params, vocab


def cmd_eval(args) -> int:
    params, vocab = _load_model_and_test(args)
    lines = Path(args.test).read_text(encoding="utf-8").splitlines()
    seqs = [cp.encode(cp.tokenize(line, lowercase=args.lowercase), vocab) for line in lines]
    report = ev.evaluate(params, seqs)
    print(report.to_json())
    if args.out:
        _write_atomic(Path(args.out), report.to_json() + "\n")
    if args.scores:
        scored = md.score_sequences(params, seqs)
        _write_atomic(Path(args.scores),
                      "".join(f"{float(sv.u.mean())!r}\n" for sv in scored))
    if args.dump_surprisals:
        ev.dump_surprisals(params, seqs, vocab, args.dump_surprisals)
    return EXIT_OK


def cmd_sample(args) -> int:
    params, vocab = _load_model_and_test(args)
    report, samples = ev.generation_report(params, args.k, args.seed, max_len=args.max_len)
    text_lines = [" ".join(vocab.token_of.get(i, "<unk>") for i in s.content_ids)
                  for s in samples]
    prefix = Path(args.out_prefix)
    _write_atomic(prefix.with_suffix(".txt"), "\n".join(text_lines) + "\n")
    _write_atomic(prefix.with_suffix(".json"), report.to_json() + "\n")
    print(report.to_json())
    return EXIT_OK


def cmd_significance(args) -> int:
    a = [float(x) for x in Path(args.scores_a).read_text().split()]
    b = [float(x) for x in Path(args.scores_b).read_text().split()]
    scores = stx.PairedScores(a, b)
    if args.resamples is not None:
        p = stx.paired_permutation_test(scores, args.resamples, seed=args.seed)
        mode = f"monte-carlo({args.resamples})"
    else:
        mode = stx.default_test_mode(len(scores))
        if mode == "exhaustive":
            p = stx.paired_permutation_test(scores, "exhaustive")
        else:
            p = stx.paired_permutation_test(scores, mode, seed=args.seed)
            mode = f"monte-carlo({mode})"
    marker = " †" if p < SIGNIFICANCE_LEVEL else ""
    print(f"p = {p:.4f}{marker}")
    print(f"mode = {mode}")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = cp.MarkovSourceSpec.load(args.source)
    lines = cp.generate_synthetic(spec, args.n, seed=args.seed, max_len=args.max_len)
    _write_atomic(Path(args.out), "\n".join(lines) + "\n")
    rate = cp.analytic_entropy_rate(spec)
    print(f"entropy_rate_nats_per_token = {rate!r}")
    print(f"sequences = {len(lines)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uidlm",
        description="Train and analyze small language models with "
                    "surprisal-uniformity regularization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="tokenize, split, build vocabulary")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--ratios", default="0.8,0.1,0.1")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--lowercase", action="store_true")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("train", help="train one model from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sweep", help="train across regularizer strengths")
    p.add_argument("--config", required=True)
    p.add_argument("--betas", help="comma-separated list; default is the standard grid "
                                   + ",".join(str(b) for b in DEFAULT_BETA_GRID))
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="sweep CSV destination")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("eval", help="held-out perplexity and UID behavior")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--lowercase", action="store_true")
    p.add_argument("--out", help="write the report JSON here too")
    p.add_argument("--scores", help="write per-sequence mean surprisals (one per line)")
    p.add_argument("--dump-surprisals", help="write per-token surprisal CSV")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sample", help="ancestral samples + generation report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--k", type=int, default=10_000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--max-len", type=int, default=ev.DEFAULT_SAMPLE_MAX_LEN)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("significance", help="paired permutation test on score files")
    p.add_argument("--scores-a", required=True)
    p.add_argument("--scores-b", required=True)
    p.add_argument("--resamples", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_significance)

    p = sub.add_parser("synth", help="generate a synthetic oracle corpus")
    p.add_argument("--source", required=True, help="Markov source spec file")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--max-len", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)
    return parser


def _normalize_argv(argv):
    # fold "--betas -0.01,..." into one token: a leading minus in the value
    # would otherwise be parsed as an option string
    out, i = [], 0
    while i < len(argv):
        if argv[i] == "--betas" and i + 1 < len(argv):
            out.append(f"--betas={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv=None) -> int:
    argv = _normalize_argv(sys.argv[1:] if argv is None else list(argv))
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except tr.DivergenceError as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return EXIT_TRAINING
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, RuntimeError) as err:
        print(f"invalid input: {err}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
