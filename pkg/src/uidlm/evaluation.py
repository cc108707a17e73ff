"""Held-out evaluation and generation analysis.

Perplexity is reported under both conventions: exp of the mean over
sequences of per-sequence mean surprisal, and exp of the all-token mean.
UID behavior is the mean over sequences of the per-sequence surprisal
variance (a pooled all-token variant is available behind a flag).

Ancestral sampling draws each token exactly from the model's conditional
restricted to valid continuations (PAD and BOS are excluded and the row
renormalized; trained models put vanishing mass there, and the handcrafted
test models put exactly zero, so the restriction is the identity in
practice).  Recorded sample log-probabilities use the same restricted
conditional, which keeps the Monte-Carlo entropy estimator self-consistent.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import model as md
from .corpus import BOS_ID, EOS_ID, PAD_ID, TokenSequence, Vocabulary
from .model import Parameters, score_sequences
from .objective import variance_reg

DEFAULT_SAMPLE_MAX_LEN = 256


@dataclass
class EvalReport:
    ppl_seq_avg: float
    ppl_token: float
    uid_behavior: float
    token_count: int
    sequence_count: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "ppl_seq_avg": self.ppl_seq_avg,
                "ppl_token": self.ppl_token,
                "uid_behavior": self.uid_behavior,
                "token_count": self.token_count,
                "sequence_count": self.sequence_count,
            },
            sort_keys=True,
        )


def _scored(params: Parameters, test_set) -> list[np.ndarray]:
    if not test_set:
        raise ValueError("test set is empty")
    if isinstance(test_set[0], TokenSequence):
        return [sv.u for sv in score_sequences(params, test_set)]
    return [np.asarray(u, dtype=np.float64) for u in test_set]


def perplexity_seq_avg(params: Parameters, test_set) -> float:
    """exp of the mean over sequences of per-sequence mean surprisal."""
    vectors = _scored(params, test_set)
    return float(np.exp(np.mean([v.mean() for v in vectors])))


def perplexity_token(params: Parameters, test_set) -> float:
    """exp of total surprisal over total predicted-token count."""
    vectors = _scored(params, test_set)
    return float(np.exp(sum(v.sum() for v in vectors) / sum(v.size for v in vectors)))


def uid_behavior(params: Parameters, test_set, pooled: bool = False) -> float:
    """Mean per-sequence surprisal variance (pooled=True: one variance over
    every token of the test set instead)."""
    vectors = _scored(params, test_set)
    if pooled:
        return variance_reg(np.concatenate(vectors))
    return float(np.mean([variance_reg(v) for v in vectors]))


def evaluate(params: Parameters, test_set: list[TokenSequence]) -> EvalReport:
    """One scoring pass feeding every held-out metric."""
    vectors = _scored(params, test_set)
    token_count = sum(v.size for v in vectors)
    return EvalReport(
        ppl_seq_avg=float(np.exp(np.mean([v.mean() for v in vectors]))),
        ppl_token=float(np.exp(sum(v.sum() for v in vectors) / token_count)),
        uid_behavior=float(np.mean([variance_reg(v) for v in vectors])),
        token_count=token_count,
        sequence_count=len(vectors),
    )


def dump_surprisals(params: Parameters, test_set: list[TokenSequence],
                    vocab: Vocabulary, path: str | Path) -> None:
    """Per-sequence surprisal CSV: sequence id, position, token, u (nats)."""
    scored = score_sequences(params, test_set)
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["sequence", "position", "token", "surprisal"])
        for i, sv in enumerate(scored):
            for pos, (tok, u) in enumerate(zip(sv.token_ids, sv.u)):
                writer.writerow([i, pos, vocab.token_of.get(int(tok), "<unk>"), repr(float(u))])
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# ancestral sampling
# ---------------------------------------------------------------------------

@dataclass
class SampleResult:
    """One drawn sequence: ids include BOS (and EOS unless capped)."""

    ids: tuple[int, ...]
    log_prob: float
    capped: bool

    @property
    def content_ids(self) -> tuple[int, ...]:
        end = len(self.ids) if self.capped else len(self.ids) - 1
        return self.ids[1:end]


def _restricted_distribution(logp_row: np.ndarray) -> np.ndarray:
    """Model conditional with PAD/BOS removed and the row renormalized."""
    p = np.exp(logp_row.astype(np.float64))
    p[PAD_ID] = 0.0
    p[BOS_ID] = 0.0
    return p / p.sum()


def sample_many(params: Parameters, k: int, seed: int,
                max_len: int = DEFAULT_SAMPLE_MAX_LEN,
                chunk: int = 4096) -> list[SampleResult]:
    """K ancestral samples with per-item derived seeds, so results do not
    depend on chunking or worker layout.  max_len caps the number of
    predicted tokens; capped samples carry their truncated prefix log-prob
    and are flagged."""
    if k < 1:
        raise ValueError("need at least one sample")
    max_len = min(max_len, params.config.max_seq_len)
    streams = np.random.SeedSequence(seed).spawn(k)
    results: list[SampleResult] = []
    for start in range(0, k, chunk):
        rngs = [np.random.default_rng(s) for s in streams[start:start + chunk]]
        results.extend(_sample_chunk(params, rngs, max_len))
    return results


def _sample_chunk(params: Parameters, rngs, max_len: int) -> list[SampleResult]:
    n = len(rngs)
    rows = [[BOS_ID] for _ in range(n)]
    log_probs = [0.0] * n
    done: list[SampleResult | None] = [None] * n
    active = list(range(n))
    for _ in range(max_len):
        ids = np.array([rows[i] for i in active], dtype=np.int64)
        with ad.no_grad():
            logp = md.transform(params, md.embed_inputs(params, ids))
        last = logp.data[:, -1, :]
        still = []
        for row_pos, i in enumerate(active):
            p = _restricted_distribution(last[row_pos])
            cdf = np.cumsum(p)
            token = int(np.searchsorted(cdf, rngs[i].random() * cdf[-1], side="right"))
            log_probs[i] += float(np.log(p[token]))
            rows[i].append(token)
            if token == EOS_ID:
                done[i] = SampleResult(tuple(rows[i]), log_probs[i], capped=False)
            else:
                still.append(i)
        active = still
        if not active:
            break
    for i in active:
        done[i] = SampleResult(tuple(rows[i]), log_probs[i], capped=True)
    return done  # type: ignore[return-value]


def ancestral_sample(params: Parameters, seed: int,
                     max_len: int = DEFAULT_SAMPLE_MAX_LEN) -> SampleResult:
    """Draw one sequence token-by-token from the model's conditionals (no
    temperature, no truncation of the distribution) until EOS or max_len."""
    return sample_many(params, 1, seed, max_len=max_len)[0]


@dataclass
class EntropyEstimate:
    entropy: float
    standard_error: float
    n_samples: int
    n_capped: int


def estimate_entropy_mc(params: Parameters, k: int, seed: int,
                        max_len: int = DEFAULT_SAMPLE_MAX_LEN) -> EntropyEstimate:
    """Monte-Carlo sequence entropy: mean of -log p over K drawn samples,
    with standard error s / sqrt(K).  Capped samples count toward the mean
    (with their truncated prefix log-prob) and are tallied separately."""
    if k < 2:
        raise ValueError("need at least two samples for a standard error")
    samples = sample_many(params, k, seed, max_len=max_len)
    values = np.array([-s.log_prob for s in samples])
    return EntropyEstimate(
        entropy=float(values.mean()),
        standard_error=float(values.std(ddof=1) / np.sqrt(k)),
        n_samples=k,
        n_capped=sum(1 for s in samples if s.capped),
    )


# ---------------------------------------------------------------------------
# diversity / length metrics
# ---------------------------------------------------------------------------

def percent_unique_ngrams(samples: Sequence[Sequence[int]], n: int) -> float:
    """100 * distinct / total n-gram occurrences across all samples, over
    content token ids (BOS/EOS excluded); samples shorter than n contribute
    nothing."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not samples:
        raise ValueError("no samples given")
    seen: set[tuple[int, ...]] = set()
    total = 0
    for sample in samples:
        toks = tuple(sample)
        for i in range(len(toks) - n + 1):
            seen.add(toks[i:i + n])
            total += 1
    if total == 0:
        raise ValueError(f"every sample is shorter than n = {n}")
    return 100.0 * len(seen) / total


def mean_length(samples: Sequence[Sequence[int]]) -> float:
    """Arithmetic mean content-token count (BOS/EOS excluded)."""
    if not samples:
        raise ValueError("no samples given")
    return float(np.mean([len(s) for s in samples]))


@dataclass
class GenerationReport:
    sample_count: int
    mean_seq_len: float
    entropy: float
    entropy_se: float
    pct_unique_2: float
    pct_unique_3: float
    pct_unique_4: float
    n_capped: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "sample_count": self.sample_count,
                "mean_seq_len": self.mean_seq_len,
                "entropy_nats": self.entropy,
                "entropy_se": self.entropy_se,
                "pct_unique_2": self.pct_unique_2,
                "pct_unique_3": self.pct_unique_3,
                "pct_unique_4": self.pct_unique_4,
                "n_capped": self.n_capped,
            },
            sort_keys=True,
        )


def generation_report(params: Parameters, k: int, seed: int,
                      max_len: int = DEFAULT_SAMPLE_MAX_LEN,
                      ) -> tuple[GenerationReport, list[SampleResult]]:
    """Sample K sequences and compute the generation analysis table: mean
    length (capped samples excluded), Monte-Carlo entropy, and percent
    unique n-grams for n in {2, 3, 4}."""
    samples = sample_many(params, k, seed, max_len=max_len)
    values = np.array([-s.log_prob for s in samples])
    completed = [s.content_ids for s in samples if not s.capped]
    lengths = mean_length(completed) if completed else float("nan")
    contents = [s.content_ids for s in samples]

    def pct(n: int) -> float:
        try:
            return percent_unique_ngrams(contents, n)
        except ValueError:
            return float("nan")

    report = GenerationReport(
        sample_count=k,
        mean_seq_len=lengths,
        entropy=float(values.mean()),
        entropy_se=float(values.std(ddof=1) / np.sqrt(k)) if k > 1 else 0.0,
        pct_unique_2=pct(2),
        pct_unique_3=pct(3),
        pct_unique_4=pct(4),
        n_capped=sum(1 for s in samples if s.capped),
    )
    return report, samples
