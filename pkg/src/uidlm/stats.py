"""Significance testing and report arithmetic.

The paired permutation test compares per-sequence mean surprisals of two
models on an identical test set.  The statistic is |mean(A - B)|; the null
resamples the sign of each pair independently.  Monte-Carlo p-values use the
add-one estimator (never exactly 0); exhaustive mode enumerates all 2^n sign
assignments and is exact.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EXHAUSTIVE_LIMIT = 20
DEFAULT_RESAMPLES = 10_000


@dataclass
class PairedScores:
    """Per-sequence score pairs (model A vs model B) on one test set."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.a.shape != self.b.shape or self.a.ndim != 1:
            raise ValueError(
                f"score lists must be 1-d and equally long, got {self.a.shape} and {self.b.shape}"
            )

    def __len__(self) -> int:
        return len(self.a)


def paired_permutation_test(scores: PairedScores, resamples: int | str = DEFAULT_RESAMPLES,
                            seed: int | None = None) -> float:
    """Two-sided paired permutation p-value.

    resamples may be an integer (Monte-Carlo; requires a seed) or the string
    "exhaustive" (all 2^n sign assignments; only for n <= 20 pairs).
    """
    if len(scores) < 1:
        raise ValueError("need at least one score pair")
    diffs = scores.a - scores.b
    observed = abs(diffs.mean())

    if resamples == "exhaustive":
        return _exhaustive_p(diffs, observed)
    if not isinstance(resamples, int) or resamples < 1:
        raise ValueError(f"resamples must be a positive integer or 'exhaustive', got {resamples!r}")
    if seed is None:
        raise ValueError("Monte-Carlo mode needs an explicit seed")
    rng = np.random.default_rng(seed)
    signs = rng.integers(0, 2, size=(resamples, diffs.size)) * 2 - 1
    stats = np.abs((signs * diffs).mean(axis=1))
    return (1 + int((stats >= observed).sum())) / (1 + resamples)


def _exhaustive_p(diffs: np.ndarray, observed: float) -> float:
    n = diffs.size
    if n > EXHAUSTIVE_LIMIT:
        raise ValueError(f"exhaustive mode supports at most {EXHAUSTIVE_LIMIT} pairs, got {n}")
    total = 1 << n
    hits = 0
    bits = np.arange(n)
    for start in range(0, total, 65536):
        codes = np.arange(start, min(start + 65536, total), dtype=np.int64)
        signs = ((codes[:, None] >> bits) & 1) * 2 - 1
        stats = np.abs((signs * diffs).mean(axis=1))
        hits += int((stats >= observed).sum())
    return hits / total


def default_test_mode(n_pairs: int) -> int | str:
    """Exhaustive below 21 pairs, Monte-Carlo with the default resample
    count otherwise."""
    return "exhaustive" if n_pairs <= EXHAUSTIVE_LIMIT else DEFAULT_RESAMPLES


def percent_change(baseline: float, new: float) -> float:
    """Signed percent change, raw (display rounding is separate)."""
    if baseline <= 0:
        raise ValueError(f"baseline must be positive, got {baseline}")
    return 100.0 * (new - baseline) / baseline


def display_percent(raw: float) -> float:
    """Round half away from zero to one decimal, for report display."""
    return math.copysign(math.floor(abs(raw) * 10.0 + 0.5) / 10.0, raw)


@dataclass
class RunRecord:
    """One analysis row: everything the summary export needs."""

    run_id: str
    beta: float
    regularizer: str
    dev_nll: float
    ppl_seq_avg: float
    ppl_token: float
    uid_behavior: float
    entropy: float | None = None
    mean_length: float | None = None
    pct_unique_2: float | None = None
    pct_unique_3: float | None = None
    pct_unique_4: float | None = None
    p_value_vs_baseline: float | None = None


EXPORT_COLUMNS = ["run_id", "beta", "regularizer", "dev_nll", "ppl_seq_avg", "ppl_token",
                  "uid_behavior", "entropy", "mean_length", "pct_unique_2", "pct_unique_3",
                  "pct_unique_4", "p_value_vs_baseline"]


def export_records(records: list[RunRecord], destination: str | Path) -> None:
    """Stable-column CSV (UTF-8, LF) behind the sweep/analysis charts.

    Numeric cells use repr so a round-trip parse reproduces values to full
    precision.
    """
    if not records:
        raise ValueError("nothing to export")

    def cell(value):
        if value is None:
            return ""
        if isinstance(value, float):  # incl. numpy scalars; plain repr for round-trips
            return repr(float(value))
        return value

    tmp = str(destination) + ".tmp"
    try:
        with open(tmp, "w", encoding="utf-8", newline="\n") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(EXPORT_COLUMNS)
            for r in records:
                writer.writerow([cell(getattr(r, name)) for name in EXPORT_COLUMNS])
        os.replace(tmp, destination)
    except OSError:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
