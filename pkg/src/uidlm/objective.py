"""Training losses: token-summed NLL, the surprisal-uniformity regularizers
(variance, local consistency, max), label-smoothed NLL, and the combined
regularized objective L + beta * R.

Each regularizer exists in two forms: a plain-array function over one
sequence's surprisal vector (used at evaluation time and as the unit the
oracles check), and a masked batch composition inside `combined_loss` that
runs on the autodiff graph so gradients flow through the surprisals,
including through the internal mean of the variance term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .corpus import Batch
from .model import Parameters, forward

REGULARIZER_KINDS = ("none", "variance", "local_consistency", "max")


@dataclass(frozen=True)
class ObjectiveConfig:
    """Regularizer choice and strength.

    beta may be negative (a uniformity *penalty*); label_smoothing is the
    mixture weight alpha of the uniform target distribution.  When
    reg_mean_over_sequences is set, the batch regularizer term averages the
    per-sequence values instead of summing them.
    """

    regularizer: str = "none"
    beta: float = 0.0
    label_smoothing: float = 0.0
    reg_mean_over_sequences: bool = False

    def __post_init__(self):
        if self.regularizer not in REGULARIZER_KINDS:
            raise ValueError(f"unknown regularizer {self.regularizer!r}; pick from {REGULARIZER_KINDS}")
        if not np.isfinite(self.beta):
            raise ValueError("beta must be finite")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label smoothing must lie in [0, 1), got {self.label_smoothing}")


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar summary of one batch loss: combined = nll_sum + beta * reg_sum.

    nll_sum is the (possibly label-smoothed) data term in nats, summed over
    tokens and sequences; reg_sum aggregates the per-sequence regularizer.
    """

    nll_sum: float
    reg_sum: float
    combined: float
    token_count: int
    sequence_count: int


def _as_vector(u) -> np.ndarray:
    arr = np.asarray(u, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("surprisal vector must be a nonempty 1-d array")
    return arr


def variance_reg(u) -> float:
    """Population variance of the surprisals; zero for a single token."""
    arr = _as_vector(u)
    return float(np.mean((arr - arr.mean()) ** 2))


def local_consistency_reg(u) -> float:
    """Mean squared difference of adjacent surprisals; zero when there is no
    adjacent pair (single predicted token)."""
    arr = _as_vector(u)
    if arr.size == 1:
        return 0.0
    return float(np.mean((arr[:-1] - arr[1:]) ** 2))


def max_reg(u) -> float:
    """Largest surprisal in the sequence."""
    return float(_as_vector(u).max())


def nll(surprisal_vectors) -> float:
    """Token-summed negative log-likelihood over a batch of sequences."""
    vectors = [_as_vector(v) for v in surprisal_vectors]
    if not vectors:
        raise ValueError("nll needs at least one surprisal vector")
    return float(sum(v.sum() for v in vectors))


def label_smoothed_nll(log_probs: np.ndarray, targets: np.ndarray, alpha: float) -> float:
    """Direct-formula smoothed NLL over a (positions, vocab) log-prob table.

    Per position: (1 - alpha) * surprisal(target) + alpha * mean vocabulary
    surprisal; alpha = 0 reduces exactly to the plain NLL.
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    lp = np.asarray(log_probs, dtype=np.float64)
    tgt = np.asarray(targets)
    picked = np.take_along_axis(lp, tgt[..., None], axis=-1)[..., 0]
    if alpha == 0.0:
        return float(-picked.sum())
    return float(((1.0 - alpha) * -picked + alpha * -lp.mean(axis=-1)).sum())


# ---------------------------------------------------------------------------
# graph-side batch objective
# ---------------------------------------------------------------------------

def _const(arr: np.ndarray, dtype) -> ad.Tensor:
    return ad.Tensor(np.asarray(arr, dtype=dtype))


def batch_surprisal_grid(params: Parameters, batch: Batch, train: bool = False,
                         dropout_rng=None) -> tuple[ad.Tensor, ad.Tensor]:
    """Differentiable (B, L-1) surprisal grid and the log-prob table it came
    from.  Entries at padded positions are meaningless and must be masked."""
    logp = forward(params, batch, train=train, dropout_rng=dropout_rng)
    targets = batch.ids[:, 1:]
    return ad.negate(ad.gather_last(logp, targets)), logp


def _per_sequence_regularizer(kind: str, u: ad.Tensor, batch: Batch, dtype) -> ad.Tensor:
    """Per-row regularizer values (B,) from the masked surprisal grid."""
    mask = _const(batch.loss_mask, dtype)
    n = batch.loss_mask.sum(axis=1)  # >= 1 for every well-formed sequence
    u_masked = ad.multiply(u, mask)
    if kind == "variance":
        mean = ad.reshape(ad.divide(ad.sum_along(u_masked, axis=1), _const(n, dtype)),
                          (batch.n_rows, 1))
        centered = ad.multiply(ad.subtract(u, mean), mask)
        return ad.divide(ad.sum_along(ad.power(centered, 2), axis=1), _const(n, dtype))
    if kind == "local_consistency":
        pair_mask = _const(batch.loss_mask[:, 1:] * batch.loss_mask[:, :-1], dtype)
        diffs = ad.multiply(ad.subtract(u[:, :-1], u[:, 1:]), pair_mask)
        denom = _const(np.maximum(n - 1.0, 1.0), dtype)
        return ad.divide(ad.sum_along(ad.power(diffs, 2), axis=1), denom)
    if kind == "max":
        # padded entries drop to -1, strictly below any real surprisal (>= 0)
        floored = ad.add(u_masked, _const(batch.loss_mask - 1.0, dtype))
        return ad.max_along(floored, axis=1)
    raise ValueError(f"unknown regularizer kind {kind!r}")


def combined_loss(params: Parameters, batch: Batch, config: ObjectiveConfig,
                  train: bool = False, dropout_rng=None,
                  batch_label: str = "") -> tuple[LossBreakdown, ad.Tensor]:
    """Regularized objective over one batch.

    Returns the scalar breakdown plus the graph root to backpropagate.  The
    regularizers consume the same surprisal nodes as the data term, so the
    two gradients compose.  A non-finite loss aborts with a diagnostic.
    """
    if batch.loss_mask.shape[1] == 0:
        raise ValueError("batch has no prediction targets")
    dtype = params.dtype
    alpha = config.label_smoothing
    u, logp = batch_surprisal_grid(params, batch, train=train, dropout_rng=dropout_rng)
    mask = _const(batch.loss_mask, dtype)

    if alpha > 0.0:
        uniform_term = ad.negate(ad.mean_along(logp, axis=2))
        position_loss = ad.add(ad.multiply(u, _const(np.float64(1.0 - alpha), dtype)),
                               ad.multiply(uniform_term, _const(np.float64(alpha), dtype)))
    else:
        position_loss = u
    nll_node = ad.sum_along(ad.multiply(position_loss, mask))

    reg_value = 0.0
    root = nll_node
    if config.regularizer != "none":
        per_seq = _per_sequence_regularizer(config.regularizer, u, batch, dtype)
        reg_node = ad.mean_along(per_seq) if config.reg_mean_over_sequences else ad.sum_along(per_seq)
        reg_value = float(reg_node.data)
        if config.beta != 0.0:
            root = ad.add(nll_node, ad.multiply(reg_node, _const(np.float64(config.beta), dtype)))

    nll_value = float(nll_node.data)
    combined_value = nll_value + config.beta * reg_value
    if not np.isfinite(combined_value):
        label = batch_label or f"batch(rows={batch.indices.tolist()})"
        raise RuntimeError(
            f"non-finite loss on {label}: nll={nll_value}, reg={reg_value}"
        )
    breakdown = LossBreakdown(
        nll_sum=nll_value,
        reg_sum=reg_value,
        combined=combined_value,
        token_count=int(batch.loss_mask.sum()),
        sequence_count=batch.n_rows,
    )
    return breakdown, root


def per_sequence_regularizer_values(params: Parameters, batch: Batch,
                                    kind: str) -> np.ndarray:
    """Evaluation-time per-sequence regularizer values (no graph)."""
    if kind == "none":
        return np.zeros(batch.n_rows)
    with ad.no_grad():
        u, _ = batch_surprisal_grid(params, batch)
        values = _per_sequence_regularizer(kind, u, batch, params.dtype)
    return values.data.astype(np.float64)
