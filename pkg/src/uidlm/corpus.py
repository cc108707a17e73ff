"""Text pipeline: tokenization, vocabulary, splits, batching, and synthetic
Markov corpora with analytically known entropy rates.

File formats
------------
Corpus file: UTF-8 text, one sequence per line, LF-terminated.
Vocabulary file: a 4-line reserved header (<pad>, <bos>, <eos>, <unk>)
followed by one token per line in id order, so the token on 0-based body
line k has id k + 4.
Synthetic source file: ``key = value`` lines with keys ``symbols``,
``termination``, ``initial`` (S probabilities) and ``transition_<i>``
(row i of the transition matrix), ``#`` comments allowed.
"""

from __future__ import annotations

import hashlib
import unicodedata
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
N_RESERVED = 4


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def tokenize(line: str, lowercase: bool = False) -> list[str]:
    """Rule-based word tokenizer.

    Splits on Unicode whitespace, detaches leading/trailing punctuation into
    separate tokens, and leaves interior apostrophes/hyphens alone.  This is
    a documented approximation of standard word tokenization, not a
    bit-compatible reimplementation of any particular toolkit.
    """
    if lowercase:
        line = line.lower()
    tokens: list[str] = []
    for chunk in line.split():
        leading: list[str] = []
        trailing: list[str] = []
        start, end = 0, len(chunk)
        while start < end and _is_punct(chunk[start]):
            leading.append(chunk[start])
            start += 1
        while end > start and _is_punct(chunk[end - 1]):
            trailing.append(chunk[end - 1])
            end -= 1
        tokens.extend(leading)
        if end > start:
            tokens.append(chunk[start:end])
        tokens.extend(reversed(trailing))
    return tokens


@dataclass
class Vocabulary:
    """token<->id map with reserved ids 0..3 = PAD, BOS, EOS, UNK.

    Non-reserved ids are ordered by descending training-corpus frequency,
    ties broken lexicographically.
    """

    id_of: dict[str, int]
    token_of: dict[int, str]
    size: int

    @classmethod
    def from_tokens(cls, ordered_tokens: list[str]) -> "Vocabulary":
        id_of = {tok: N_RESERVED + i for i, tok in enumerate(ordered_tokens)}
        token_of = {i: t for t, i in id_of.items()}
        for i, t in enumerate(RESERVED_TOKENS):
            token_of[i] = t
        return cls(id_of=id_of, token_of=token_of, size=N_RESERVED + len(ordered_tokens))

    def encode_token(self, token: str) -> int:
        return self.id_of.get(token, UNK_ID)

    def save(self, path: str | Path) -> None:
        body = list(RESERVED_TOKENS) + [self.token_of[i] for i in range(N_RESERVED, self.size)]
        Path(path).write_text("\n".join(body) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if len(lines) < N_RESERVED or tuple(lines[:N_RESERVED]) != RESERVED_TOKENS:
            raise ValueError(f"{path}: missing reserved vocabulary header {RESERVED_TOKENS}")
        return cls.from_tokens(lines[N_RESERVED:])

    def content_hash(self) -> str:
        """sha256 over the canonical file body; ties checkpoints to a vocab."""
        body = "\n".join(
            list(RESERVED_TOKENS) + [self.token_of[i] for i in range(N_RESERVED, self.size)]
        )
        return hashlib.sha256(body.encode("utf-8")).hexdigest()


def build_vocab(train_lines: list[str], max_size: int,
                lowercase: bool = False) -> tuple[Vocabulary, float]:
    """Frequency-ordered vocabulary over the training lines.

    Keeps the (max_size - 4) most frequent tokens; everything else encodes to
    UNK.  Returns (vocab, coverage) where coverage is the fraction of token
    occurrences the kept set accounts for.
    """
    if max_size < N_RESERVED + 1:
        raise ValueError(f"max_size must be at least {N_RESERVED + 1}, got {max_size}")
    counts: dict[str, int] = {}
    total = 0
    for line in train_lines:
        for tok in tokenize(line, lowercase=lowercase):
            if tok in RESERVED_TOKENS:
                continue  # control strings never become corpus tokens
            counts[tok] = counts.get(tok, 0) + 1
            total += 1
    if total == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = ranked[: max_size - N_RESERVED]
    coverage = sum(c for _, c in kept) / total
    return Vocabulary.from_tokens([t for t, _ in kept]), coverage


@dataclass(frozen=True)
class TokenSequence:
    """Id sequence beginning with BOS and ending with EOS; length |w| counts
    every id including the two boundary tokens."""

    ids: tuple[int, ...]

    def __post_init__(self):
        ids = self.ids
        if len(ids) < 2 or ids[0] != BOS_ID or ids[-1] != EOS_ID:
            raise ValueError("token sequence must start with BOS and end with EOS")
        interior = ids[1:-1]
        if any(i in (BOS_ID, EOS_ID, PAD_ID) for i in interior):
            raise ValueError("token sequence contains reserved BOS/EOS/PAD ids in the interior")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_predicted(self) -> int:
        """Number of scored positions: every token after BOS, EOS included."""
        return len(self.ids) - 1

    @property
    def content_ids(self) -> tuple[int, ...]:
        return self.ids[1:-1]


def encode(tokens: list[str], vocab: Vocabulary) -> TokenSequence:
    """Wrap with BOS/EOS; out-of-vocabulary tokens map to UNK."""
    return TokenSequence((BOS_ID, *[vocab.encode_token(t) for t in tokens], EOS_ID))


def decode(sequence: TokenSequence, vocab: Vocabulary) -> list[str]:
    """Inverse of encode on in-vocabulary text; drops BOS/EOS."""
    return [vocab.token_of.get(i, RESERVED_TOKENS[UNK_ID]) for i in sequence.content_ids]


@dataclass
class CorpusSplits:
    """Disjoint, jointly exhaustive train/dev/test partition of a corpus.

    The three lists hold raw lines straight after `split_corpus` and
    TokenSequences after `encode_splits`.
    """

    train: list
    dev: list
    test: list
    seed: int
    ratios: tuple[float, float, float]


def split_corpus(lines: list[str], ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
                 seed: int = 0) -> CorpusSplits:
    """Seed-deterministic shuffled split by line index.

    Dev/test sizes are floor(ratio * n); the remainder goes to train.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    n = len(lines)
    if n < 3:
        raise ValueError(f"need at least 3 lines to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_dev = int(np.floor(ratios[1] * n))
    n_test = int(np.floor(ratios[2] * n))
    n_train = n - n_dev - n_test
    take = lambda idx: [lines[i] for i in idx]
    return CorpusSplits(
        train=take(order[:n_train]),
        dev=take(order[n_train:n_train + n_dev]),
        test=take(order[n_train + n_dev:]),
        seed=seed,
        ratios=tuple(ratios),
    )


def encode_splits(splits: CorpusSplits, vocab: Vocabulary,
                  lowercase: bool = False) -> CorpusSplits:
    enc = lambda ls: [encode(tokenize(line, lowercase=lowercase), vocab) for line in ls]
    return CorpusSplits(
        train=enc(splits.train), dev=enc(splits.dev), test=enc(splits.test),
        seed=splits.seed, ratios=splits.ratios,
    )


@dataclass
class Batch:
    """Padded id matrix plus the masks the model and loss need.

    ids: (B, L) PAD-padded; valid: 1.0 at real positions; loss_mask: (B, L-1)
    marking real prediction targets (rows sum to length-1); lengths: true
    per-row lengths; indices: position of each row in the source list.
    """

    ids: np.ndarray
    valid: np.ndarray
    loss_mask: np.ndarray
    lengths: np.ndarray
    indices: np.ndarray

    @classmethod
    def from_sequences(cls, seqs: list[TokenSequence], indices: list[int]) -> "Batch":
        lengths = np.array([len(s) for s in seqs], dtype=np.int64)
        L = int(lengths.max())
        ids = np.full((len(seqs), L), PAD_ID, dtype=np.int64)
        for r, s in enumerate(seqs):
            ids[r, : len(s)] = s.ids
        pos = np.arange(L)[None, :]
        valid = (pos < lengths[:, None]).astype(np.float64)
        loss_mask = (pos[:, : L - 1] < (lengths - 1)[:, None]).astype(np.float64)
        return cls(ids=ids, valid=valid, loss_mask=loss_mask, lengths=lengths,
                   indices=np.asarray(indices, dtype=np.int64))

    @property
    def n_rows(self) -> int:
        return self.ids.shape[0]

    @property
    def n_predicted(self) -> int:
        return int(self.lengths.sum()) - self.n_rows


def make_batches(sequences: list[TokenSequence], max_tokens_per_batch: int, seed: int = 0,
                 shuffle: bool = False, max_seq_len: int | None = None) -> list[Batch]:
    """Greedy token-budget packing; every sequence appears exactly once.

    With shuffle on, sequences are permuted, length-bucketed (stable sort so
    the permutation breaks ties) and the resulting batches shuffled; with
    shuffle off the given order is preserved.
    """
    lengths = [len(s) for s in sequences]
    for i, n in enumerate(lengths):
        if max_seq_len is not None and n - 1 > max_seq_len:
            raise ValueError(
                f"sequence on line {i} has {n - 1} predicted tokens, over the model maximum {max_seq_len}"
            )
        if n > max_tokens_per_batch:
            raise ValueError(
                f"sequence on line {i} has length {n}, over the batch budget {max_tokens_per_batch}"
            )
    order = list(range(len(sequences)))
    rng = np.random.default_rng(seed)
    if shuffle:
        order = list(rng.permutation(len(sequences)))
        order.sort(key=lambda i: lengths[i])  # stable: bucket by length

    batches: list[Batch] = []
    row_seqs: list[TokenSequence] = []
    row_idx: list[int] = []
    budget = 0
    for i in order:
        if row_seqs and budget + lengths[i] > max_tokens_per_batch:
            batches.append(Batch.from_sequences(row_seqs, row_idx))
            row_seqs, row_idx, budget = [], [], 0
        row_seqs.append(sequences[i])
        row_idx.append(int(i))
        budget += lengths[i]
    if row_seqs:
        batches.append(Batch.from_sequences(row_seqs, row_idx))
    if shuffle:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


# ---------------------------------------------------------------------------
# synthetic Markov sources (verification oracles)
# ---------------------------------------------------------------------------

@dataclass
class MarkovSourceSpec:
    """First-order chain over S single-letter symbols with an optional
    per-step termination probability."""

    initial: np.ndarray
    transition: np.ndarray
    termination: float = 0.0

    def __post_init__(self):
        self.initial = np.asarray(self.initial, dtype=np.float64)
        self.transition = np.asarray(self.transition, dtype=np.float64)
        s = self.n_symbols
        if s > 26:
            raise ValueError("at most 26 symbols (rendered as single letters)")
        if self.transition.shape != (s, s):
            raise ValueError(
                f"transition matrix shape {self.transition.shape} does not match {s} symbols"
            )
        if abs(self.initial.sum() - 1.0) > 1e-12 or (self.initial < 0).any():
            raise ValueError("initial distribution must be a probability vector (sum 1 +/- 1e-12)")
        rowsums = self.transition.sum(axis=1)
        if np.abs(rowsums - 1.0).max() > 1e-12 or (self.transition < 0).any():
            raise ValueError("transition rows must be probability vectors (sum 1 +/- 1e-12)")
        if not 0.0 <= self.termination <= 1.0:
            raise ValueError(f"termination probability must lie in [0, 1], got {self.termination}")

    @property
    def n_symbols(self) -> int:
        return len(self.initial)

    def save(self, path: str | Path) -> None:
        lines = [f"symbols = {self.n_symbols}", f"termination = {float(self.termination)!r}",
                 "initial = " + " ".join(repr(float(p)) for p in self.initial)]
        for i, row in enumerate(self.transition):
            lines.append(f"transition_{i} = " + " ".join(repr(float(p)) for p in row))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "MarkovSourceSpec":
        kv: dict[str, str] = {}
        for raw in Path(path).read_text(encoding="utf-8").splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}: malformed line {raw!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            kv[key] = val
        try:
            s = int(kv["symbols"])
            termination = float(kv["termination"])
            initial = np.array([float(x) for x in kv["initial"].split()])
            rows = [np.array([float(x) for x in kv[f"transition_{i}"].split()]) for i in range(s)]
        except KeyError as missing:
            raise ValueError(f"{path}: missing key {missing}") from None
        return cls(initial=initial, transition=np.stack(rows), termination=termination)


def _symbol_token(i: int) -> str:
    return chr(ord("a") + i)


def generate_synthetic(spec: MarkovSourceSpec, n_sequences: int, seed: int,
                       max_len: int | None = None) -> list[str]:
    """Draw sequences exactly from the chain: first symbol from the initial
    distribution, then after every emission terminate with the spec's
    probability, otherwise transition."""
    if spec.termination == 0.0 and max_len is None:
        raise ValueError("termination probability 0 requires an explicit max_len")
    rng = np.random.default_rng(seed)
    init_cdf = np.cumsum(spec.initial)
    trans_cdf = np.cumsum(spec.transition, axis=1)
    lines = []
    for _ in range(n_sequences):
        state = int(np.searchsorted(init_cdf, rng.random() * init_cdf[-1], side="right"))
        symbols = [state]
        while max_len is None or len(symbols) < max_len:
            if spec.termination > 0.0 and rng.random() < spec.termination:
                break
            state = int(np.searchsorted(trans_cdf[state], rng.random() * trans_cdf[state, -1],
                                        side="right"))
            symbols.append(state)
        lines.append(" ".join(_symbol_token(s) for s in symbols))
    return lines


def stationary_distribution(transition: np.ndarray, tol: float = 1e-12,
                            max_iter: int = 200_000) -> np.ndarray:
    """Stationary distribution by damped power iteration.

    Iterates mu <- mu (T + I)/2, which has the same fixed point as T but
    converges for periodic chains too.
    """
    t = np.asarray(transition, dtype=np.float64)
    if np.abs(t.sum(axis=1) - 1.0).max() > 1e-12 or (t < 0).any():
        raise ValueError("transition rows must be probability vectors")
    lazy = 0.5 * (t + np.eye(len(t)))
    mu = np.full(len(t), 1.0 / len(t))
    for _ in range(max_iter):
        nxt = mu @ lazy
        nxt /= nxt.sum()
        if np.abs(nxt - mu).max() <= tol:
            return nxt
        mu = nxt
    raise ValueError("power iteration did not converge; is the chain irreducible?")


def analytic_entropy_rate(spec: MarkovSourceSpec) -> float:
    """Expected per-token surprisal of the source, in nats.

    With termination probability q > 0, termination is one extra (absorbing)
    outcome of every row: each row's next-token distribution becomes
    [(1-q) T[s, :], q] while the state distribution stays the stationary
    distribution of T (termination is state-independent, so conditioning on
    survival leaves T unchanged).
    """
    mu = stationary_distribution(spec.transition)
    q = spec.termination

    def row_entropy(row: np.ndarray) -> float:
        scaled = (1.0 - q) * row
        nz = scaled[scaled > 0]
        h = -float(np.sum(nz * np.log(nz)))
        if q > 0:
            h -= q * np.log(q)
        return h

    return float(sum(mu[s] * row_entropy(spec.transition[s]) for s in range(spec.n_symbols)))
