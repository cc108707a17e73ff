"""Causal transformer decoder language model.

Pre-layer-norm residual blocks, learned positional embeddings, and a
locally-normalized output head (log-softmax over the vocabulary at every
position).  Inputs are id matrices whose rows start with BOS; position t of
the output scores the token at position t+1, so every token after BOS,
including EOS, receives a surprisal.

Checkpoint format: magic ``UIDLM``, a uint16 format version, a uint32
header length, a JSON header carrying the architecture, the vocabulary
content hash and the parameter manifest (name + shape, fixed order), then
the parameter blobs as little-endian float32 in manifest order.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .corpus import Batch, TokenSequence

CHECKPOINT_MAGIC = b"UIDLM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    The defaults are desk-scale (train in minutes); the 6-layer/8-head
    configuration common for this model family is reachable by overriding
    n_layers and n_heads.
    """

    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 128
    max_seq_len: int = 128
    dropout: float = 0.0
    init_seed: int = 0
    positional_encoding: str = "learned"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.positional_encoding != "learned":
            raise ValueError("only learned positional embeddings are implemented")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter manifest in the fixed serialization order."""
    v, d, ff = config.vocab_size, config.d_model, config.d_ff
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("tok_embed", (v, d)),
        ("pos_embed", (config.max_seq_len, d)),
    ]
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes += [
            (p + "ln1.gain", (d,)), (p + "ln1.bias", (d,)),
            (p + "attn.wq", (d, d)), (p + "attn.bq", (d,)),
            # key projection carries no bias: softmax scores are invariant to
            # a per-query shift, so a key bias would have exactly zero gradient
            (p + "attn.wk", (d, d)),
            (p + "attn.wv", (d, d)), (p + "attn.bv", (d,)),
            (p + "attn.wo", (d, d)), (p + "attn.bo", (d,)),
            (p + "ln2.gain", (d,)), (p + "ln2.bias", (d,)),
            (p + "ff.w1", (d, ff)), (p + "ff.b1", (ff,)),
            (p + "ff.w2", (ff, d)), (p + "ff.b2", (d,)),
        ]
    shapes += [
        ("final_ln.gain", (d,)), ("final_ln.bias", (d,)),
        ("head.w", (d, v)), ("head.b", (v,)),
    ]
    return shapes


class Parameters:
    """Ordered name -> leaf-Tensor map for one model instance."""

    def __init__(self, config: ModelConfig, tensors: dict[str, ad.Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> ad.Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors.keys())

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    @property
    def n_params(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {
            name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in self.tensors.items()
        }

    def astype(self, dtype) -> "Parameters":
        return Parameters(
            self.config,
            {n: ad.Tensor(t.data.astype(dtype), requires_grad=True) for n, t in self.items()},
        )

    def copy(self) -> "Parameters":
        return Parameters(
            self.config,
            {n: ad.Tensor(t.data.copy(), requires_grad=True) for n, t in self.items()},
        )


def init_params(config: ModelConfig, seed: int | None = None,
                dtype=np.float32) -> Parameters:
    """Deterministic initialization: zero-mean normals scaled by 1/sqrt(fan-in)
    for weights and embeddings, zeros for biases, ones for layer-norm gains."""
    rng = np.random.default_rng(config.init_seed if seed is None else seed)
    tensors: dict[str, ad.Tensor] = {}
    for name, shape in param_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("gain",):
            data = np.ones(shape)
        elif leaf in ("bias",) or leaf.startswith("b"):
            data = np.zeros(shape)
        elif name in ("tok_embed", "pos_embed"):
            data = rng.normal(0.0, 1.0 / np.sqrt(config.d_model), size=shape)
        else:  # weight matrices: fan-in is the first axis
            data = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        tensors[name] = ad.Tensor(data.astype(dtype), requires_grad=True)
    return Parameters(config, tensors)


def _linear(x: ad.Tensor, w: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    return ad.add(ad.matmul(x, w), b)


def embed_inputs(params: Parameters, inputs: np.ndarray) -> ad.Tensor:
    """Token + learned positional embeddings for an input id matrix (B, P)."""
    cfg = params.config
    inputs = np.asarray(inputs)
    if inputs.ndim != 2:
        raise ValueError(f"inputs must be a (batch, positions) matrix, got shape {inputs.shape}")
    if inputs.shape[1] > cfg.max_seq_len:
        raise ValueError(
            f"input length {inputs.shape[1]} exceeds model maximum {cfg.max_seq_len}"
        )
    if inputs.size and inputs.max() >= cfg.vocab_size:
        raise ValueError("input ids exceed the vocabulary size")
    tok = ad.embedding(params["tok_embed"], inputs)
    pos = ad.embedding(params["pos_embed"], np.arange(inputs.shape[1]))
    return ad.add(tok, pos)


def transform(params: Parameters, x: ad.Tensor, train: bool = False,
              dropout_rng: np.random.Generator | None = None) -> ad.Tensor:
    """Decoder stack over embedded inputs; returns per-position log-probs."""
    cfg = params.config
    rate = cfg.dropout if train else 0.0
    if rate > 0.0 and dropout_rng is None:
        raise ValueError("training with dropout requires an explicit generator")

    def drop(t: ad.Tensor) -> ad.Tensor:
        return ad.dropout(t, rate, dropout_rng) if rate > 0.0 else t

    b, p, d = x.shape
    h, dh = cfg.n_heads, cfg.d_head
    scale = 1.0 / np.sqrt(dh)

    x = drop(x)
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        hx = ad.layer_norm(x, params[pre + "ln1.gain"], params[pre + "ln1.bias"])

        def heads(t: ad.Tensor) -> ad.Tensor:
            return ad.transpose(ad.reshape(t, (b, p, h, dh)), (0, 2, 1, 3))

        q = heads(_linear(hx, params[pre + "attn.wq"], params[pre + "attn.bq"]))
        k = heads(ad.matmul(hx, params[pre + "attn.wk"]))
        v = heads(_linear(hx, params[pre + "attn.wv"], params[pre + "attn.bv"]))
        scores = ad.causal_mask(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * scale)
        weights = drop(ad.softmax(scores))
        ctx = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)), (b, p, d))
        x = ad.add(x, drop(_linear(ctx, params[pre + "attn.wo"], params[pre + "attn.bo"])))

        hx2 = ad.layer_norm(x, params[pre + "ln2.gain"], params[pre + "ln2.bias"])
        inner = ad.gelu(_linear(hx2, params[pre + "ff.w1"], params[pre + "ff.b1"]))
        x = ad.add(x, drop(_linear(inner, params[pre + "ff.w2"], params[pre + "ff.b2"])))

    final = ad.layer_norm(x, params["final_ln.gain"], params["final_ln.bias"])
    logits = _linear(final, params["head.w"], params["head.b"])
    return ad.log_softmax(logits)


def forward(params: Parameters, batch: Batch | np.ndarray, train: bool = False,
            dropout_rng: np.random.Generator | None = None) -> ad.Tensor:
    """Log-probability table for a batch: output[b, t] is the model's
    log-distribution over the token at position t+1 of row b."""
    ids = batch.ids if isinstance(batch, Batch) else np.asarray(batch)
    return transform(params, embed_inputs(params, ids[:, :-1]), train, dropout_rng)


@dataclass
class SurprisalVector:
    """Per-token surprisals (nats) for one sequence: positions after BOS
    through EOS inclusive, aligned with the realized token ids."""

    u: np.ndarray
    token_ids: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        if self.u.shape != self.token_ids.shape:
            raise ValueError("surprisals and token ids must align")

    def __len__(self) -> int:
        return len(self.u)


def surprisals(params: Parameters, sequence: TokenSequence) -> SurprisalVector:
    """u_t = -log p(w_t | w_<t) in nats for every predicted position."""
    ids = np.asarray(sequence.ids, dtype=np.int64)[None, :]
    with ad.no_grad():
        logp = forward(params, ids)
    targets = ids[0, 1:]
    u = -logp.data[0, np.arange(targets.size), targets].astype(np.float64)
    return SurprisalVector(u=u, token_ids=targets)


def sequence_log_prob(params: Parameters, sequence: TokenSequence) -> float:
    """log p(sequence) = -sum of its surprisals; always <= 0."""
    return -float(surprisals(params, sequence).u.sum())


def score_sequences(params: Parameters, sequences: list[TokenSequence],
                    batch_tokens: int = 8192) -> list[SurprisalVector]:
    """Batched surprisal computation; results follow the input order."""
    from .corpus import make_batches

    budget = max(batch_tokens, max((len(s) for s in sequences), default=2))
    out: list[SurprisalVector | None] = [None] * len(sequences)
    for batch in make_batches(sequences, budget, shuffle=False,
                              max_seq_len=params.config.max_seq_len):
        with ad.no_grad():
            logp = forward(params, batch)
        targets = batch.ids[:, 1:]
        picked = np.take_along_axis(logp.data, targets[..., None], axis=-1)[..., 0]
        for row, seq_index in enumerate(batch.indices):
            n = int(batch.lengths[row]) - 1
            out[seq_index] = SurprisalVector(
                u=-picked[row, :n].astype(np.float64), token_ids=targets[row, :n]
            )
    return out  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, params: Parameters, vocab_hash: str = "") -> None:
    """Serialize params (always as float32 blobs) with config and vocab hash."""
    header = {
        "config": asdict(params.config),
        "vocab_hash": vocab_hash,
        "params": [[name, list(shape)] for name, shape in param_shapes(params.config)],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(
        np.ascontiguousarray(params[name].data, dtype="<f4").tobytes()
        for name, _ in param_shapes(params.config)
    )
    payload = (
        CHECKPOINT_MAGIC
        + struct.pack("<H", CHECKPOINT_VERSION)
        + struct.pack("<I", len(header_bytes))
        + header_bytes
        + blob
    )
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path, dtype=np.float32) -> tuple[Parameters, str]:
    """Read a checkpoint, validating magic, version, shapes and finiteness."""
    raw = Path(path).read_bytes()
    if raw[:5] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic bytes)")
    (version,) = struct.unpack("<H", raw[5:7])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", raw[7:11])
    header = json.loads(raw[11:11 + hlen].decode("utf-8"))
    config = ModelConfig(**header["config"])
    manifest = param_shapes(config)
    if [[n, list(s)] for n, s in manifest] != header["params"]:
        raise ValueError(f"{path}: parameter manifest does not match the stored config")
    tensors: dict[str, ad.Tensor] = {}
    offset = 11 + hlen
    for name, shape in manifest:
        count = int(np.prod(shape))
        end = offset + 4 * count
        flat = np.frombuffer(raw[offset:end], dtype="<f4")
        if flat.size != count:
            raise ValueError(f"{path}: truncated blob for parameter {name}")
        data = flat.reshape(shape).astype(dtype)
        if not np.isfinite(data).all():
            raise ValueError(f"{path}: non-finite values in parameter {name}")
        tensors[name] = ad.Tensor(data, requires_grad=True)
        offset = end
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes after parameter blobs")
    return Parameters(config, tensors), header["vocab_hash"]
