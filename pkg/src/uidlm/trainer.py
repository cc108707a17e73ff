"""Optimization loop: adaptive-moment updates with warmup + inverse-sqrt
decay, global-norm clipping, dev-based model selection, strength sweeps and
the dataset-size ablation harness.

The persisted report is JSON-lines, one record per dev-eval interval with
fields ``update``, ``train_loss_per_token``, ``dev_nll_per_token``,
``dev_reg_per_seq`` and ``checkpoint``.  Wall-clock time is tracked on the
in-memory records only, so reruns with identical seeds produce byte-identical
report files and checkpoints.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import model as md
from .corpus import CorpusSplits, TokenSequence, make_batches
from .model import ModelConfig, Parameters
from .objective import ObjectiveConfig, combined_loss, per_sequence_regularizer_values


class DivergenceError(RuntimeError):
    """Training left the basin: dev NLL exceeded twice the uniform baseline."""


@dataclass(frozen=True)
class TrainConfig:
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    warmup_steps: int = 400
    clip_norm: float = 0.5
    max_updates: int = 1000
    dev_interval: int = 100
    batch_tokens: int = 4096
    init_seed: int = 0
    data_seed: int = 0
    dropout_seed: int = 0
    storage: str = "float32"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.clip_norm <= 0:
            raise ValueError("learning rate and clip norm must be positive")
        if self.max_updates < 1 or self.dev_interval < 1 or self.warmup_steps < 1:
            raise ValueError("max_updates, dev_interval and warmup_steps must be >= 1")
        if self.storage not in ("float32", "float64"):
            raise ValueError(f"storage must be float32 or float64, got {self.storage}")

    @property
    def dtype(self):
        return np.float32 if self.storage == "float32" else np.float64


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    skipped: int = 0

    @classmethod
    def for_params(cls, params: Parameters) -> "AdamState":
        return cls(
            m={n: np.zeros_like(t.data) for n, t in params.items()},
            v={n: np.zeros_like(t.data) for n, t in params.items()},
        )


def learning_rate_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to the base rate, then inverse-square-root decay."""
    w = config.warmup_steps
    return config.learning_rate * min(step / w, np.sqrt(w / step))


def optimizer_step(params: Parameters, grads: dict[str, np.ndarray], state: AdamState,
                   config: TrainConfig) -> None:
    """Global-norm clipping followed by one adaptive-moment update, in place.

    Non-finite gradients skip the update (and are counted) rather than
    corrupting the moments.
    """
    total = 0.0
    for g in grads.values():
        if not np.isfinite(g).all():
            state.skipped += 1
            return
        total += float(np.square(g, dtype=np.float64).sum())
    norm = np.sqrt(total)
    scale = config.clip_norm / norm if norm > config.clip_norm else 1.0

    state.step += 1
    lr = learning_rate_at(state.step, config)
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step
    for name, tensor in params.items():
        g = grads[name] * scale if scale != 1.0 else grads[name]
        g = g.astype(tensor.dtype, copy=False)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        tensor.data -= (lr / bias1) * m / (np.sqrt(v / bias2) + eps)


@dataclass
class TrainRecord:
    update: int
    train_loss_per_token: float
    dev_nll_per_token: float
    dev_reg_per_seq: float
    checkpoint: str
    wall_clock: float = 0.0  # in-memory only; kept out of the persisted report

    def to_json(self) -> str:
        return json.dumps(
            {
                "update": self.update,
                "train_loss_per_token": self.train_loss_per_token,
                "dev_nll_per_token": self.dev_nll_per_token,
                "dev_reg_per_seq": self.dev_reg_per_seq,
                "checkpoint": self.checkpoint,
            },
            sort_keys=True,
        )


@dataclass
class TrainReport:
    records: list[TrainRecord]
    best_update: int
    best_checkpoint: str
    skipped_steps: int = 0

    def save(self, path: str | Path) -> None:
        lines = [r.to_json() for r in self.records]
        lines.append(json.dumps({"best_update": self.best_update,
                                 "best_checkpoint": self.best_checkpoint}, sort_keys=True))
        tmp = str(path) + ".tmp"
        Path(tmp).write_text("\n".join(lines) + "\n", encoding="utf-8")
        os.replace(tmp, path)


def select_best(report: TrainReport) -> int:
    """Checkpoint id (update count) with the lowest dev NLL; ties break to
    the earliest checkpoint."""
    if not report.records:
        raise ValueError("no dev evaluations recorded")
    best = report.records[0]
    for rec in report.records[1:]:
        if rec.dev_nll_per_token < best.dev_nll_per_token:
            best = rec
    return best.update


def dev_nll_per_token(params: Parameters, batches) -> float:
    """Unregularized, unsmoothed dev NLL per predicted token (dropout off)."""
    total, count = 0.0, 0
    for batch in batches:
        with ad.no_grad():
            logp = md.forward(params, batch)
        picked = np.take_along_axis(logp.data, batch.ids[:, 1:][..., None], axis=-1)[..., 0]
        total += float(-(picked * batch.loss_mask).sum(dtype=np.float64))
        count += batch.n_predicted
    return total / count


def mean_dev_regularizer(params: Parameters, batches, kind: str) -> float:
    if kind == "none":
        return 0.0
    values = [per_sequence_regularizer_values(params, b, kind) for b in batches]
    return float(np.concatenate(values).mean())


def train(config: TrainConfig, splits: CorpusSplits, model_config: ModelConfig,
          out_dir: str | Path, vocab_hash: str = "",
          log=lambda msg: None) -> TrainReport:
    """Run up to max_updates, evaluating dev NLL and checkpointing every
    interval; reproducible bit-for-bit under identical seeds and storage.

    Raises DivergenceError when dev NLL blows past twice the uniform
    (log vocab-size) baseline.
    """
    if not splits.train:
        raise ValueError("training split is empty")
    if not splits.dev:
        raise ValueError("dev split is empty; model selection needs dev evaluations")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dtype = config.dtype
    params = md.init_params(model_config, seed=config.init_seed, dtype=dtype)
    state = AdamState.for_params(params)
    dev_batches = make_batches(splits.dev, config.batch_tokens, shuffle=False,
                               max_seq_len=model_config.max_seq_len)
    uniform_nll = float(np.log(model_config.vocab_size))
    divergence_bar = 2.0 * uniform_nll

    records: list[TrainRecord] = []
    started = time.perf_counter()
    update = 0
    epoch = 0
    interval_loss, interval_tokens = 0.0, 0
    while update < config.max_updates:
        epoch_batches = make_batches(
            splits.train, config.batch_tokens, seed=_epoch_seed(config.data_seed, epoch),
            shuffle=True, max_seq_len=model_config.max_seq_len)
        epoch += 1
        for batch in epoch_batches:
            update += 1
            dropout_rng = (
                np.random.default_rng((config.dropout_seed, update))
                if model_config.dropout > 0.0 else None
            )
            params.zero_grads()
            breakdown, root = combined_loss(
                params, batch, config.objective, train=True, dropout_rng=dropout_rng,
                batch_label=f"update {update}")
            ad.backward(root)
            optimizer_step(params, params.grads(), state, config)
            interval_loss += breakdown.combined
            interval_tokens += breakdown.token_count

            if update % config.dev_interval == 0 or update == config.max_updates:
                dev_nll = dev_nll_per_token(params, dev_batches)
                dev_reg = mean_dev_regularizer(params, dev_batches,
                                               config.objective.regularizer)
                name = f"ckpt_{update:06d}.uidlm"
                md.save_checkpoint(out_dir / name, params, vocab_hash=vocab_hash)
                records.append(TrainRecord(
                    update=update,
                    train_loss_per_token=interval_loss / max(interval_tokens, 1),
                    dev_nll_per_token=dev_nll,
                    dev_reg_per_seq=dev_reg,
                    checkpoint=name,
                    wall_clock=time.perf_counter() - started,
                ))
                log(f"update {update}: train/token {records[-1].train_loss_per_token:.4f} "
                    f"dev nll/token {dev_nll:.4f} dev reg/seq {dev_reg:.4f} "
                    f"[{records[-1].wall_clock:.1f}s]")
                interval_loss, interval_tokens = 0.0, 0
                if dev_nll > divergence_bar:
                    report = TrainReport(records, update, name, state.skipped)
                    report.save(out_dir / "report.jsonl")
                    raise DivergenceError(
                        f"dev NLL/token {dev_nll:.3f} exceeded twice the uniform "
                        f"baseline {uniform_nll:.3f} at update {update}")
            if update >= config.max_updates:
                break

    best = select_best(TrainReport(records, 0, ""))
    best_name = next(r.checkpoint for r in records if r.update == best)
    report = TrainReport(records, best, best_name, state.skipped)
    report.save(out_dir / "report.jsonl")
    _write_atomic(out_dir / "best_checkpoint.txt", best_name + "\n")
    return report


def _epoch_seed(data_seed: int, epoch: int) -> int:
    # stable per-epoch stream; SeedSequence mixes the pair deterministically
    return int(np.random.SeedSequence([data_seed, epoch]).generate_state(1)[0])


def _write_atomic(path: Path, text: str) -> None:
    tmp = str(path) + ".tmp"
    Path(tmp).write_text(text, encoding="utf-8")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# sweeps and ablations
# ---------------------------------------------------------------------------

@dataclass
class SweepRow:
    beta: float
    regularizer: str
    dev_nll_per_token: float
    ppl_seq_avg: float
    ppl_token: float
    uid_behavior: float
    best_checkpoint: str


def sweep_beta(base_config: TrainConfig, betas, splits: CorpusSplits,
               model_config: ModelConfig, out_dir: str | Path, vocab_hash: str = "",
               log=lambda msg: None) -> list[SweepRow]:
    """One train + select per strength value, sharing the data seed, then a
    test-set evaluation of each selected checkpoint."""
    from .evaluation import evaluate

    if not list(betas):
        raise ValueError("beta list must be nonempty")
    out_dir = Path(out_dir)
    rows: list[SweepRow] = []
    for beta in betas:
        run_dir = out_dir / f"beta_{beta:+.6g}"
        cfg = replace(base_config, objective=replace(base_config.objective, beta=float(beta)))
        log(f"sweep: training beta={beta:+.6g}")
        report = train(cfg, splits, model_config, run_dir, vocab_hash=vocab_hash, log=log)
        best_params, _ = md.load_checkpoint(run_dir / report.best_checkpoint, dtype=cfg.dtype)
        ev = evaluate(best_params, splits.test)
        best_record = next(r for r in report.records if r.update == report.best_update)
        rows.append(SweepRow(
            beta=float(beta),
            regularizer=cfg.objective.regularizer,
            dev_nll_per_token=best_record.dev_nll_per_token,
            ppl_seq_avg=ev.ppl_seq_avg,
            ppl_token=ev.ppl_token,
            uid_behavior=ev.uid_behavior,
            best_checkpoint=str(run_dir / report.best_checkpoint),
        ))
    return rows


SWEEP_CSV_COLUMNS = ["beta", "regularizer", "dev_nll_per_token", "ppl_seq_avg",
                     "ppl_token", "uid_behavior", "best_checkpoint"]


def write_sweep_csv(rows: list[SweepRow], path: str | Path) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(SWEEP_CSV_COLUMNS)
        for row in rows:
            writer.writerow([repr(row.beta), row.regularizer, repr(row.dev_nll_per_token),
                             repr(row.ppl_seq_avg), repr(row.ppl_token),
                             repr(row.uid_behavior), row.best_checkpoint])
    os.replace(tmp, path)


def nested_token_subsets(train: list[TokenSequence], sizes, seed: int) -> dict[int, list]:
    """Whole-sequence subsets nested across sizes: one seed-fixed permutation,
    each subset the shortest prefix reaching its token budget.

    Selected sequences are returned in their original corpus order, so the
    full-size subset is the training split itself and training on it matches
    ordinary training bit for bit.
    """
    order = np.random.default_rng(seed).permutation(len(train))
    subsets: dict[int, list] = {}
    for size in sorted(sizes):
        picked, tokens = [], 0
        for i in order:
            if tokens >= size:
                break
            picked.append(int(i))
            tokens += train[i].n_predicted
        subsets[int(size)] = [train[i] for i in sorted(picked)]
    return subsets


@dataclass
class AblationRow:
    subset_tokens: int
    objective: str
    beta: float
    dev_nll_per_token: float
    ppl_token: float
    ppl_delta_vs_baseline: float


def size_ablation(base_config: TrainConfig, sizes, splits: CorpusSplits,
                  model_config: ModelConfig, out_dir: str | Path, seed: int,
                  regularizers=("variance", "local_consistency"),
                  vocab_hash: str = "", log=lambda msg: None) -> list[AblationRow]:
    """Train a baseline and each regularizer on nested train subsets and
    report test perplexity deltas, one row per (size, objective) pair."""
    from .evaluation import evaluate
    from .stats import percent_change

    total = sum(s.n_predicted for s in splits.train)
    for size in sizes:
        if size > total:
            raise ValueError(f"subset size {size} exceeds the train split ({total} tokens)")
    subsets = nested_token_subsets(splits.train, sizes, seed)
    out_dir = Path(out_dir)
    rows: list[AblationRow] = []
    for size in sorted(subsets):
        sub_splits = CorpusSplits(train=subsets[size], dev=splits.dev, test=splits.test,
                                  seed=splits.seed, ratios=splits.ratios)
        baseline_ppl = None
        for kind in ("none", *regularizers):
            objective = replace(base_config.objective, regularizer=kind,
                                beta=0.0 if kind == "none" else base_config.objective.beta)
            cfg = replace(base_config, objective=objective)
            run_dir = out_dir / f"tokens_{size}" / kind
            log(f"ablation: {size} tokens, objective {kind}")
            report = train(cfg, sub_splits, model_config, run_dir,
                           vocab_hash=vocab_hash, log=log)
            best_params, _ = md.load_checkpoint(run_dir / report.best_checkpoint,
                                                dtype=cfg.dtype)
            ev = evaluate(best_params, splits.test)
            best_record = next(r for r in report.records if r.update == report.best_update)
            if kind == "none":
                baseline_ppl = ev.ppl_token
            rows.append(AblationRow(
                subset_tokens=size,
                objective=kind,
                beta=cfg.objective.beta,
                dev_nll_per_token=best_record.dev_nll_per_token,
                ppl_token=ev.ppl_token,
                ppl_delta_vs_baseline=percent_change(baseline_ppl, ev.ppl_token),
            ))
    return rows


ABLATION_CSV_COLUMNS = ["subset_tokens", "objective", "beta", "dev_nll_per_token",
                        "ppl_token", "ppl_delta_vs_baseline"]


def write_ablation_csv(rows: list[AblationRow], path: str | Path) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(ABLATION_CSV_COLUMNS)
        for row in rows:
            writer.writerow([row.subset_tokens, row.objective, repr(row.beta),
                             repr(row.dev_nll_per_token), repr(row.ppl_token),
                             repr(row.ppl_delta_vs_baseline)])
    os.replace(tmp, path)
