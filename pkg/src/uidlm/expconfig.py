"""Experiment configuration files: INI-style ``key = value`` lines under
section headers, strict about unknown keys, with data paths validated at
load time.  Sections and keys mirror the ModelConfig / TrainConfig /
ObjectiveConfig fields plus [data], [seeds] and [output]."""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

from .corpus import CorpusSplits, Vocabulary, encode, tokenize
from .model import ModelConfig
from .objective import ObjectiveConfig
from .trainer import TrainConfig

_SCHEMA: dict[str, dict[str, type]] = {
    "data": {"train": str, "dev": str, "test": str, "vocab": str, "lowercase": bool},
    "model": {"d_model": int, "n_layers": int, "n_heads": int, "d_ff": int,
              "max_seq_len": int, "dropout": float},
    "objective": {"regularizer": str, "beta": float, "label_smoothing": float,
                  "reg_mean_over_sequences": bool},
    "train": {"learning_rate": float, "adam_beta1": float, "adam_beta2": float,
              "adam_eps": float, "warmup_steps": int, "clip_norm": float,
              "max_updates": int, "dev_interval": int, "batch_tokens": int,
              "storage": str},
    "seeds": {"init": int, "data": int, "dropout": int},
    "output": {"dir": str},
}

_REQUIRED_PATHS = ("train", "dev", "test", "vocab")


@dataclass
class ExperimentConfig:
    model: ModelConfig
    train: TrainConfig
    data_paths: dict[str, Path]
    lowercase: bool
    out_dir: Path

    def load_vocab(self) -> Vocabulary:
        return Vocabulary.load(self.data_paths["vocab"])

    def load_splits(self, vocab: Vocabulary) -> CorpusSplits:
        def read(which: str):
            lines = self.data_paths[which].read_text(encoding="utf-8").splitlines()
            return [encode(tokenize(line, lowercase=self.lowercase), vocab) for line in lines]

        return CorpusSplits(train=read("train"), dev=read("dev"), test=read("test"),
                            seed=self.train.data_seed, ratios=(0.8, 0.1, 0.1))


def _coerce(section: str, key: str, raw: str):
    kind = _SCHEMA[section][key]
    if kind is bool:
        lowered = raw.strip().lower()
        if lowered in ("true", "yes", "1", "on"):
            return True
        if lowered in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"[{section}] {key}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ValueError(f"[{section}] {key}: expected {kind.__name__}, got {raw!r}") from None


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate an experiment file; every referenced data path must
    exist and unknown sections/keys are rejected."""
    path = Path(path)
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), strict=True)
    try:
        with open(path, encoding="utf-8") as f:
            parser.read_file(f)
    except configparser.Error as err:
        raise ValueError(f"{path}: malformed config file: {err}") from None

    values: dict[str, dict[str, object]] = {section: {} for section in _SCHEMA}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ValueError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ValueError(f"{path}: unknown key {key!r} in section [{section}]")
            values[section][key] = _coerce(section, key, raw)

    data = values["data"]
    for key in _REQUIRED_PATHS:
        if key not in data:
            raise ValueError(f"{path}: [data] must set {key}")
    base = path.parent
    data_paths = {}
    for key in _REQUIRED_PATHS:
        p = (base / str(data[key])).resolve() if not Path(str(data[key])).is_absolute() \
            else Path(str(data[key]))
        if not p.exists():
            raise ValueError(f"{path}: [data] {key} path does not exist: {p}")
        data_paths[key] = p

    vocab_size = len(data_paths["vocab"].read_text(encoding="utf-8").splitlines())
    model = ModelConfig(vocab_size=vocab_size, **values["model"])

    seeds = values["seeds"]
    objective = ObjectiveConfig(**values["objective"])
    train = TrainConfig(
        objective=objective,
        init_seed=int(seeds.get("init", 0)),
        data_seed=int(seeds.get("data", 0)),
        dropout_seed=int(seeds.get("dropout", 0)),
        **values["train"],
    )

    out_raw = str(values["output"].get("dir", "runs"))
    out_dir = (base / out_raw) if not Path(out_raw).is_absolute() else Path(out_raw)
    return ExperimentConfig(model=model, train=train, data_paths=data_paths,
                            lowercase=bool(data.get("lowercase", False)), out_dir=out_dir)
