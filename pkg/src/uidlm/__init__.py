"""uidlm: train small autoregressive language models with surprisal-uniformity
regularizers and reproduce the associated measurement protocol."""

from .autodiff import Tensor, backward, gradient_check, no_grad
from .corpus import (
    CorpusSplits,
    MarkovSourceSpec,
    TokenSequence,
    Vocabulary,
    analytic_entropy_rate,
    build_vocab,
    decode,
    encode,
    generate_synthetic,
    make_batches,
    split_corpus,
    tokenize,
)
from .evaluation import (
    EvalReport,
    GenerationReport,
    ancestral_sample,
    estimate_entropy_mc,
    evaluate,
    mean_length,
    percent_unique_ngrams,
    perplexity_seq_avg,
    perplexity_token,
    uid_behavior,
)
from .model import (
    ModelConfig,
    Parameters,
    SurprisalVector,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    sequence_log_prob,
    surprisals,
)
from .objective import (
    LossBreakdown,
    ObjectiveConfig,
    combined_loss,
    label_smoothed_nll,
    local_consistency_reg,
    max_reg,
    nll,
    variance_reg,
)
from .stats import PairedScores, export_records, paired_permutation_test, percent_change
from .trainer import TrainConfig, TrainReport, optimizer_step, select_best, sweep_beta, train

__version__ = "0.1.0"
