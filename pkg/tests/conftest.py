import numpy as np
import pytest

from uidlm import corpus as cp
from uidlm import model as md

NEG = -1e9  # logit low enough that softmax mass underflows to exactly zero


def make_config(**overrides):
    base = dict(vocab_size=8, d_model=8, n_layers=1, n_heads=2, d_ff=16,
                max_seq_len=16, dropout=0.0, init_seed=0)
    base.update(overrides)
    return md.ModelConfig(**base)


def zeroed_params(config, dtype=np.float64):
    params = md.init_params(config, seed=0, dtype=dtype)
    for _, tensor in params.items():
        tensor.data[:] = 0.0
    return params


def constant_conditional_params(probs, dtype=np.float64, **config_overrides):
    """Context-ignoring model: every conditional equals softmax(head bias).

    probs maps token id -> probability; ids absent from the map get exactly
    zero mass.  All other weights are zero, so the bias is the whole model.
    """
    probs = dict(probs)
    vocab_size = config_overrides.pop("vocab_size", max(probs) + 1)
    config = make_config(vocab_size=vocab_size, **config_overrides)
    params = zeroed_params(config, dtype=dtype)
    bias = np.full(config.vocab_size, NEG, dtype=dtype)
    for token_id, p in probs.items():
        bias[token_id] = np.log(p)
    params["head.b"].data[:] = bias
    return params


def make_sequence(*content_ids):
    return cp.TokenSequence((cp.BOS_ID, *content_ids, cp.EOS_ID))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
