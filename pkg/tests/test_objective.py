import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uidlm import autodiff as ad
from uidlm import corpus as cp
from uidlm import model as md
from uidlm import objective as ob

from conftest import constant_conditional_params, make_config, make_sequence

surprisal_vectors = st.lists(st.floats(0.0, 30.0), min_size=1, max_size=24).map(np.array)


class TestVarianceReg:
    def test_uniform_surprisal_is_zero(self):
        assert ob.variance_reg([2.0, 2.0, 2.0]) == 0.0

    def test_two_point_cases(self):
        assert ob.variance_reg([1.0, 3.0]) == pytest.approx(1.0, abs=1e-12)
        assert ob.variance_reg([0.0, 6.0]) == pytest.approx(9.0, abs=1e-12)

    def test_single_token_is_zero(self):
        assert ob.variance_reg([4.2]) == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            ob.variance_reg([])


class TestLocalConsistencyReg:
    def test_uniform_surprisal_is_zero(self):
        assert ob.local_consistency_reg([2.0, 2.0, 2.0]) == 0.0

    def test_alternating_case(self):
        # ((1-3)^2 + (3-1)^2) / 2 = 4
        assert ob.local_consistency_reg([1.0, 3.0, 1.0]) == pytest.approx(4.0, abs=1e-12)

    def test_single_pair(self):
        assert ob.local_consistency_reg([0.0, 2.0]) == pytest.approx(4.0, abs=1e-12)

    def test_single_token_is_zero_by_convention(self):
        assert ob.local_consistency_reg([7.0]) == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            ob.local_consistency_reg([])


class TestMaxReg:
    def test_simple_max(self):
        assert ob.max_reg([1.0, 3.0, 2.0]) == 3.0

    def test_constant_vector(self):
        assert ob.max_reg([2.5, 2.5]) == 2.5

    def test_matches_linear_scan_oracle(self, rng):
        for _ in range(50):
            u = rng.uniform(0, 10, size=rng.integers(1, 30))
            best = u[0]
            for x in u[1:]:
                if x > best:
                    best = x
            assert ob.max_reg(u) == best


class TestRegularizerProperties:
    @settings(max_examples=100, deadline=None)
    @given(surprisal_vectors, st.floats(-10, 10))
    def test_shift_invariance_and_max_shift(self, u, c):
        assert ob.variance_reg(u + c) == pytest.approx(ob.variance_reg(u), abs=1e-8)
        assert ob.local_consistency_reg(u + c) == pytest.approx(
            ob.local_consistency_reg(u), abs=1e-8)
        assert ob.max_reg(u + c) == pytest.approx(ob.max_reg(u) + c, abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(surprisal_vectors, st.floats(0.0, 8.0))
    def test_scale_property(self, u, c):
        assert ob.variance_reg(c * u) == pytest.approx(c * c * ob.variance_reg(u), rel=1e-9, abs=1e-9)
        assert ob.local_consistency_reg(c * u) == pytest.approx(
            c * c * ob.local_consistency_reg(u), rel=1e-9, abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(surprisal_vectors)
    def test_nonnegative_and_zero_iff_constant(self, u):
        v, lc = ob.variance_reg(u), ob.local_consistency_reg(u)
        assert v >= 0.0 and lc >= 0.0
        if np.all(u == u[0]):
            assert v == 0.0 and lc == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.0, 30.0), min_size=2, max_size=24).map(np.array))
    def test_local_consistency_bounded_by_variance(self, u):
        # (u_t - u_{t+1})^2 <= 2 (u_t - mu)^2 + 2 (u_{t+1} - mu)^2
        n = len(u)
        bound = 4.0 * n / (n - 1) * ob.variance_reg(u)
        assert ob.local_consistency_reg(u) <= bound + 1e-9


class TestNll:
    def test_single_sequence(self):
        assert ob.nll([[np.log(4), np.log(4)]]) == pytest.approx(2 * np.log(4), abs=1e-12)

    def test_additivity(self):
        u = np.array([0.3, 1.2, 0.7])
        assert ob.nll([u, u]) == pytest.approx(2 * ob.nll([u]), abs=1e-12)

    def test_matches_per_token_summation_oracle(self, rng):
        vectors = [rng.uniform(0, 5, size=rng.integers(1, 9)) for _ in range(20)]
        expected = 0.0
        for v in vectors:
            for x in v:
                expected += x
        assert ob.nll(vectors) == pytest.approx(expected, abs=1e-9)


class TestLabelSmoothedNll:
    def logp_table(self, rng, positions=5, vocab=6):
        logits = rng.normal(size=(positions, vocab))
        return logits - np.log(np.exp(logits).sum(-1, keepdims=True)) - logits.max() * 0

    def test_alpha_zero_reduces_to_nll(self, rng):
        lp = self.logp_table(rng)
        targets = rng.integers(0, 6, size=5)
        u = -np.take_along_axis(lp, targets[:, None], axis=-1)[:, 0]
        assert ob.label_smoothed_nll(lp, targets, 0.0) == ob.nll([u])

    def test_uniform_model_any_alpha(self):
        vocab = 5
        lp = np.full((4, vocab), -np.log(vocab))
        targets = np.array([0, 1, 2, 3])
        for alpha in (0.0, 0.1, 0.5):
            assert ob.label_smoothed_nll(lp, targets, alpha) == pytest.approx(
                4 * np.log(vocab), abs=1e-12)

    def test_fixed_toy_against_direct_formula(self):
        lp = np.log(np.array([[0.7, 0.2, 0.1], [0.25, 0.5, 0.25]]))
        targets = np.array([0, 1])
        alpha = 0.1
        expected = 0.0
        for pos, tgt in enumerate(targets):
            expected += (1 - alpha) * -lp[pos, tgt] + alpha * np.mean(-lp[pos])
        assert ob.label_smoothed_nll(lp, targets, alpha) == pytest.approx(expected, abs=1e-12)

    def test_affine_in_alpha_with_known_slope(self, rng):
        lp = self.logp_table(rng)
        targets = rng.integers(0, 6, size=5)
        at0 = ob.label_smoothed_nll(lp, targets, 0.0)
        picked = np.take_along_axis(lp, targets[:, None], axis=-1)[:, 0]
        slope = float((-lp.mean(axis=-1) + picked).sum())  # mean surprisal - target surprisal
        for alpha in (0.05, 0.2, 0.6):
            assert ob.label_smoothed_nll(lp, targets, alpha) == pytest.approx(
                at0 + alpha * slope, abs=1e-9)

    def test_alpha_validation(self):
        with pytest.raises(ValueError):
            ob.label_smoothed_nll(np.zeros((1, 2)), np.array([0]), 1.0)


def toy_batch_and_params():
    """Context-free model whose surprisals on [BOS, 4, EOS] are exactly [1, 3]."""
    p_token, p_eos = np.exp(-1.0), np.exp(-3.0)
    params = constant_conditional_params(
        {4: p_token, cp.EOS_ID: p_eos, 5: 1.0 - p_token - p_eos}, vocab_size=8)
    batch = cp.Batch.from_sequences([make_sequence(4)], [0])
    return params, batch


class TestCombinedLoss:
    def test_beta_zero_combined_equals_nll(self):
        params, batch = toy_batch_and_params()
        cfg = ob.ObjectiveConfig(regularizer="variance", beta=0.0)
        breakdown, root = ob.combined_loss(params, batch, cfg)
        assert breakdown.combined == breakdown.nll_sum
        assert float(root.data) == breakdown.nll_sum

    def test_variance_unit_case(self):
        # u = [1, 3]: nll 4, variance 1, combined 5 at beta = 1
        params, batch = toy_batch_and_params()
        cfg = ob.ObjectiveConfig(regularizer="variance", beta=1.0)
        breakdown, _ = ob.combined_loss(params, batch, cfg)
        assert breakdown.nll_sum == pytest.approx(4.0, abs=1e-9)
        assert breakdown.reg_sum == pytest.approx(1.0, abs=1e-9)
        assert breakdown.combined == pytest.approx(5.0, abs=1e-9)
        assert breakdown.token_count == 2 and breakdown.sequence_count == 1

    def test_negative_beta_lowers_combined(self):
        params, batch = toy_batch_and_params()
        cfg = ob.ObjectiveConfig(regularizer="variance", beta=-0.01)
        breakdown, _ = ob.combined_loss(params, batch, cfg)
        assert breakdown.reg_sum > 0
        assert breakdown.combined < breakdown.nll_sum

    def test_breakdown_identity_holds(self, rng):
        params = md.init_params(make_config(), seed=1, dtype=np.float64)
        batch = cp.Batch.from_sequences(
            [make_sequence(4, 5, 6), make_sequence(7)], [0, 1])
        for kind in ("variance", "local_consistency", "max"):
            cfg = ob.ObjectiveConfig(regularizer=kind, beta=0.37)
            breakdown, _ = ob.combined_loss(params, batch, cfg)
            assert breakdown.combined == pytest.approx(
                breakdown.nll_sum + 0.37 * breakdown.reg_sum, rel=1e-9)

    def test_graph_regularizer_matches_vector_functions(self):
        params = md.init_params(make_config(), seed=2, dtype=np.float64)
        seqs = [make_sequence(4, 5, 6, 7), make_sequence(5), make_sequence(6, 6)]
        batch = cp.Batch.from_sequences(seqs, [0, 1, 2])
        u_vectors = [md.surprisals(params, s).u for s in seqs]
        by_kind = {
            "variance": ob.variance_reg,
            "local_consistency": ob.local_consistency_reg,
            "max": ob.max_reg,
        }
        for kind, fn in by_kind.items():
            got = ob.per_sequence_regularizer_values(params, batch, kind)
            expected = [fn(u) for u in u_vectors]
            assert got == pytest.approx(expected, abs=1e-9)

    def test_mean_over_sequences_flag(self):
        params = md.init_params(make_config(), seed=3, dtype=np.float64)
        batch = cp.Batch.from_sequences(
            [make_sequence(4, 5), make_sequence(6, 7, 5)], [0, 1])
        summed, _ = ob.combined_loss(
            params, batch, ob.ObjectiveConfig(regularizer="variance", beta=1.0))
        averaged, _ = ob.combined_loss(
            params, batch,
            ob.ObjectiveConfig(regularizer="variance", beta=1.0, reg_mean_over_sequences=True))
        assert averaged.reg_sum == pytest.approx(summed.reg_sum / 2, rel=1e-12)

    def test_label_smoothed_batch_matches_direct_formula(self):
        params = md.init_params(make_config(), seed=4, dtype=np.float64)
        s = make_sequence(4, 5, 6)
        batch = cp.Batch.from_sequences([s], [0])
        cfg = ob.ObjectiveConfig(label_smoothing=0.1)
        breakdown, _ = ob.combined_loss(params, batch, cfg)
        with ad.no_grad():
            lp = md.forward(params, batch).data[0]
        expected = ob.label_smoothed_nll(lp, np.array(s.ids[1:]), 0.1)
        assert breakdown.nll_sum == pytest.approx(expected, abs=1e-9)

    def test_nan_loss_aborts_with_batch_diagnostic(self):
        params, batch = toy_batch_and_params()
        params["head.b"].data[0] = np.nan
        cfg = ob.ObjectiveConfig(regularizer="variance", beta=1.0)
        with pytest.raises(RuntimeError, match="batch"):
            ob.combined_loss(params, batch, cfg, batch_label="batch 17")

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            ob.ObjectiveConfig(regularizer="entropy")


class TestCombinedLossGradients:
    """Gradient of the combined objective against central differences."""

    def check(self, objective_cfg, tol=1e-4):
        cfg = make_config(vocab_size=8, d_model=8, n_layers=1, n_heads=2, d_ff=12,
                          max_seq_len=8)
        params = md.init_params(cfg, seed=5, dtype=np.float64)
        batch = cp.Batch.from_sequences(
            [make_sequence(4, 5, 6), make_sequence(7, 7)], [0, 1])
        names = params.names()

        def fn(leaves):
            rebuilt = md.Parameters(
                cfg, {n: leaf for n, leaf in zip(names, leaves)})
            for leaf in leaves:
                leaf.requires_grad = True
            _, root = ob.combined_loss(rebuilt, batch, objective_cfg)
            return root

        point = [params[n].data for n in names]
        err = ad.gradient_check(fn, point, step=1e-4)
        assert err <= tol, f"{objective_cfg.regularizer}: max rel error {err:.2e}"

    @pytest.mark.parametrize("kind", ["none", "variance", "local_consistency", "max"])
    def test_each_regularizer_kind(self, kind):
        self.check(ob.ObjectiveConfig(regularizer=kind, beta=0.5))

    def test_label_smoothing_gradient(self):
        self.check(ob.ObjectiveConfig(label_smoothing=0.1))
