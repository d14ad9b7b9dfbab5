"""Stepwise AIC selection and Wald pruning tests.

The Monte Carlo rates here follow from chi-square theory: a pure-noise
candidate improves AIC exactly when its likelihood-ratio statistic exceeds 2,
so it is excluded with probability P(chi2_1 <= 2) ~= 0.843, and a Wald test
at alpha=0.05 drops a null covariate with probability ~0.95. The seed bounds
below are +-3 sigma binomial bands around those rates.
"""

import numpy as np
import pytest

from heckmi.data import Dataset, DesignSpec, Variable, VariableSchema
from heckmi.errors import DataError
from heckmi.stats import RngStream
from heckmi.stepwise import StepTrace, prune_insignificant, stepwise_aic

SCHEMA = VariableSchema([
    Variable("y", "continuous", role="outcome"),
    Variable("x1", "continuous"),
    Variable("x2", "continuous"),
    Variable("g", "categorical"),
])


def sim_dataset(n, seed, beta1=2.0, shifts=(0.0, 1.5, -1.0), miss=True):
    gen = RngStream(seed).generator()
    x1 = gen.normal(0, 1, n)
    x2 = gen.normal(0, 1, n)
    g = np.array(["a", "b", "c"])[gen.integers(0, 3, n)]
    shift = np.select([g == "a", g == "b", g == "c"], shifts)
    if miss:
        r = 0.3 + 0.8 * x1 + gen.normal(0, 1, n) >= 0
    else:
        r = np.ones(n, dtype=bool)
    y = np.where(r, 1.0 + beta1 * x1 + shift + gen.normal(0, 1, n), np.nan)
    return Dataset(SCHEMA, {"y": y, "x1": x1, "x2": x2, "g": g})


class TestStepwiseAic:
    def test_signal_covariates_selected_noise_left_out(self):
        ds = sim_dataset(10_000, 11)
        trace = stepwise_aic(ds, ("x1", "x2", "g"), "linear")
        assert trace.final_spec == ("g", "x1")
        assert [(s.action, s.covariate) for s in trace.steps] == [
            ("add", "x1"), ("add", "g")]

    def test_probit_equation_uses_observedness(self):
        ds = sim_dataset(10_000, 12)
        trace = stepwise_aic(ds, ("x1", "x2"), "probit")
        assert trace.final_spec == ("x1",)

    def test_accepted_steps_strictly_decrease_aic(self):
        ds = sim_dataset(5_000, 13)
        trace = stepwise_aic(ds, ("x1", "x2", "g"), "linear")
        assert len(trace.steps) >= 1
        for step in trace.steps:
            assert step.aic_after < step.aic_before
        for prev, nxt in zip(trace.steps, trace.steps[1:]):
            assert nxt.aic_before == prev.aic_after
        assert trace.final_aic == trace.steps[-1].aic_after

    def test_removal_direction_from_full_start(self):
        ds = sim_dataset(10_000, 14)
        trace = stepwise_aic(ds, ("x1", "x2", "g"), "linear",
                             start=("g", "x1", "x2"))
        assert trace.final_spec == ("g", "x1")
        assert [(s.action, s.covariate) for s in trace.steps] == [
            ("remove", "x2")]

    def test_start_outside_candidates_can_be_removed(self):
        ds = sim_dataset(10_000, 15)
        trace = stepwise_aic(ds, ("x1",), "linear", start=("x2",))
        assert trace.final_spec == ("x1",)
        actions = {(s.action, s.covariate) for s in trace.steps}
        assert ("remove", "x2") in actions

    def test_no_improving_move_gives_empty_trace(self):
        ds = sim_dataset(10_000, 16, shifts=(0.0, 0.0, 0.0))
        trace = stepwise_aic(ds, ("x1",), "linear", start=("x1",))
        assert trace.steps == []
        assert trace.final_spec == ("x1",)

    def test_candidate_order_does_not_matter(self):
        ds = sim_dataset(5_000, 17)
        a = stepwise_aic(ds, ("x1", "x2", "g"), "linear")
        b = stepwise_aic(ds, ("g", "x2", "x1"), "linear")
        assert a.final_spec == b.final_spec
        assert [(s.action, s.covariate) for s in a.steps] == \
               [(s.action, s.covariate) for s in b.steps]

    def test_exact_tie_breaks_lexicographically(self):
        # two candidates carrying identical columns tie exactly on AIC; the
        # lexicographically first wins and the duplicate is then skipped as
        # collinear
        schema = VariableSchema([
            Variable("y", "continuous", role="outcome"),
            Variable("a", "continuous"),
            Variable("b", "continuous"),
        ])
        gen = RngStream(18).generator()
        x = gen.normal(0, 1, 500)
        y = 1.0 + x + 0.5 * gen.normal(0, 1, 500)
        ds = Dataset(schema, {"y": y, "a": x, "b": x})
        trace = stepwise_aic(ds, ("b", "a"), "linear")
        assert trace.final_spec == ("a",)
        assert [(s.action, s.covariate) for s in trace.steps] == [("add", "a")]

    def test_categorical_enters_as_one_block(self):
        ds = sim_dataset(5_000, 19, beta1=0.0)
        trace = stepwise_aic(ds, ("g",), "linear")
        assert trace.final_spec == ("g",)
        assert len([s for s in trace.steps if s.covariate == "g"]) == 1

    def test_noise_candidate_excluded_at_chi_square_rate(self):
        # Bernoulli(0.843) over 100 seeds; +-3 sigma is roughly [73, 95]
        excluded = 0
        for seed in range(100):
            ds = sim_dataset(10_000, 4200 + seed, beta1=0.0,
                             shifts=(0.0, 0.0, 0.0), miss=False)
            trace = stepwise_aic(ds, ("x2",), "linear")
            excluded += "x2" not in trace.final_spec
        assert 72 <= excluded <= 95, f"excluded {excluded}/100"

    def test_real_signal_always_selected(self):
        for seed in range(20):
            ds = sim_dataset(10_000, 4400 + seed, beta1=1.0, miss=False)
            trace = stepwise_aic(ds, ("x1",), "linear")
            assert "x1" in trace.final_spec

    def test_empty_candidates_rejected(self):
        ds = sim_dataset(200, 20)
        with pytest.raises(DataError):
            stepwise_aic(ds, (), "linear")

    def test_unknown_model_rejected(self):
        ds = sim_dataset(200, 21)
        with pytest.raises(DataError):
            stepwise_aic(ds, ("x1",), "logit")

    def test_unfittable_start_propagates(self):
        # every row observed makes the probit response single-class
        ds = sim_dataset(200, 22, miss=False)
        with pytest.raises(DataError):
            stepwise_aic(ds, ("x1",), "probit")

    def test_linear_scope_with_missing_outcome_rejected(self):
        ds = sim_dataset(500, 23)
        with pytest.raises(DataError):
            stepwise_aic(ds, ("x1",), "linear", scope=np.arange(ds.n))

    def test_explicit_scope_matches_default(self):
        ds = sim_dataset(2_000, 24)
        a = stepwise_aic(ds, ("x1", "x2"), "linear")
        b = stepwise_aic(ds, ("x1", "x2"), "linear", scope=ds.observed)
        assert a.final_spec == b.final_spec
        assert a.final_aic == b.final_aic

    def test_returns_trace_type(self):
        ds = sim_dataset(500, 25)
        assert isinstance(stepwise_aic(ds, ("x1",), "linear"), StepTrace)


class TestPruneInsignificant:
    def test_all_significant_unchanged(self):
        ds = sim_dataset(10_000, 31)
        spec = DesignSpec(("x1", "g"), ("x1",))
        out = prune_insignificant(ds, spec, "linear")
        assert out.outcome_covariates == ("x1", "g")
        assert out.selection_covariates == ("x1",)

    def test_noise_dropped_at_wald_rate(self):
        # a null covariate survives only when its p-value falls below alpha,
        # so it is dropped in ~95 of 100 seeds
        dropped = 0
        for seed in range(100):
            ds = sim_dataset(10_000, 4300 + seed, miss=False)
            spec = DesignSpec(("x1", "x2"), ("x1",))
            out = prune_insignificant(ds, spec, "linear")
            dropped += "x2" not in out.outcome_covariates
        assert dropped >= 90, f"dropped {dropped}/100"

    def test_alpha_one_keeps_everything(self):
        ds = sim_dataset(2_000, 32)
        spec = DesignSpec(("x1", "x2", "g"), ("x1",))
        out = prune_insignificant(ds, spec, "linear", alpha=1.0)
        assert out.outcome_covariates == spec.outcome_covariates

    def test_probit_equation_pruned(self):
        ds = sim_dataset(10_000, 33)
        spec = DesignSpec(("x1",), ("x1", "x2"))
        out = prune_insignificant(ds, spec, "probit")
        assert out.selection_covariates == ("x1",)
        assert out.outcome_covariates == ("x1",)

    def test_noise_categorical_dropped_as_block(self):
        ds = sim_dataset(10_000, 34, shifts=(0.0, 0.0, 0.0))
        spec = DesignSpec(("x1", "g"), ("x1",))
        out = prune_insignificant(ds, spec, "linear")
        assert out.outcome_covariates == ("x1",)

    def test_iterative_removal_of_two_noise_covariates(self):
        ds = sim_dataset(10_000, 35, shifts=(0.0, 0.0, 0.0))
        spec = DesignSpec(("x1", "x2", "g"), ("x1",))
        out = prune_insignificant(ds, spec, "linear")
        assert out.outcome_covariates == ("x1",)

    def test_everything_can_be_pruned(self):
        ds = sim_dataset(10_000, 36, beta1=0.0, shifts=(0.0, 0.0, 0.0))
        spec = DesignSpec(("x1", "x2"), ("x1",))
        out = prune_insignificant(ds, spec, "linear")
        assert out.outcome_covariates == ()

    def test_invalid_alpha_rejected(self):
        ds = sim_dataset(200, 37)
        spec = DesignSpec(("x1",), ("x1",))
        for alpha in (0.0, -0.1, 1.5):
            with pytest.raises(DataError):
                prune_insignificant(ds, spec, "linear", alpha=alpha)
