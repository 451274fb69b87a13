"""Counterfactual designs, switch-effect read-out, and artificial-switch injection."""

import numpy as np
import pytest

from latmix import effects, synth, training
from latmix.dataio import Dataset, IngestRules, Observation, Patient
from latmix.effects import (aggregate_effects, counterfactual_design, effect_study,
                            inject_artificial_switch, switch_effect)
from latmix.errors import ValidationError
from latmix.mlmm import ModelSpec
from latmix.training import TrainConfig
from latmix.vae import InstrumentSchema, ItemSpec

RULES = IngestRules(min_switch_cohort=1)
SPEC = ModelSpec(covariates=("sex", "sev"), treatments=("A",), age_interactions=False)


def roomy_patient(visits=(0.0, 0.4, 1.0, 2.0), t_switch=1.0, levels=0):
    schema = InstrumentSchema("roomy", tuple(ItemSpec(6) for _ in range(4)))
    obs = {(i, "roomy"): Observation(np.full(4, levels, int), np.zeros(4, bool),
                                     np.zeros(4, bool))
           for i in range(len(visits))}
    pat = Patient("P0", 2.0, {}, t_switch, "A", np.asarray(visits, float), obs)
    return Dataset({"roomy": schema}, [pat], (), ("A",)), pat


@pytest.fixture(scope="module")
def trained_benchmark():
    cfg = synth.benchmark_config(n_patients=60, switch_effect=0.45, seed=41)
    ds, truth, _ = synth.generate_registry(cfg)
    tc = TrainConfig(d=2, epochs=6, vae_updates_per_epoch=50, hidden=(16,), seed=1, lr=3e-3)
    spec = ModelSpec(covariates=("sex", "sev"), treatments=("A",))
    model = training.fit_joint(ds, spec, tc)
    return ds, model


class TestCounterfactualDesign:
    STATS = {"age": (3.0, 2.0)}
    CF_SPEC = ModelSpec(covariates=(), treatments=("A",), age_interactions=True)

    def test_identical_at_switch_and_before(self):
        _, pat = roomy_patient()
        pair = counterfactual_design(pat, self.CF_SPEC, self.STATS, horizon=1.0)
        pre_rows = pair.factual.times <= pat.t_switch
        np.testing.assert_array_equal(pair.factual.X[pre_rows],
                                      pair.counterfactual.X[pre_rows])
        np.testing.assert_array_equal(pair.factual.T[pre_rows],
                                      pair.counterfactual.T[pre_rows])

    def test_counterfactual_switch_columns_zero(self):
        _, pat = roomy_patient()
        pair = counterfactual_design(pat, self.CF_SPEC, self.STATS, horizon=1.5)
        labels = self.CF_SPEC.fixed_labels()
        for i, lab in enumerate(labels):
            if "switch" in lab:
                assert (pair.counterfactual.X[:, i] == 0).all()
        assert (pair.counterfactual.T[:, 2] == 0).all()  # post-switch random slope

    def test_hand_computed_two_visit(self):
        schema = InstrumentSchema("one", (ItemSpec(3),))
        obs = {(i, "one"): Observation(np.zeros(1, int), np.zeros(1, bool), np.zeros(1, bool))
               for i in range(2)}
        pat = Patient("P0", 1.0, {}, 1.0, "A", np.array([0.0, 2.0]), obs)
        spec = ModelSpec(covariates=(), treatments=("A",), age_interactions=False,
                         include_age=False)
        pair = counterfactual_design(pat, spec, {}, horizon=1.0)
        # grid: 0.0, 2.0 and the horizon point 2.0 appended after the visits
        np.testing.assert_allclose(pair.factual.times, [0.0, 2.0, 2.0])
        assert pair.horizon_row == 2
        np.testing.assert_allclose(pair.factual.X, [[0.0], [1.0], [1.0]])
        np.testing.assert_allclose(pair.counterfactual.X, [[0.0], [0.0], [0.0]])
        np.testing.assert_allclose(pair.factual.T,
                                   [[1.0, -1.0, 0.0], [1.0, 0.0, 1.0], [1.0, 0.0, 1.0]])
        np.testing.assert_allclose(pair.counterfactual.T,
                                   [[1.0, -1.0, 0.0], [1.0, 1.0, 0.0], [1.0, 1.0, 0.0]])

    def test_requires_switch_and_positive_horizon(self):
        _, pat = roomy_patient(t_switch=np.inf)
        with pytest.raises(ValidationError):
            counterfactual_design(pat, self.CF_SPEC, self.STATS, 1.0)
        _, pat2 = roomy_patient()
        with pytest.raises(ValidationError):
            counterfactual_design(pat2, self.CF_SPEC, self.STATS, 0.0)

    def test_switch_after_last_visit_agrees_on_observed(self, trained_benchmark):
        """No post-switch data -> factual and counterfactual match at every visit."""
        ds, model = trained_benchmark
        pat = ds.patients[0]
        from dataclasses import replace
        shifted = replace(pat, t_switch=float(pat.visits[-1]) + 0.5)
        pair = counterfactual_design(shifted, model.spec, model.stats, horizon=2.0)
        obs_rows = np.arange(len(pair.factual.times) - 1)  # all but the horizon point
        np.testing.assert_allclose(pair.factual.X[obs_rows],
                                   pair.counterfactual.X[obs_rows], atol=1e-12)
        np.testing.assert_allclose(pair.factual.T[obs_rows],
                                   pair.counterfactual.T[obs_rows], atol=1e-12)


class TestSwitchEffect:
    def test_zero_when_switch_coefficients_vanish(self, trained_benchmark):
        ds, model = trained_benchmark
        from dataclasses import replace as drep
        B0 = model.mm.B.copy()
        for i, lab in enumerate(model.fixed_labels):
            if "switch" in lab:
                B0[i, :] = 0.0
        mm0 = drep(model.mm, B=B0)
        blups0 = {pid: u.copy() for pid, u in model.blups.items()}
        # pre-slope must vanish too: the counterfactual extends it past the switch
        for label in ("re:post_switch", "re:pre_switch"):
            row = model.spec.random_labels().index(label)
            for u in blups0.values():
                u[row, :] = 0.0
        model0 = drep(model, mm=mm0, blups=blups0)
        pat = ds.patients[0]
        diffs = switch_effect(model0, pat, horizon=1.0)
        for arr in diffs.values():
            np.testing.assert_allclose(arr, 0.0, atol=1e-12)

    def test_positive_on_benchmark_with_true_effect(self, trained_benchmark):
        ds, model = trained_benchmark
        sums = {name: [] for name in ds.schemas}
        for pat in ds.patients:
            diffs = switch_effect(model, pat, horizon=1.0)
            for name, arr in diffs.items():
                official = np.array([it.official for it in ds.schemas[name].items])
                sums[name].append(arr[official].sum())
        for name, vals in sums.items():
            assert np.mean(vals) > 0.0

    def test_bounded_by_instrument_range(self, trained_benchmark):
        ds, model = trained_benchmark
        for pat in ds.patients[:5]:
            diffs = switch_effect(model, pat, horizon=1.0)
            for name, arr in diffs.items():
                max_levels = np.array([it.levels - 1 for it in ds.schemas[name].items])
                assert (np.abs(arr) <= max_levels).all()


class TestAggregateEffects:
    SCHEMAS = {"a": InstrumentSchema("a", (ItemSpec(3), ItemSpec(4)))}

    def test_single_patient_single_seed(self):
        per_seed = [{"p1": {"a": np.array([0.5, 1.0])}}]
        rep = aggregate_effects(per_seed, self.SCHEMAS, horizon=1.0)
        e = rep.instruments["a"]
        assert e.mean == pytest.approx(1.5)
        assert e.sd == 0.0
        np.testing.assert_allclose(e.item_means, [0.5, 1.0])

    def test_two_seed_arithmetic(self):
        per_seed = [{"p1": {"a": np.array([1.0, 0.0])}},
                    {"p1": {"a": np.array([2.0, 0.0])}}]
        rep = aggregate_effects(per_seed, self.SCHEMAS, horizon=1.0)
        e = rep.instruments["a"]
        assert e.mean == pytest.approx(1.5)
        assert e.sd == pytest.approx(0.7071, abs=1e-4)
        assert e.percent_of_max == pytest.approx(100.0 * 1.5 / 5.0)

    def test_sign_stability_flag(self):
        per_seed = [{"p1": {"a": np.array([1.0, 0.0])}},
                    {"p1": {"a": np.array([-0.5, 0.0])}}]
        rep = aggregate_effects(per_seed, self.SCHEMAS, horizon=1.0)
        assert not rep.instruments["a"].sign_stable


class TestInjectArtificialSwitch:
    def test_pre_switch_untouched(self):
        ds, pat = roomy_patient()
        out, _ = inject_artificial_switch(ds, rng=np.random.default_rng(0))
        for vi, t in enumerate(pat.visits):
            if t <= pat.t_switch:
                np.testing.assert_array_equal(
                    out.patients[0].observations[(vi, "roomy")].levels,
                    pat.observations[(vi, "roomy")].levels)

    def test_plus_two_at_one_year(self):
        ds, pat = roomy_patient()
        out, diag = inject_artificial_switch(ds, rate=1, period=0.5,
                                             rng=np.random.default_rng(0))
        one_year = out.patients[0].observations[(3, "roomy")]
        assert one_year.levels.sum() == 2
        assert diag["points_dropped_at_ceiling"] == 0

    def test_all_items_maxed(self):
        ds, pat = roomy_patient(levels=5)  # every item at its top level
        out, diag = inject_artificial_switch(ds, rng=np.random.default_rng(0))
        np.testing.assert_array_equal(out.patients[0].observations[(3, "roomy")].levels,
                                      pat.observations[(3, "roomy")].levels)
        assert diag["points_dropped_at_ceiling"] > 0

    def test_ceiling_never_exceeded(self):
        cfg = synth.desk_config(n_patients=12, switch_effect=0.0, seed=17)
        ds, _, _ = synth.generate_registry(cfg, RULES)
        out, _ = inject_artificial_switch(ds, rate=2, period=0.25,
                                          rng=np.random.default_rng(3))
        for pat in out.patients:
            for (vi, name), obs in pat.observations.items():
                max_levels = np.array([it.levels - 1 for it in ds.schemas[name].items])
                assert (obs.levels <= max_levels).all()
                assert (obs.levels >= 0).all()

    def test_same_item_keeps_point_across_visits(self):
        ds, pat = roomy_patient(visits=(0.0, 2.0, 2.6), t_switch=1.0)
        out, _ = inject_artificial_switch(ds, rng=np.random.default_rng(4))
        first = out.patients[0].observations[(1, "roomy")].levels   # dt=1.0 -> +2
        second = out.patients[0].observations[(2, "roomy")].levels  # dt=1.6 -> +3
        assert first.sum() == 2 and second.sum() == 3
        # the two points from the first post-switch visit persist at the next one
        assert (second >= first).all()


class TestEffectStudy:
    def test_two_seed_smoke(self):
        cfg = synth.desk_config(n_patients=16, d_true=2, switch_effect=0.3, seed=19)
        ds, _, _ = synth.generate_registry(cfg, RULES)
        tc = TrainConfig(d=2, epochs=2, vae_updates_per_epoch=10, hidden=(8,), seed=0)
        rep = effect_study(ds, SPEC, tc, horizon=1.0, n_seeds=2, seed=5)
        assert rep.n_seeds == 2
        assert rep.n_patients == len(ds.patients)
        for e in rep.instruments.values():
            assert np.isfinite(e.mean) and np.isfinite(e.sd)
