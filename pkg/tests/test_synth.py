"""Synthetic registry generator and the null-regeneration path."""

import numpy as np
import pytest

from latmix import synth, training
from latmix.dataio import IngestRules, read_dataset, write_dataset
from latmix.errors import GenerationError, ValidationError
from latmix.mlmm import ModelSpec
from latmix.training import TrainConfig

RULES = IngestRules(min_switch_cohort=1)


class TestGenerateRegistry:
    def test_zero_switch_effect_recorded(self):
        cfg = synth.desk_config(n_patients=12, switch_effect=0.0, seed=0)
        _, truth, _ = synth.generate_registry(cfg, RULES)
        assert truth.switch_effect == 0.0

    def test_levels_respect_schemas(self):
        cfg = synth.desk_config(n_patients=15, seed=1)
        ds, _, _ = synth.generate_registry(cfg, RULES)
        ds.validate()  # raises on any range violation
        for name, schema in ds.schemas.items():
            width = sum(it.levels - 1 + int(it.has_flag) for it in schema.items)
            assert schema.encoded_width == width

    def test_every_visit_has_an_instrument(self):
        cfg = synth.desk_config(n_patients=15, seed=2)
        ds, _, _ = synth.generate_registry(cfg, RULES)
        for pat in ds.patients:
            for vi in range(pat.n_visits):
                assert pat.instruments_at(vi)

    def test_cohort_filters_enforced(self):
        cfg = synth.desk_config(n_patients=25, seed=3)
        ds, _, _ = synth.generate_registry(cfg, RULES)
        for pat in ds.patients:
            assert pat.n_visits >= 4
            assert np.sum(pat.visits < pat.t_switch) >= 2
            assert np.sum(pat.visits >= pat.t_switch) >= 2
            assert pat.t_switch - pat.visits[0] >= 0.5
            assert pat.visits[-1] - pat.t_switch >= 0.5

    def test_determinism_byte_identical_files(self, tmp_path):
        cfg = synth.desk_config(n_patients=10, seed=4)
        ds1, _, _ = synth.generate_registry(cfg, RULES)
        ds2, _, _ = synth.generate_registry(cfg, RULES)
        p1, p2 = tmp_path / "a.tsv", tmp_path / "b.tsv"
        write_dataset(ds1, p1)
        write_dataset(ds2, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truth_aligned_to_kept_visits(self):
        cfg = synth.desk_config(n_patients=20, seed=5)
        ds, truth, _ = synth.generate_registry(cfg, RULES)
        for pat in ds.patients:
            assert truth.latents[pat.pid].shape == (pat.n_visits, cfg.d_true)

    def test_no_ground_truth_in_dataset_file(self, tmp_path):
        cfg = synth.desk_config(n_patients=10, seed=6)
        ds, _, _ = synth.generate_registry(cfg, RULES)
        path = tmp_path / "ds.tsv"
        write_dataset(ds, path)
        text = path.read_text()
        for token in ("latent", "truth", "random_effect", "loading"):
            assert token not in text
        header_keys = [line[1:].split(" ")[0] for line in text.splitlines()[1:]
                       if line.startswith("#") and " " in line]
        assert set(header_keys) <= {"schema", "covariates", "treatments", "standardization"}

    def test_infeasible_config(self):
        cfg = synth.desk_config(n_patients=5, seed=7)
        with pytest.raises(GenerationError):
            # the default 10-patient treatment floor cannot be met with 5 patients
            synth.generate_registry(cfg, IngestRules(min_switch_cohort=10))

    @pytest.mark.slow
    def test_paper_scale_cohort_shape(self):
        cfg = synth.paper_scale_config(seed=0)
        ds, _, _ = synth.generate_registry(cfg)
        assert len(ds.patients) == 522
        visits = [p.n_visits for p in ds.patients]
        assert 14 <= np.median(visits) <= 20
        per_visit = [len(p.instruments_at(v)) for p in ds.patients for v in range(p.n_visits)]
        assert 1.9 <= np.mean(per_visit) <= 2.3


@pytest.fixture(scope="module")
def trained():
    cfg = synth.desk_config(n_patients=16, d_true=2, switch_effect=0.4, seed=8)
    ds, _, _ = synth.generate_registry(cfg, RULES)
    spec = ModelSpec(covariates=("sex", "sev"), treatments=("A",), age_interactions=False)
    tc = TrainConfig(d=2, epochs=3, vae_updates_per_epoch=15, hidden=(8,), seed=0)
    model = training.fit_joint(ds, spec, tc)
    return ds, model


class TestGenerateNull:

    def test_pattern_preserved(self, trained):
        ds, model = trained
        null = synth.generate_null_from_model(model, ds, np.random.default_rng(0))
        orig = {p.pid: p for p in ds.patients}
        assert len(null.patients) == len(ds.patients)
        for pat in null.patients:
            src = orig[pat.pid]
            np.testing.assert_array_equal(pat.visits, src.visits)
            assert set(pat.observations) == set(src.observations)
            assert pat.t_switch == src.t_switch
            assert pat.covariates == src.covariates

    def test_masks_shared_items_differ(self, trained):
        ds, model = trained
        n1 = synth.generate_null_from_model(model, ds, np.random.default_rng(1))
        n2 = synth.generate_null_from_model(model, ds, np.random.default_rng(2))
        same_levels = True
        for p1, p2 in zip(sorted(n1.patients, key=lambda p: p.pid),
                          sorted(n2.patients, key=lambda p: p.pid)):
            for key in p1.observations:
                np.testing.assert_array_equal(p1.observations[key].missing,
                                              p2.observations[key].missing)
                if not np.array_equal(p1.observations[key].levels,
                                      p2.observations[key].levels):
                    same_levels = False
        assert not same_levels

    def test_output_is_valid_dataset(self, trained):
        ds, model = trained
        null = synth.generate_null_from_model(model, ds, np.random.default_rng(3))
        null.validate()
