import numpy as np
import pytest
from scipy.special import expit
from scipy.stats import chisquare

from plasmodesim.datamodel import GENERATE_TREATMENT, IDENTITY, LOGIT, SAMPLE_TREATMENT, ModelSpec
from plasmodesim.dgm import generate_source, get_scenario
from plasmodesim.plasmode import (FITTED_ON_SOURCE, TRUE_MODEL, PlasmodeConfig,
                                  draw_generate_treatment, draw_replicate, draw_sample_treatment,
                                  resolve_generation_models)

from conftest import as_source, make_dataset

Y_EQUALS_A = ModelSpec.from_mapping(0.0, {"A": 1.0}, IDENTITY, 0.0)


@pytest.fixture(scope="module")
def s1_source():
    return generate_source(get_scenario("S1"), 1000, 17)


def test_sample_treatment_pairs_exist_in_source(s1_source, rng):
    d, idx = draw_sample_treatment(s1_source, Y_EQUALS_A, rng, return_index=True)
    src = s1_source.data
    assert np.array_equal(d.w, src.w[idx]) and np.array_equal(d.a, src.a[idx])
    assert np.array_equal(d.y, d.a)


def test_sample_treatment_all_treated_stays_treated(rng):
    src = as_source(make_dataset(np.arange(6.0), np.ones(6), np.zeros(6)))
    d = draw_sample_treatment(src, Y_EQUALS_A, rng)
    assert np.all(d.a == 1)


def test_generate_treatment_intercept_only(s1_source, rng):
    d = draw_generate_treatment(s1_source, ModelSpec(0.0, (), LOGIT), Y_EQUALS_A, rng,
                                replicate_size=10_000)
    assert abs(d.a.mean() - 0.5) <= 0.02
    d = draw_generate_treatment(s1_source, ModelSpec(30.0, (), LOGIT), Y_EQUALS_A, rng)
    assert np.all(d.a == 1)


def test_generate_treatment_row_frequencies():
    w = np.array([-2.0, -0.5, 0.0, 0.7, 1.9])
    src = as_source(make_dataset(w, np.zeros(5), np.zeros(5), columns=("W1",)))
    ps = ModelSpec.from_mapping(0.2, {"W1": 1.1}, LOGIT)
    rng = np.random.default_rng(2024)
    d, idx = draw_generate_treatment(src, ps, Y_EQUALS_A, rng, replicate_size=500_000,
                                     return_index=True)
    for i in range(5):
        freq = d.a[idx == i].mean()
        assert abs(freq - expit(0.2 + 1.1 * w[i])) <= 0.005


def test_sample_treatment_positivity_violation(s1_source, rng):
    d, idx = draw_sample_treatment(s1_source, get_scenario("S1").outcome_model, rng,
                                   return_index=True)
    for i in np.unique(idx):
        assert np.unique(d.a[idx == i]).size == 1


def test_generate_treatment_restores_positivity():
    spec = get_scenario("S1")
    src = generate_source(spec, 100, 5)
    seen = np.zeros((100, 2), dtype=bool)
    rng = np.random.default_rng(8)
    for _ in range(1000):
        d, idx = draw_generate_treatment(src, spec.ps_model, spec.outcome_model, rng,
                                         return_index=True)
        seen[idx, d.a.astype(int)] = True
    assert seen.all()


def test_covariate_marginal_preserved(s1_source):
    counts = {SAMPLE_TREATMENT: np.zeros(1000), GENERATE_TREATMENT: np.zeros(1000)}
    spec = get_scenario("S1")
    rng = np.random.default_rng(3)
    for _ in range(200):
        _, i1 = draw_sample_treatment(s1_source, spec.outcome_model, rng, return_index=True)
        _, i2 = draw_generate_treatment(s1_source, spec.ps_model, spec.outcome_model, rng,
                                        return_index=True)
        np.add.at(counts[SAMPLE_TREATMENT], i1, 1)
        np.add.at(counts[GENERATE_TREATMENT], i2, 1)
    for c in counts.values():
        assert chisquare(c).pvalue > 1e-4


@pytest.mark.parametrize("sid", ["S1", "S2", "S3"])
def test_treatment_covariate_correlation_preserved(sid):
    spec = get_scenario(sid)
    src = generate_source(spec, 1000, 21)
    models = resolve_generation_models(spec, src, PlasmodeConfig(GENERATE_TREATMENT))
    rng = np.random.default_rng(5)
    corr = {SAMPLE_TREATMENT: [], GENERATE_TREATMENT: []}
    for _ in range(500):
        for fw in corr:
            d = draw_replicate(src, models, PlasmodeConfig(fw), rng)
            corr[fw].append([np.corrcoef(d.a, d.w[:, j])[0, 1] for j in range(d.w.shape[1])])
    gap = np.abs(np.mean(corr[SAMPLE_TREATMENT], 0) - np.mean(corr[GENERATE_TREATMENT], 0))
    assert np.all(gap <= 0.02)


def test_generation_model_resolution(s1_source):
    spec = get_scenario("S1")
    fitted = resolve_generation_models(spec, s1_source, PlasmodeConfig())
    assert fitted.ps_model != spec.ps_model
    assert fitted.outcome_model is spec.outcome_model
    true = resolve_generation_models(spec, s1_source,
                                     PlasmodeConfig(ps_for_generation=TRUE_MODEL))
    assert true.ps_model is spec.ps_model
    both = resolve_generation_models(spec, s1_source,
                                     PlasmodeConfig(outcome_for_generation=FITTED_ON_SOURCE))
    assert both.outcome_model.noise_sd == 1.0
    assert both.outcome_model.coefficient("A") == pytest.approx(2.0, abs=0.2)


def test_config_validation():
    with pytest.raises(ValueError):
        PlasmodeConfig("bootstrap")
    with pytest.raises(ValueError):
        PlasmodeConfig(ps_for_generation="guess")
    with pytest.raises(ValueError):
        PlasmodeConfig(replicate_size=0)
