import numpy as np
import pytest

from abundfit.data import (CountDesign, ContinuousDesign, DesignMatrix, DistanceDesign,
                           ModelSpec, MultiSpeciesStack, PriorSet, SiteGeometry,
                           destandardize_coefficients, load_dataset, validate_spec,
                           write_dataset)
from abundfit.exceptions import ConfigError, DataError
from abundfit.simulate import sim_dataset


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def _levels(diags):
    return {(d.level, d.message) for d in diags}


def test_three_site_distance_file(tmp_path):
    paths = {
        "sites": _write(tmp_path, "sites.csv", "id,x,y\na,0,0\nb,1,0\nc,0,1\n"),
        "counts": _write(tmp_path, "counts.csv", "id,band_1,band_2\na,1,0\nb,2,3\nc,0,0\n"),
    }
    spec = ModelSpec("HDS", detection_fn="HalfNormal", cutpoints=(0, 25, 50), survey_type="line")
    data, geom = load_dataset(paths, spec)
    assert isinstance(data, DistanceDesign)
    assert (data.n_sites, data.n_bands, data.max_distance) == (3, 2, 50.0)
    assert geom.ids == ("a", "b", "c")
    np.testing.assert_array_equal(data.counts, [[1, 0], [2, 3], [0, 0]])


def test_single_survey_everywhere_is_rejected():
    with pytest.raises(DataError, match="no replicated site"):
        CountDesign(np.array([[1.0], [2.0], [0.0]]))


def test_constant_covariate_loads_with_rank_warning():
    rng = np.random.default_rng(0)
    y = rng.poisson(3, size=(10, 3)).astype(float)
    data = CountDesign(y, DesignMatrix(np.column_stack([rng.standard_normal(10), np.ones(10)])))
    diags = validate_spec(ModelSpec("NMIX"), data)
    assert ("warning", "rank-deficient design: covariate columns are linearly dependent") in _levels(diags)
    assert not any(d.level == "error" for d in diags)


def test_gaussian_outside_glmm_is_an_error():
    diags = validate_spec(ModelSpec("HDS", abundance_dist="Gaussian", detection_fn="HalfNormal"))
    assert any(d.level == "error" and "Gaussian requires GLMM" in d.message for d in diags)


def _stack(n_species, family="GLMM"):
    rng = np.random.default_rng(1)
    designs = tuple(ContinuousDesign(rng.poisson(2, 8).astype(float)) for _ in range(n_species))
    return MultiSpeciesStack(tuple(f"s{i}" for i in range(n_species)), designs)


def test_factor_count_equal_to_species_count_warns_only():
    spec = ModelSpec("GLMM", spatial=True, species_correlation="spatialFactor", factor_count=6)
    diags = validate_spec(spec, _stack(6))
    assert not any(d.level == "error" for d in diags)
    assert any("weakly identified" in d.message for d in diags)


def test_factor_count_above_species_count_is_an_error():
    spec = ModelSpec("GLMM", species_correlation="latentFactor", factor_count=7)
    assert any(d.level == "error" for d in validate_spec(spec, _stack(6)))


def test_small_community_warns_about_species_minimum():
    diags = validate_spec(ModelSpec("GLMM"), _stack(4))
    assert any(d.level == "warning" and "5-6 species" in d.message for d in diags)
    assert not any("5-6 species" in d.message for d in validate_spec(ModelSpec("GLMM"), _stack(6)))


def test_bad_enum_and_prior_values():
    with pytest.raises(ConfigError):
        ModelSpec("HDS", detection_fn="Hazard")
    diags = validate_spec(ModelSpec("GLMM", priors=PriorSet(coef_var=-1.0)))
    assert any("coef_var" in d.message for d in diags)


def test_invalid_cutpoints_and_counts():
    with pytest.raises(DataError, match="cutpoints"):
        DistanceDesign(np.zeros((2, 2)), (5, 10, 20), "line")
    with pytest.raises(DataError, match="bands"):
        DistanceDesign(np.zeros((2, 3)), (0, 10, 20), "line")
    with pytest.raises(DataError, match="integers"):
        DistanceDesign(np.array([[1.5, 0.0]]), (0, 10, 20), "line")


def test_missing_surveys_must_be_trailing():
    y = np.array([[1.0, np.nan, 2.0], [1.0, 1.0, 1.0]])
    with pytest.raises(DataError, match="after all observed"):
        CountDesign(y)


def test_offsets_must_be_positive():
    with pytest.raises(DataError, match="offset"):
        SiteGeometry(np.zeros((2, 2)) + [[0, 0], [1, 1]], offset=np.array([1.0, 0.0]))


def test_standardization_round_trips_coefficients():
    rng = np.random.default_rng(2)
    raw = rng.normal(5, 3, size=(50, 2))
    dm = DesignMatrix(raw, ("a", "b"))
    np.testing.assert_allclose(dm.values[:, 1:].mean(0), 0, atol=1e-12)
    np.testing.assert_allclose(dm.values[:, 1:].std(0, ddof=1), 1, atol=1e-12)
    beta_std = np.array([0.3, 1.2, -0.7])
    beta_raw = destandardize_coefficients(beta_std, dm)
    np.testing.assert_allclose(dm.values @ beta_std,
                               np.column_stack([np.ones(50), raw]) @ beta_raw, atol=1e-12)


def test_missing_file_names_the_path(tmp_path):
    with pytest.raises(DataError) as info:
        load_dataset({"sites": str(tmp_path / "nope.csv"), "counts": "x"}, ModelSpec("GLMM"))
    assert info.value.path.endswith("nope.csv")


def test_unparseable_value_reports_row(tmp_path):
    paths = {
        "sites": _write(tmp_path, "sites.csv", "id,x,y\na,0,0\nb,1,zz\n"),
        "counts": _write(tmp_path, "response.csv", "id,y\na,1\nb,2\n"),
    }
    with pytest.raises(DataError) as info:
        load_dataset(paths, ModelSpec("GLMM"))
    assert info.value.row == 2


def test_negative_count_reports_row(tmp_path):
    paths = {
        "sites": _write(tmp_path, "sites.csv", "id,x,y\na,0,0\nb,1,1\n"),
        "counts": _write(tmp_path, "counts.csv", "id,rep_1,rep_2\na,1,2\nb,-1,0\n"),
    }
    with pytest.raises(DataError, match="negative count") as info:
        load_dataset(paths, ModelSpec("NMIX"))
    assert info.value.row == 2


def test_schema_mismatch_is_reported(tmp_path):
    paths = {
        "sites": _write(tmp_path, "sites.csv", "site,x,y\na,0,0\n"),
        "counts": _write(tmp_path, "response.csv", "id,y\na,1\n"),
    }
    with pytest.raises(DataError, match="schema mismatch"):
        load_dataset(paths, ModelSpec("GLMM"))


def _assert_same(a, b):
    for da, db in zip(a.designs if hasattr(a, "designs") else (a,),
                      b.designs if hasattr(b, "designs") else (b,)):
        if hasattr(da, "counts"):
            np.testing.assert_array_equal(da.counts, db.counts)
        else:
            np.testing.assert_array_equal(da.response, db.response)
        np.testing.assert_allclose(da.abund_covs.raw, db.abund_covs.raw, rtol=1e-15, atol=0)
        if getattr(da, "det_covs", None) is not None:
            np.testing.assert_allclose(da.det_covs.raw, db.det_covs.raw, rtol=1e-15, atol=0)


@pytest.mark.parametrize("variant", ["DS", "NMix", "Abund", "msNMix", "msDS"])
def test_csv_round_trip_is_exact(tmp_path, variant):
    truth = sim_dataset(variant, n_sites=25, seed=3)
    paths = write_dataset(tmp_path, truth.data, truth.geometry)
    data, geom = load_dataset(paths, truth.spec, standardize=(False, False))
    np.testing.assert_array_equal(geom.coords, truth.geometry.coords)
    np.testing.assert_array_equal(geom.offset, truth.geometry.offset)
    assert geom.ids == truth.geometry.ids
    _assert_same(truth.data, data)
