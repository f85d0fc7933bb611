import numpy as np
import pytest

from abundfit.data import Family, SpeciesCorrelation
from abundfit.exceptions import ConfigError
from abundfit.simulate import parse_variant, sim_dataset


def test_perfect_single_band_detection_observes_everyone():
    sim = sim_dataset("DS", n_sites=200, seed=0, alpha=[np.log(1e8)], cutpoints=(0.0, 50.0))
    np.testing.assert_array_equal(sim.data.counts.sum(1), sim.params["N"][0])


def test_intercept_only_mean_abundance():
    sim = sim_dataset("NMix", n_sites=10_000, seed=1, beta=[np.log(5.0)])
    assert sim.params["N"].mean() == pytest.approx(5.0, rel=0.02)


@pytest.mark.parametrize("variant", ["DS", "spNMix", "sfMsAbund", "lfMsDS", "msNMix"])
def test_same_seed_same_truth(variant):
    a = sim_dataset(variant, n_sites=30, seed=7)
    b = sim_dataset(variant, n_sites=30, seed=7)
    assert a.dumps() == b.dumps()
    assert a.dumps() != sim_dataset(variant, n_sites=30, seed=8).dumps()


def test_band_frequencies_converge_to_cell_probabilities():
    sim = sim_dataset("DS", n_sites=20_000, seed=2, beta=[np.log(5.0)], alpha=[np.log(25.0)])
    pi = sim.params["pi"][0, 0]
    pi_star = np.append(pi, 1 - pi.sum())
    detected = sim.data.counts.sum(0)
    N = sim.params["N"].sum()
    assert N > 1e5 * 0.9
    freq = np.append(detected, N - detected.sum()) / N
    kl = np.sum(freq * np.log(freq / pi_star))
    assert kl < 1e-3


def test_observations_consistent_with_truth():
    sim = sim_dataset("NMix", n_sites=100, seed=3)
    assert np.all(sim.data.counts <= sim.params["N"][0][:, None])
    sim = sim_dataset("msDS", n_sites=50, seed=4)
    for i, d in enumerate(sim.data.designs):
        assert np.all(d.counts.sum(1) <= sim.params["N"][i])


def test_dense_and_nngp_fields_have_unit_variance():
    for dense in (False, True):
        fields = np.array([sim_dataset("spAbund", n_sites=200, seed=s, dense=dense,
                                       abundance_dist="Gaussian").params["w"]
                           for s in range(30)])
        assert fields.var() == pytest.approx(1.0, rel=0.15)


def test_variant_names():
    assert parse_variant("sfMsNMix") == (Family.NMIX, True, SpeciesCorrelation.SPATIAL, True)
    assert parse_variant("lfMsDS") == (Family.HDS, False, SpeciesCorrelation.LATENT, True)
    assert parse_variant("spAbund") == (Family.GLMM, True, SpeciesCorrelation.NONE, False)
    with pytest.raises(ConfigError):
        parse_variant("zzDS")
    with pytest.raises(ConfigError):
        parse_variant("Occupancy")


def test_gaussian_only_for_glmm():
    with pytest.raises(ConfigError):
        sim_dataset("DS", abundance_dist="Gaussian")


def test_truth_json_echoes_seed():
    import json
    doc = json.loads(sim_dataset("abund", n_sites=5, seed=123).dumps())
    assert doc["seed"] == 123
    assert doc["params"]["beta"] == [[2.0, 0.54]]
