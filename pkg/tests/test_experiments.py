import numpy as np
import pytest

from thermolimit import io
from thermolimit.experiments import (
    DEFAULTS, EXPERIMENT_IDS, ConfigError, ExperimentConfig, compare_reconstructions, equivalent_fwhm, fwhm_1d,
    image_contrast, load_reconstruction, locate_peaks, random_profiles, run_experiment, simulate_stack,
)
from thermolimit.saft import ReconstructionGrid

SMALL_PIPELINE = {
    "phantom": {"shape": [60, 10], "sources": [{"center": [20, 3], "amplitude": 1, "width": 1.5},
                                               {"center": [40, 6], "amplitude": 1, "width": 1.5}]},
    "t_max": 120, "tp_max": 20, "peak_window": 8,
}


# ---------------------------------------------------------------- configs


def test_every_experiment_has_defaults():
    assert set(DEFAULTS) == set(EXPERIMENT_IDS)
    for exp in EXPERIMENT_IDS:
        cfg = ExperimentConfig.from_dict({"experiment": exp})
        assert cfg.params.keys() == DEFAULTS[exp].keys()


@pytest.mark.parametrize("data, field", [
    ({"experiment": "nope"}, "experiment"),
    ({}, "experiment"),
    ({"experiment": "walk", "colour": 1}, "config"),
    ({"experiment": "walk", "seed": -1}, "seed"),
    ({"experiment": "walk", "seed": 1.5}, "seed"),
    ({"experiment": "walk", "params": {"n_walker": 5}}, "params.n_walker"),
    ({"experiment": "walk", "params": {"n_walkers": "many"}}, "params.n_walkers"),
    ({"experiment": "walk", "params": {"compare_times": [500]}}, "params.compare_times"),
    ({"experiment": "occupation", "params": {"n_cells": 1}}, "params.n_cells"),
    ({"experiment": "langevin", "params": {"dts": [0.5, 0.1]}}, "params.dts"),
    ({"experiment": "langevin", "params": {"noise_variance": -1.0}}, "params.noise_variance"),
    ({"experiment": "psf2d", "params": {"snrs": [0.5]}}, "params.snrs"),
    ({"experiment": "phantom-pipeline", "params": {"methods": ["cg"]}}, "params.methods"),
    ({"experiment": "phantom-pipeline", "params": {"phantom": {"shape": [10, 10], "sources": [
        {"center": [20, 3], "amplitude": 1, "width": 1}]}}}, "params.phantom"),
    ({"experiment": "phantom-pipeline", "params": {"regularizer": {"admm": {"rho": -1}}}}, "params.regularizer"),
    ({"experiment": "gain-table", "params": {"n_detectors": [0]}}, "params.n_detectors"),
])
def test_invalid_configs_name_the_field(data, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        ExperimentConfig.from_dict(data)


def test_load_reports_missing_and_malformed(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        ExperimentConfig.load(tmp_path / "none.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        ExperimentConfig.load(bad)


# ---------------------------------------------------------------- runs


def _run(tmp_path, name, data, jobs=1):
    return run_experiment(ExperimentConfig.from_dict(data), tmp_path / name, jobs=jobs)


def test_reruns_are_byte_identical(tmp_path):
    data = {"experiment": "occupation", "seed": 4,
            "params": {"n_walkers": 400, "t": 50, "n_realizations": 6,
                       "equilibrium": {"n_equilibrium": 200, "n_injected": 20, "t": 5, "n_realizations": 6}}}
    a = _run(tmp_path, "a", data)
    b = _run(tmp_path, "b", data, jobs=3)
    assert a == b
    for name, digest in a["files"].items():
        assert io.sha256(tmp_path / "b" / name) == digest
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    assert a["seed"] == 4 and a["version"] and a["inputs"]["n_walkers"] == 400


def test_simulate_stack_ignores_job_count():
    one = simulate_stack(10, 30, 50, 5, seed=3, n_real=7, jobs=1)
    many = simulate_stack(10, 30, 50, 5, seed=3, n_real=7, jobs=3)
    np.testing.assert_array_equal(one.counts, many.counts)
    assert one.counts.shape == (1, 7, 10)
    assert np.all(one.counts.sum(axis=-1) == 55)


def test_small_runs_of_every_light_experiment(tmp_path):
    m = _run(tmp_path, "walk", {"experiment": "walk", "params": {"n_walkers": 50, "n_steps": 40, "compare_times": [10]}})
    assert set(m["files"]) == {"trajectories.csv", "spread.csv", "cross_model_t10.csv"}
    header, data = io.read_table(tmp_path / "walk" / "trajectories.csv")
    assert data.shape == (41, 51) and np.all(np.abs(data[:, 1:]) <= 20)

    m = _run(tmp_path, "langevin", {"experiment": "langevin"})
    assert m["summary"]["max_diagonalization_error"] < 1e-10
    assert m["summary"]["observed_order"] == pytest.approx(1.0, abs=0.2)

    m = _run(tmp_path, "entropy", {"experiment": "entropy", "params": {"n_profiles": 3}})
    assert m["summary"]["min_increment"] >= -1e-12

    m = _run(tmp_path, "psf1d", {"experiment": "psf1d"})
    assert m["summary"]["delta_r_times_k_cut"] == pytest.approx(np.pi, rel=1e-15)
    assert m["summary"]["delta_r_depth_spread"] <= 1e-12

    m = _run(tmp_path, "gain", {"experiment": "gain-table", "params": {"n_detectors": [4]}})
    assert m["summary"] == {"4": [2.0, float(np.log(2))]}


def test_random_profiles_are_normalized_and_positive():
    p = random_profiles(6, 40, seed=1)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    assert p.min() >= 0 and np.all((p > 0).sum(axis=1)[1::2] < 40)
    np.testing.assert_array_equal(p, random_profiles(6, 40, seed=1))


def test_small_pipeline_localizes_sources(tmp_path):
    m = _run(tmp_path, "pipe", {"experiment": "phantom-pipeline", "seed": 2, "params": SMALL_PIPELINE})
    errs = np.array(m["summary"]["methods"]["tsvd"]["peak_errors"])
    assert np.all(np.hypot(errs[:, 0], errs[:, 1]) <= 2)
    grid, centers, method = load_reconstruction(tmp_path / "pipe")
    assert method == "tsvd" and grid.values.shape == (60, 10) and centers == [[20, 3], [40, 6]]
    field = io.read_field(tmp_path / "pipe" / "T0.bin")
    assert field.values.max() == pytest.approx(1.0)


def test_load_reconstruction_rejects_other_runs(tmp_path):
    _run(tmp_path, "g", {"experiment": "gain-table"})
    with pytest.raises(ValueError):
        load_reconstruction(tmp_path / "g")


# ---------------------------------------------------------------- comparison helpers


def test_fwhm_1d_of_gaussian():
    x = np.arange(201.0)
    sigma = 7.0
    g = np.exp(-((x - 100) ** 2) / (2 * sigma**2))
    assert fwhm_1d(g, 100) == pytest.approx(2 * np.sqrt(2 * np.log(2)) * sigma, rel=1e-3)
    assert fwhm_1d(g, 100, spacing=0.5) == pytest.approx(np.sqrt(2 * np.log(2)) * sigma, rel=1e-3)
    assert np.isnan(fwhm_1d(np.linspace(1, 2, 10), 9))
    assert np.isnan(fwhm_1d(-g, 100))


def test_equivalent_fwhm_of_isotropic_gaussian():
    x = np.arange(-60.0, 61.0)
    X, Z = np.meshgrid(x, x, indexing="ij")
    sigma = 10.0
    g = np.exp(-(X**2 + Z**2) / (2 * sigma**2))
    assert equivalent_fwhm(g, (60, 60)) == pytest.approx(2 * np.sqrt(2 * np.log(2)) * sigma, rel=0.01)
    # a disjoint bump above half maximum does not count
    g[5:8, 5:8] = 1.0
    assert equivalent_fwhm(g, (60, 60)) == pytest.approx(2 * np.sqrt(2 * np.log(2)) * sigma, rel=0.01)


def _blob_grid(centers, width):
    grid = ReconstructionGrid.regular(80, 20)
    X, Z = np.meshgrid(grid.xs, grid.zs, indexing="ij")
    v = sum(np.exp(-((X - cx) ** 2 + (Z - cz) ** 2) / (2 * width**2)) for cx, cz in centers)
    return grid.with_values(v)


def test_compare_identical_gives_zero_differences():
    centers = [(20.0, 5.0), (60.0, 10.0)]
    g = _blob_grid(centers, 2.0)
    rep = compare_reconstructions(g, g, centers)
    for s in rep.sources:
        assert s.peak_a == s.peak_b and s.error_a == s.error_b == 0.0
        assert s.fwhm_a == s.fwhm_b and not s.b_narrower
    assert rep.background_rms_a == rep.background_rms_b
    assert not rep.b_narrower_all


def test_compare_flags_narrower_candidate():
    centers = [(20.0, 5.0), (60.0, 10.0)]
    rep = compare_reconstructions(_blob_grid(centers, 3.0), _blob_grid(centers, 1.5), centers, labels=("tsvd", "admm"))
    assert rep.b_narrower_all
    d = rep.to_dict()
    assert d["label_b"] == "admm" and all(s["b_narrower"] for s in d["sources"])


def test_compare_rejects_grid_mismatch():
    a = _blob_grid([(20.0, 5.0)], 2.0)
    b = ReconstructionGrid.regular(80, 21)
    with pytest.raises(ValueError, match="different grids"):
        compare_reconstructions(a, b, [(20.0, 5.0)])


def test_peaks_and_contrast():
    g = _blob_grid([(20.0, 5.0), (60.0, 10.0)], 2.0)
    assert locate_peaks(g, [(22.0, 0.0), (57.0, 0.0)], 5) == [(20, 5), (60, 10)]
    with pytest.raises(ValueError):
        locate_peaks(g, [(200.0, 0.0)], 5)
    flat = np.ones((4, 4))
    assert image_contrast(flat, (0, 0)) == 1.0
    assert np.isnan(image_contrast(np.zeros((2, 2)), (0, 0)))
