import numpy as np
import pytest

from txmsum import (FlatSpectrumError, NoEdgeError, builtin_library,
                    chemical_map, edge_position, fit_phase_fractions, generate,
                    load_library, load_map, map_correlation, normalize_spectrum,
                    render_map_png, save_library, save_map)
from txmsum.xanesfit import SpectrumLibrary, default_windows

from conftest import resampled_library, voronoi_phantom


def step_spectrum(energies, e_step):
    return (energies >= e_step).astype(float)


# --- normalize_spectrum -----------------------------------------------------------

def test_ideal_unit_step_unchanged():
    e = np.linspace(0.0, 100.0, 101)
    spec = step_spectrum(e, 50.0)
    out = normalize_spectrum(spec, e, pre_edge=(0.0, 20.0), post_edge=(80.0, 100.0))
    assert np.max(np.abs(out - spec)) <= 1e-9


def test_affine_input_recovers_unit_step():
    e = np.linspace(0.0, 100.0, 101)
    spec = 3.0 * step_spectrum(e, 50.0) + 2.0
    out = normalize_spectrum(spec, e, pre_edge=(0.0, 20.0), post_edge=(80.0, 100.0))
    assert np.max(np.abs(out - step_spectrum(e, 50.0))) <= 1e-9


def test_scaled_reference_with_sloped_baseline(library):
    ref = library.references[:, 2]
    e = library.energies
    raw = 1.7 * ref + (0.003 * (e - e[0]) + 0.4)
    out = normalize_spectrum(raw, e)
    assert np.max(np.abs(out - normalize_spectrum(ref, e))) <= 1e-6


def test_normalize_idempotent(library):
    e = library.energies
    raw = 2.2 * library.references[:, 1] + 0.1
    once = normalize_spectrum(raw, e)
    twice = normalize_spectrum(once, e)
    assert np.max(np.abs(twice - once)) <= 1e-9


def test_flat_spectrum_error():
    e = np.linspace(0.0, 100.0, 64)
    with pytest.raises(FlatSpectrumError):
        normalize_spectrum(np.full(64, 3.0), e, pre_edge=(0.0, 20.0),
                           post_edge=(80.0, 100.0))


def test_degenerate_window_errors():
    e = np.linspace(0.0, 100.0, 64)
    spec = step_spectrum(e, 50.0)
    with pytest.raises(ValueError):
        normalize_spectrum(spec, e, pre_edge=(0.0, 0.5), post_edge=(80.0, 100.0))
    with pytest.raises(ValueError):
        normalize_spectrum(spec, e, pre_edge=(0.0, 90.0), post_edge=(80.0, 100.0))


def test_default_windows_cover_15_percent():
    e = np.linspace(8180.0, 8562.0, 117)
    (p0, p1), (q0, q1) = default_windows(e)
    assert p0 == 8180.0 and q1 == 8562.0
    assert p1 == pytest.approx(8180.0 + 0.15 * 382.0, abs=4.0)
    assert q0 == pytest.approx(8562.0 - 0.15 * 382.0, abs=4.0)


# --- fit_phase_fractions ------------------------------------------------------------

def test_exact_member_is_one_hot(library):
    fit = fit_phase_fractions(library.references[:, 2], library)
    expected = np.zeros(5)
    expected[2] = 1.0
    assert np.allclose(fit.weights, expected, atol=1e-10)
    assert fit.state == pytest.approx(library.states[2], abs=1e-10)


def test_even_mixture_recovered(library):
    mix = 0.5 * library.references[:, 0] + 0.5 * library.references[:, 1]
    fit = fit_phase_fractions(mix, library)
    assert abs(fit.weights[0] - 0.5) <= 1e-8
    assert abs(fit.weights[1] - 0.5) <= 1e-8
    assert np.all(np.abs(fit.weights[2:]) <= 1e-8)


def test_noisy_pure_reference_dominant(library):
    rng = np.random.default_rng(0)
    spec = library.references[:, 0] + 0.01 * rng.standard_normal(117)
    fit = fit_phase_fractions(spec, library)
    assert fit.weights[0] >= 0.95


def test_weights_live_on_simplex(library):
    rng = np.random.default_rng(1)
    for _ in range(20):
        spec = rng.uniform(-0.2, 1.2, 117)
        fit = fit_phase_fractions(spec, library)
        assert np.all(fit.weights >= -1e-12)
        assert abs(fit.weights.sum() - 1.0) <= 1e-9


def test_duplicate_references_flag_nonunique(library):
    dup = SpectrumLibrary(
        energies=library.energies,
        references=np.column_stack([library.references[:, 0]] * 2),
        states=np.array([2.0, 3.0]), labels=["a", "b"])
    fit = fit_phase_fractions(library.references[:, 0], dup)
    assert fit.nonunique
    assert abs(fit.weights.sum() - 1.0) <= 1e-9


def test_too_many_references_rejected(library):
    big = SpectrumLibrary(
        energies=library.energies,
        references=np.tile(library.references, (1, 2))[:, :9],
        states=np.arange(9.0), labels=[f"r{i}" for i in range(9)])
    with pytest.raises(ValueError, match="8"):
        fit_phase_fractions(library.references[:, 0], big)


def test_fit_resamples_library(library):
    e2 = np.linspace(8180.0, 8562.0, 73)
    lib2 = library.resample(e2)
    fit = fit_phase_fractions(lib2.references[:, 3], library, energies=e2)
    assert fit.weights[3] >= 0.999


# --- edge_position -------------------------------------------------------------------

def test_edge_exact_sample_crossing():
    e = np.array([10.0, 20.0, 30.0, 40.0])
    spec = np.array([0.0, 0.0, 0.5, 1.0])
    assert edge_position(spec, e) == pytest.approx(30.0, abs=1e-12)


def test_edge_linear_ramp():
    e = np.linspace(8300.0, 8400.0, 51)
    spec = (e - 8300.0) / 100.0
    assert edge_position(spec, e) == pytest.approx(8350.0, abs=1e-9)


def test_edge_positions_increase_with_state(library):
    e = library.energies
    edges = [edge_position(normalize_spectrum(library.references[:, j], e), e)
             for j in range(library.size)]
    assert np.all(np.diff(edges) > 0)


def test_no_edge_error():
    e = np.linspace(0.0, 10.0, 11)
    with pytest.raises(NoEdgeError):
        edge_position(np.linspace(1.0, 0.0, 11), e)


def test_edge_monotone_under_rightward_shift():
    e = np.linspace(0.0, 100.0, 201)
    base = 1.0 / (1.0 + np.exp(-(e - 40.0) / 5.0))
    shifted = 1.0 / (1.0 + np.exp(-(e - 55.0) / 5.0))
    assert edge_position(shifted, e) > edge_position(base, e)


# --- chemical_map --------------------------------------------------------------------

def test_clean_phantom_map_matches_truth():
    spec = voronoi_phantom(size=48, frames=64, sigma=0.0, seed=6)
    noisy, truth = generate(spec)
    cmap = chemical_map(noisy, spec.library)
    assert cmap.valid.all()
    assert np.max(np.abs(cmap.values - truth.truth_map.values)) <= 1e-9


def test_noisy_map_correlation_bounds():
    spec = voronoi_phantom(size=96, frames=64, sigma=150.0, seed=6)
    noisy, truth = generate(spec)
    cmap = chemical_map(noisy, spec.library)
    assert map_correlation(cmap, truth.truth_map) <= 0.1


def test_map_requires_energy_axis(library):
    from txmsum import ImageStack
    stack = ImageStack(width=4, height=4, data=np.zeros((5, 4, 4)))
    with pytest.raises(ValueError, match="energy"):
        chemical_map(stack, library)


def test_phase_values_within_state_range():
    spec = voronoi_phantom(size=32, frames=48, sigma=60.0, seed=7)
    noisy, _ = generate(spec)
    cmap = chemical_map(noisy, spec.library)
    valid = cmap.values[cmap.valid]
    assert valid.min() >= spec.library.states.min() - 1e-9
    assert valid.max() <= spec.library.states.max() + 1e-9


def test_edge_mode_values_within_axis():
    spec = voronoi_phantom(size=32, frames=64, sigma=10.0, seed=8)
    noisy, _ = generate(spec)
    cmap = chemical_map(noisy, spec.library, mode="edge-position")
    valid = cmap.values[cmap.valid]
    assert valid.min() >= noisy.energies[0]
    assert valid.max() <= noisy.energies[-1]


def test_map_equals_pixelwise_scalar_pipeline():
    spec = voronoi_phantom(size=8, frames=48, sigma=40.0, seed=9)
    noisy, _ = generate(spec)
    cmap = chemical_map(noisy, spec.library)
    pre, post = default_windows(noisy.energies)
    lib = spec.library.resample(noisy.energies)
    refs_norm = np.column_stack([
        normalize_spectrum(lib.references[:, j], noisy.energies, pre, post)
        for j in range(lib.size)])
    lib_norm = SpectrumLibrary(energies=noisy.energies, references=refs_norm,
                               states=lib.states, labels=lib.labels)
    for y in range(8):
        for x in range(8):
            pixel = noisy.data[:, y, x]
            norm = normalize_spectrum(pixel, noisy.energies, pre, post)
            fit = fit_phase_fractions(norm, lib_norm)
            assert cmap.values[y, x] == pytest.approx(fit.state, abs=1e-9)


def test_mostly_flat_stack_hard_failure(library):
    from txmsum import ImageStack
    rng = np.random.default_rng(10)
    t = library.energies.size
    data = np.full((t, 8, 8), 5.0) + 1e-13 * rng.standard_normal((t, 8, 8))
    stack = ImageStack(width=8, height=8, data=data, energies=library.energies)
    with pytest.raises(ValueError, match="[Uu]nusable|pixels"):
        chemical_map(stack, library)


# --- library and map I/O ----------------------------------------------------------------

def test_library_csv_roundtrip(tmp_path, library):
    save_library(library, tmp_path / "lib.csv", tmp_path / "states.json")
    back = load_library(tmp_path / "lib.csv", tmp_path / "states.json")
    assert np.array_equal(back.energies, library.energies)
    assert np.array_equal(back.references, library.references)
    assert np.array_equal(back.states, library.states)
    assert back.labels == library.labels


def test_packaged_library_files_match_builtin(library):
    from importlib.resources import files
    data = files("txmsum.data")
    with (data / "reference_spectra.csv").open() as fh_csv:
        pass
    back = load_library(str(data / "reference_spectra.csv"),
                        str(data / "reference_states.json"))
    assert np.array_equal(back.energies, library.energies)
    assert np.array_equal(back.references, library.references)
    assert np.array_equal(back.states, library.states)


def test_map_container_roundtrip(tmp_path):
    spec = voronoi_phantom(size=16, frames=48, sigma=30.0, seed=11)
    noisy, _ = generate(spec)
    cmap = chemical_map(noisy, spec.library)
    save_map(cmap, tmp_path / "m")
    back = load_map(tmp_path / "m")
    assert np.allclose(back.values, cmap.values, atol=1e-6)
    assert np.array_equal(back.valid, cmap.valid)
    assert back.mode == cmap.mode


def test_png_render_deterministic(tmp_path):
    spec = voronoi_phantom(size=16, frames=48, sigma=30.0, seed=12)
    noisy, _ = generate(spec)
    cmap = chemical_map(noisy, spec.library)
    render_map_png(cmap, tmp_path / "a.png")
    render_map_png(cmap, tmp_path / "b.png")
    a = (tmp_path / "a.png").read_bytes()
    assert a == (tmp_path / "b.png").read_bytes()
    assert a[:8] == b"\x89PNG\r\n\x1a\n"
