import json
import math

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from lensformer.errors import ContractError
from lensformer.lenssim import (
    FWHM_TO_SIGMA,
    Dataset,
    ImageStamp,
    MockSceneParams,
    SersicParams,
    SimConfig,
    desk_sim_config,
    generate_dataset,
    load_dataset,
    pixel_grid,
    read_stamp,
    render_galaxy,
    render_lensed_source,
    render_sersic,
    render_unlensed_source,
    sample_scene,
    sample_stamps,
    sersic_index,
    sersic_k,
    sersic_profile_flux,
    synthesize,
    write_stamp,
)


def simple_galaxy(i0=1.0, n_s=1.2, r_eff=0.5, **kw):
    defaults = dict(i0=i0, n_s=n_s, k=sersic_k(n_s, r_eff), r_eff=r_eff, r_disc=0.6,
                    axis_ratio=0.8, inclination=30.0, orientation=0.4, bulge_fraction=0.5)
    defaults.update(kw)
    return SersicParams(**defaults)


def simple_scene(is_lens=True, noise=0.0, size=48, theta_e=1.2, source_amp=0.6, **kw):
    defaults = dict(
        lens=simple_galaxy(),
        einstein_radius=theta_e,
        source_dx=0.15, source_dy=-0.1,
        source_amp=source_amp, source_sigma=0.2,
        source_axis_ratio=0.8, source_angle=0.3,
        source_redshift=1.8,
        lens_band_flux=(0.6, 1.0), source_band_flux=(1.1, 0.9),
        psf_fwhm=(0.7, 0.65), noise_sigma=(noise, noise),
        pixel_scale=0.2, stamp_size=size, is_lens=is_lens)
    defaults.update(kw)
    return MockSceneParams(**defaults)


# -- sersic index ----------------------------------------------------------------

def test_sersic_index_identity_case():
    assert sersic_index(1.0, 0.0) == pytest.approx(1.0, abs=1e-12)


def test_sersic_index_clamps_small_bulge_fraction():
    got = sersic_index(0.01, 0.0)
    assert got == pytest.approx(10.0 ** (0.4 * math.log10(0.03)), rel=1e-12)
    assert got == pytest.approx(0.2460, abs=1e-4)
    assert sersic_index(0.02, 0.0) == sersic_index(0.0, 0.0)


def test_sersic_index_x_span_ratio():
    hi = sersic_index(0.4, 1.0)
    lo = sersic_index(0.4, -1.0)
    assert hi / lo == pytest.approx(10.0 ** 0.2, rel=1e-12)
    assert hi / lo == pytest.approx(1.585, abs=1e-3)


def test_sersic_index_rejects_out_of_range():
    with pytest.raises(ContractError):
        sersic_index(0.5, 1.5)
    with pytest.raises(ContractError):
        sersic_index(1.2, 0.0)


# -- profile rendering ---------------------------------------------------------------

def test_render_sersic_center_pixel_is_i0():
    params = simple_galaxy(i0=2.5)
    grid = pixel_grid(33, 0.2)  # odd size puts a pixel exactly on the center
    img = render_sersic(params, grid)
    assert img[16, 16] == pytest.approx(2.5, rel=1e-12)
    assert img.max() == img[16, 16]


def test_render_sersic_monotone_along_ray():
    img = render_sersic(simple_galaxy(), pixel_grid(33, 0.2))
    row = img[16, 16:]
    assert np.all(np.diff(row) < 0)


def test_render_sersic_matches_formula_at_sampled_radii():
    params = simple_galaxy(i0=1.7, n_s=1.4)
    grid = pixel_grid(41, 0.15)
    img = render_sersic(params, grid)
    cos_o, sin_o = math.cos(params.orientation), math.sin(params.orientation)
    for (r, c) in [(20, 25), (10, 10), (33, 7), (20, 20), (2, 38)]:
        x, y = grid[0][r, c], grid[1][r, c]
        u = cos_o * x + sin_o * y
        v = -sin_o * x + cos_o * y
        rad = math.sqrt(u * u + (v / params.axis_ratio) ** 2)
        want = params.i0 * math.exp(-params.k * rad ** (1.0 / params.n_s))
        assert img[r, c] == pytest.approx(want, abs=1e-12, rel=1e-12)


def test_profile_flux_closed_form_vs_quadrature():
    # radial quadrature of the circular profile as an independent check
    i0, n_s, k = 1.3, 1.6, 2.2
    r = np.linspace(0.0, 60.0, 400_000)
    numeric = np.trapezoid(i0 * np.exp(-k * r ** (1.0 / n_s)) * 2 * np.pi * r, r)
    assert sersic_profile_flux(i0, n_s, k, 1.0) == pytest.approx(numeric, rel=1e-6)


def test_galaxy_flux_conservation_through_psf():
    # pixel sum of the noiseless blurred stamp, restored to intensity units,
    # should land within 1% of the closed-form flux (truncation is the
    # remaining gap, so keep the profile compact relative to the stamp)
    params = simple_galaxy(r_eff=0.4)
    scene = simple_scene(is_lens=False, size=96, lens=params)
    stamp = synthesize(scene, seed=0)
    for b, mult in enumerate(scene.lens_band_flux):
        measured = float(stamp.pixels[b].sum()) * scene.pixel_scale ** 2
        assert measured == pytest.approx(params.analytic_flux() * mult, rel=0.01)


def test_galaxy_bulge_fraction_extremes():
    grid = pixel_grid(33, 0.2)
    bulge_only = simple_galaxy(bulge_fraction=1.0)
    np.testing.assert_allclose(render_galaxy(bulge_only, grid), render_sersic(bulge_only, grid))
    disc_only = simple_galaxy(bulge_fraction=0.0)
    img = render_galaxy(disc_only, grid)
    assert img[16, 16] == pytest.approx(disc_only.i0, rel=1e-12)


def test_sersic_params_validation():
    with pytest.raises(ContractError):
        simple_galaxy(axis_ratio=0.3)
    with pytest.raises(ContractError):
        simple_galaxy(inclination=85.0)
    with pytest.raises(ContractError):
        simple_galaxy(n_s=-1.0)


# -- lensed source ---------------------------------------------------------------------

def test_einstein_ring_concentrates_flux():
    scene = simple_scene(theta_e=1.6, source_dx=0.0, source_dy=0.0,
                         source_sigma=0.08, source_axis_ratio=1.0,
                         pixel_scale=0.1, size=64)
    grid = pixel_grid(64, 0.1)
    img = render_lensed_source(scene, grid)
    r = np.hypot(grid[0], grid[1])
    ring = np.abs(r - scene.einstein_radius) <= 2 * scene.pixel_scale
    assert img.sum() > 0
    assert img[ring].sum() / img.sum() > 0.8


def test_vanishing_einstein_radius_recovers_source():
    scene = simple_scene(theta_e=1e-9)
    grid = pixel_grid(48, 0.2)
    lensed = render_lensed_source(scene, grid)
    plain = render_unlensed_source(scene, grid)
    assert abs(lensed.sum() - plain.sum()) < 1e-6 * plain.sum()


def test_sis_magnifies_every_sampled_scene():
    rng = np.random.default_rng(0)
    cfg = desk_sim_config(bands=2, size=48, theta_e_range=(0.6, 1.6),
                          lens_band_flux=(1.0, 1.0), source_band_flux=(1.0, 1.0),
                          psf_fwhm=(0.7, 0.7))
    grid = pixel_grid(48, cfg.pixel_scale)
    ratios = []
    for _ in range(40):
        scene = sample_scene(rng, cfg, is_lens=True)
        lensed = render_lensed_source(scene, grid).sum()
        plain = render_unlensed_source(scene, grid).sum()
        ratios.append(lensed / plain)
    ratios = np.array(ratios)
    assert np.median(ratios) > 1.2
    assert ratios.min() > 0.95


def test_lensed_source_requires_positive_radius():
    scene = simple_scene(theta_e=0.0)
    with pytest.raises(ContractError):
        render_lensed_source(scene, pixel_grid(16, 0.2))


# -- synthesize --------------------------------------------------------------------------

def test_noiseless_nonlens_equals_blurred_foreground():
    scene = simple_scene(is_lens=False, noise=0.0)
    stamp = synthesize(scene, seed=3)
    grid = pixel_grid(scene.stamp_size, scene.pixel_scale)
    fg = render_galaxy(scene.lens, grid)
    for b, mult in enumerate(scene.lens_band_flux):
        sigma_px = scene.psf_fwhm[b] * FWHM_TO_SIGMA / scene.pixel_scale
        want = gaussian_filter(fg * mult, sigma_px, mode="constant").astype(np.float32)
        np.testing.assert_array_equal(stamp.pixels[b], want)
    assert stamp.label == 0
    assert stamp.metadata["flux_ratio"] == 0.0
    assert stamp.metadata["theta_e"] == 0.0


def test_synthesize_same_seed_identical():
    scene = simple_scene(noise=0.02)
    a = synthesize(scene, seed=11)
    b = synthesize(scene, seed=11)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    c = synthesize(scene, seed=12)
    assert not np.array_equal(a.pixels, c.pixels)


def test_corner_noise_std_matches_configuration():
    sigma = 0.05
    tiny = simple_galaxy(r_eff=0.15, r_disc=0.2, i0=0.5)
    corners = []
    for s in range(40):
        scene = simple_scene(is_lens=False, noise=sigma, size=32, lens=tiny)
        px = synthesize(scene, seed=100 + s).pixels[0]
        corners.extend([px[:8, :8], px[:8, -8:], px[-8:, :8], px[-8:, -8:]])
    sample = np.concatenate([c.ravel() for c in corners])
    assert sample.size >= 10_000
    assert abs(sample.std() - sigma) / sigma < 0.10


def test_flux_ratio_metadata_recomputable():
    scene = simple_scene(noise=0.05)
    stamp = synthesize(scene, seed=5)
    grid = pixel_grid(scene.stamp_size, scene.pixel_scale)
    fg = render_galaxy(scene.lens, grid)
    src = render_lensed_source(scene, grid)
    fg_tot = src_tot = 0.0
    for b in range(scene.bands):
        sigma_px = scene.psf_fwhm[b] * FWHM_TO_SIGMA / scene.pixel_scale
        fg_tot += gaussian_filter(fg * scene.lens_band_flux[b], sigma_px, mode="constant").sum()
        src_tot += gaussian_filter(src * scene.source_band_flux[b], sigma_px, mode="constant").sum()
    assert stamp.metadata["flux_ratio"] == pytest.approx(src_tot / (src_tot + fg_tot), abs=1e-6)
    assert stamp.label == 1


def test_stamps_finite_and_nonconstant():
    rng = np.random.default_rng(1)
    cfg = desk_sim_config(bands=2, lens_band_flux=(1.0, 1.0), source_band_flux=(1.0, 1.0),
                          psf_fwhm=(0.7, 0.7))
    for is_lens in (True, False):
        for s in range(5):
            stamp = synthesize(sample_scene(rng, cfg, is_lens), seed=s)
            assert np.all(np.isfinite(stamp.pixels))
            assert stamp.pixels.std() > 0


# -- stamp files / datasets ------------------------------------------------------------------

def test_stamp_file_round_trip(tmp_path):
    pixels = np.random.default_rng(0).normal(size=(3, 9, 9)).astype(np.float32)
    path = tmp_path / "x.stamp"
    write_stamp(path, pixels)
    np.testing.assert_array_equal(read_stamp(path), pixels)


def test_stamp_file_rejects_garbage(tmp_path):
    path = tmp_path / "bad.stamp"
    path.write_bytes(b"\x00" * 64)
    with pytest.raises(ContractError):
        read_stamp(path)


def test_sample_stamps_exact_class_counts():
    cfg = desk_sim_config()
    stamps = sample_stamps(10, 0.5, cfg, seed=4)
    labels = [s.label for s in stamps]
    assert sum(labels) == 5
    stamps = sample_stamps(9, 0.4, cfg, seed=4)
    assert sum(s.label for s in stamps) == round(9 * 0.4)


def test_sample_stamps_validation():
    cfg = desk_sim_config()
    with pytest.raises(ContractError):
        sample_stamps(1, 0.5, cfg, seed=0)
    with pytest.raises(ContractError):
        sample_stamps(10, 0.0, cfg, seed=0)


def test_generate_dataset_deterministic_bytes(tmp_path):
    cfg = desk_sim_config()
    m1 = generate_dataset(tmp_path / "a", 8, 0.5, cfg, seed=9)
    m2 = generate_dataset(tmp_path / "b", 8, 0.5, cfg, seed=9)
    assert m1.read_text() == m2.read_text()
    for i in range(8):
        rel = f"stamps/{i:06d}.stamp"
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_generate_and_load_dataset(tmp_path):
    cfg = desk_sim_config()
    manifest = generate_dataset(tmp_path / "ds", 6, 0.5, cfg, seed=2)
    ds = load_dataset(manifest)
    assert len(ds) == 6
    assert ds.pixels.shape == (6, 4, 32, 32)
    assert ds.labels.sum() == 3
    for row in ds.meta:
        assert set(row) >= {"id", "path", "label", "theta_e", "flux_ratio", "z_s", "seed"}
    # lenses carry positive theta_e and flux ratio, non-lenses zero
    for row in ds.meta:
        if row["label"] == 1:
            assert row["theta_e"] > 0 and row["flux_ratio"] > 0
        else:
            assert row["theta_e"] == 0.0 and row["flux_ratio"] == 0.0


def test_theta_e_sampling_matches_law():
    cfg = desk_sim_config(theta_e_range=(0.6, 2.2), theta_e_law="loguniform")
    rng = np.random.default_rng(7)
    draws = np.array([sample_scene(rng, cfg, True).einstein_radius for _ in range(2000)])
    lo, hi = cfg.theta_e_range
    assert draws.min() >= lo and draws.max() <= hi
    # KS distance against the log-uniform CDF
    sorted_draws = np.sort(draws)
    cdf = (np.log(sorted_draws) - np.log(lo)) / (np.log(hi) - np.log(lo))
    empirical = np.arange(1, len(draws) + 1) / len(draws)
    assert np.max(np.abs(cdf - empirical)) < 0.05


def test_dataset_from_stamps():
    cfg = desk_sim_config()
    stamps = sample_stamps(4, 0.5, cfg, seed=1)
    ds = Dataset.from_stamps(stamps)
    assert len(ds) == 4
    assert ds.bands == 4 and ds.size == 32
    np.testing.assert_array_equal(ds.pixels[2], stamps[2].pixels)


def test_sim_config_round_trip_and_unknown_keys():
    cfg = desk_sim_config()
    assert SimConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ContractError):
        SimConfig.from_dict({"bands": 4, "bogus_knob": 1})


def test_image_stamp_validates_shape():
    with pytest.raises(ContractError):
        ImageStamp(pixels=np.zeros((4, 8, 9), dtype=np.float32), label=0)
