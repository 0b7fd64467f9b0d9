import math
import warnings

import numpy as np
import pytest

from nvtrap.core import PhysicalConstants, coulomb_delta_field
from nvtrap.locate import (GridSpec, LoopMixture, Measurement,
                           SingularityError, VoxelPosterior, bayes_posterior,
                           credible_region, gaussian_loop, loop_position,
                           posterior_compare, render_mixture)

C = PhysicalConstants()


def measurement_for(r_true, q=-1.0, y_perp=0.5, sigma=0.0):
    """Exact (or noise-annotated) measurement a charge at r_true produces."""
    f = coulomb_delta_field(q, r_true, C).v
    e_vec = np.array([y_perp + f[0], f[1]])
    var = sigma**2
    m = Measurement(delta_par=float(f[2]),
                    e_perp=float(np.linalg.norm(e_vec)),
                    y_perp=y_perp, var_par=var, var_e_perp=var,
                    var_y_perp=var / 4 if var else 0.0)
    theta = math.atan2(e_vec[1], e_vec[0])
    return m, theta


def test_loop_hits_150nm_anchor():
    m = Measurement(delta_par=0.0, e_perp=0.0707, y_perp=0.0)
    r = loop_position(0.0, m, -1.0, C)
    assert np.allclose(r, [150.0, 0.0, 0.0], atol=0.5)


def test_loop_round_trip_random_scenes():
    rng = np.random.default_rng(17)
    for _ in range(100):
        r_true = rng.uniform(-200, 200, 3)
        if np.linalg.norm(r_true) < 20:
            continue
        q = rng.choice([-1.0, 1.0])
        m, theta = measurement_for(r_true, q=q, y_perp=rng.uniform(0, 2))
        r = loop_position(theta, m, q, C)
        assert np.linalg.norm(r - r_true) / np.linalg.norm(r_true) < 1e-6


def test_loop_periodicity():
    m = Measurement(delta_par=0.1, e_perp=0.3, y_perp=0.2)
    a = loop_position(1.2, m, -1.0, C)
    b = loop_position(1.2 + 2 * math.pi, m, -1.0, C)
    assert np.allclose(a, b, atol=1e-12)


def test_zero_field_is_singular():
    m = Measurement(delta_par=0.0, e_perp=0.3, y_perp=0.3)
    with pytest.raises(SingularityError):
        loop_position(0.0, m, -1.0, C)


def test_hole_sits_opposite_electron():
    m = Measurement(delta_par=0.1, e_perp=0.3, y_perp=0.0)
    e = loop_position(0.7, m, -1.0, C)
    h = loop_position(0.7, m, +1.0, C)
    assert np.allclose(e, -h, atol=1e-12)


def test_gaussian_loop_covariance_scales_with_variance():
    r_true = np.array([60.0, 20.0, 90.0])
    m, _ = measurement_for(r_true, sigma=0.01)
    big = gaussian_loop(m, -1.0, C)
    m2 = Measurement(m.delta_par, m.e_perp, m.y_perp,
                     m.var_par / 100, m.var_e_perp / 100, m.var_y_perp / 100)
    small = gaussian_loop(m2, -1.0, C)
    ratio = np.linalg.eigvalsh(big.components[0].cov)[-1] / \
        np.linalg.eigvalsh(small.components[0].cov)[-1]
    assert ratio == pytest.approx(100.0, rel=0.15)


def test_gaussian_loop_density_uniform_along_loop():
    r_true = np.array([60.0, 20.0, 90.0])
    m, _ = measurement_for(r_true, sigma=0.01)
    mix = gaussian_loop(m, -1.0, C)
    thetas = np.linspace(0, 2 * math.pi, 40, endpoint=False)
    dens = mix.density(np.array([loop_position(t, m, -1.0, C)
                                 for t in thetas]))
    assert dens.max() / dens.min() < 1.05


def test_gaussian_loop_normalizes_on_grid():
    m, _ = measurement_for(np.array([60.0, 20.0, 90.0]), sigma=0.01)
    mix = gaussian_loop(m, -1.0, C)
    post = render_mixture(mix, GridSpec.centered((400, 400, 400), (64, 64, 64)))
    assert post.total_mass == pytest.approx(1.0, abs=1e-3)


def test_gaussian_loop_requires_noise():
    m, _ = measurement_for(np.array([60.0, 20.0, 90.0]))
    with pytest.raises(ValueError):
        gaussian_loop(m, -1.0, C)


def test_diagonal_covariance_mode():
    m, _ = measurement_for(np.array([60.0, 20.0, 90.0]), sigma=0.01)
    mix = gaussian_loop(m, -1.0, C, diagonal_cov=True)
    for comp in mix.components[:5]:
        off_diag = comp.cov - np.diag(np.diag(comp.cov))
        assert np.abs(off_diag).max() < 1e-12


def test_bayes_mass_concentrates_on_loop():
    r_true = np.array([60.0, 20.0, 90.0])
    m, _ = measurement_for(r_true, sigma=1e-4)
    grid = GridSpec.centered((300, 300, 300), (96, 96, 96))
    post = bayes_posterior(m, -1.0, C, volume=grid)
    pts = grid.centers()
    thetas = np.linspace(0, 2 * math.pi, 720, endpoint=False)
    loop = np.array([loop_position(t, m, -1.0, C) for t in thetas])
    d_min = np.min(np.linalg.norm(pts[:, None, :] - loop[None, ::8, :],
                                  axis=-1), axis=1)
    near = post.masses[d_min < 6.0].sum()
    assert near >= 0.99


def test_bayes_mirror_symmetry_zero_bias():
    r_true = np.array([40.0, 25.0, 70.0])
    m, _ = measurement_for(r_true, y_perp=0.0, sigma=0.01)
    grid = GridSpec.centered((300, 300, 300), (32, 32, 32))
    neg = bayes_posterior(m, -1.0, C, volume=grid)
    pos = bayes_posterior(m, +1.0, C, volume=grid)
    flipped = pos.density.reshape(grid.dims)[::-1, ::-1, ::-1].ravel()
    assert np.allclose(neg.density, flipped, rtol=1e-9, atol=1e-15)


def test_bayes_boundary_warning_for_small_volume():
    m, _ = measurement_for(np.array([120.0, 0.0, 0.0]), sigma=0.01)
    tiny = GridSpec.centered((50, 50, 50), (16, 16, 16))
    with pytest.warns(UserWarning, match="boundary"):
        bayes_posterior(m, -1.0, C, volume=tiny)


def test_credible_regions_nest_and_grow():
    m, _ = measurement_for(np.array([60.0, 20.0, 90.0]), sigma=0.01)
    post = bayes_posterior(m, -1.0, C,
                           volume=GridSpec.centered((300, 300, 300),
                                                    (48, 48, 48)))
    m50, v50 = credible_region(post, 0.5)
    m90, v90 = credible_region(post, 0.9)
    assert v50 < v90
    assert not np.any(m50 & ~m90)


def test_posterior_compare_identity_and_disjoint():
    grid = GridSpec.centered((100, 100, 100), (16, 16, 16))
    d = np.zeros(16**3)
    d[0] = 1.0
    a = VoxelPosterior(grid=grid, density=d / (d.sum() * grid.voxel_volume))
    assert posterior_compare(a, a) == pytest.approx(1.0)
    d2 = np.zeros(16**3)
    d2[-1] = 1.0
    b = VoxelPosterior(grid=grid, density=d2 / (d2.sum() * grid.voxel_volume))
    assert posterior_compare(a, b) == pytest.approx(0.0)


def test_bayes_mixture_agreement_moderate_noise():
    r_true = np.array([80.0, -40.0, 120.0])
    m, _ = measurement_for(r_true, sigma=0.007)  # ~10% of the field scale
    grid = GridSpec.centered((600, 600, 600), (64, 64, 64))
    mix = gaussian_loop(m, -1.0, C)
    post = bayes_posterior(m, -1.0, C, volume=grid)
    assert posterior_compare(mix, post) >= 0.9


def test_voxel_posterior_io_round_trip(tmp_path):
    m, _ = measurement_for(np.array([60.0, 20.0, 90.0]), sigma=0.01)
    post = bayes_posterior(m, -1.0, C,
                           volume=GridSpec.centered((300, 300, 300),
                                                    (24, 24, 24)))
    post.save(tmp_path / "p")
    back = VoxelPosterior.load(tmp_path / "p")
    assert back.grid.dims == post.grid.dims
    assert back.charge_e == -1.0
    assert np.allclose(back.density, post.density, rtol=1e-6, atol=1e-12)


def test_loop_mixture_io_round_trip(tmp_path):
    m, _ = measurement_for(np.array([60.0, 20.0, 90.0]), sigma=0.01)
    mix = gaussian_loop(m, -1.0, C)
    mix.save(tmp_path / "loop.json")
    back = LoopMixture.load(tmp_path / "loop.json")
    assert len(back.components) == len(mix.components)
    assert np.allclose(back.components[3].cov, mix.components[3].cov)
    assert back.charge_e == -1.0
