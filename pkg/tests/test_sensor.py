import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from shtomo.errors import ApertureError, DimensionError, GeometryError, SamplingError
from shtomo.field import CoherenceMatrix, ModeBasis
from shtomo.io import read_pgm
from shtomo.sensor import (Aperture, IntensityRecord, NoiseSpec, PixelGrid, SensorGeometry, hexagonal_lens_centers,
                           husimi_sample, measurement_kets, povm_element, povm_elements, response_amplitudes,
                           simulate_intensities, sinc_povm_analytic)

from conftest import mixed_vortex_state, hex7, line_sensor, random_rho


def test_hexagonal_centres():
    c = hexagonal_lens_centers(1, 0.3)
    assert c.shape == (7, 2)
    np.testing.assert_allclose(c[0], 0.0)
    np.testing.assert_allclose(np.linalg.norm(c[1:], axis=1), 0.3)
    assert len(hexagonal_lens_centers(2, 0.3)) == 19
    assert len(hexagonal_lens_centers(3, 0.3)) == 37


@pytest.mark.parametrize("kwargs", [
    dict(lens_centers=[[0.0], [0.0]]),
    dict(lens_centers=[[0.0], [1.5]]),
    dict(n_quad=100),
    dict(n_quad=16),
    dict(focal_length=-1.0),
])
def test_geometry_validation(kwargs):
    base = dict(lens_centers=[[0.0], [3.0]], aperture=Aperture("square", 2.0), focal_length=1.0,
                wavelength=2 * math.pi, pixels=PixelGrid(0.1, (11,)), n_quad=64)
    base.update(kwargs)
    with pytest.raises(GeometryError):
        SensorGeometry(**base)


def test_hexagon_needs_2d():
    with pytest.raises(GeometryError):
        SensorGeometry([[0.0]], Aperture("hexagon", 1.0), 1.0, 1.0, PixelGrid(0.1, (5,)))


def test_pixel_momentum_mapping():
    g = hex7()
    u = g.pixels.positions()
    np.testing.assert_allclose(g.pixel_momenta(), 2 * math.pi * u / (g.wavelength * g.focal_length))


def test_sinc_oracle_at_default_and_fine_sampling():
    rng = np.random.default_rng(0)
    for n_quad, tol in ((256, 1e-3), (1024, 1e-4)):
        for _ in range(5):
            p = rng.uniform(-4, 4, 3)
            dx = rng.uniform(-5, 5)
            g = line_sensor([dx], n_quad=n_quad)
            basis = ModeBasis.plane_waves(p, 2 * math.pi)
            for j in (0, 20, 40, 63):
                num = povm_element(basis, g, 0, j).pi
                ana = sinc_povm_analytic(p, dx, g.pixel_momenta()[j, 0]).pi
                assert np.max(np.abs(num - ana)) <= tol * np.max(np.abs(ana))


def test_sinc_analytic_examples():
    pi = sinc_povm_analytic([0.7, 0.7 + 1e-9], 0.0, -0.7).pi
    assert pi[0, 0] == pytest.approx(1.0)
    pi = sinc_povm_analytic([0.3, -1.2, 2.0], 0.0, 0.4).pi
    assert np.all(pi.imag == 0) and np.allclose(pi, pi.T)


def test_square_on_axis_real_symmetric():
    g = line_sensor([0.0])
    basis = ModeBasis.plane_waves([-0.5, 0.8], 2 * math.pi)
    pis = povm_elements(basis, g)
    assert np.max(np.abs(pis.imag)) < 1e-12
    np.testing.assert_allclose(pis, np.transpose(pis, (0, 2, 1)), atol=1e-14)


def test_unbounded_aperture_sharp_momentum():
    p = 1.5
    basis = ModeBasis.plane_waves([p, -2.0], 2 * math.pi)
    ratios = []
    for window in (10.0, 40.0, 160.0):
        g = SensorGeometry([[0.0]], Aperture("unbounded", window), 1.0, 2 * math.pi,
                           PixelGrid(0.05, (121,)), 2048)
        amp = np.abs(response_amplitudes(basis, g, 0)[0])
        peak = int(np.argmax(amp))
        assert g.pixel_momenta()[peak, 0] == pytest.approx(-p, abs=0.026)
        far = np.abs(g.pixel_momenta()[:, 0] + p) > 1.0
        ratios.append(amp[peak] / amp[far].max())
    assert ratios[0] < ratios[1] < ratios[2]


def test_pointlike_aperture_loses_momentum():
    basis = ModeBasis.vortex([-2, 0, 1], 0.4)
    g = SensorGeometry([[0.1, 0.2]], Aperture("pointlike"), 10.0, 633e-6, PixelGrid(0.01, (9, 9)), 32)
    amp = np.abs(response_amplitudes(basis, g, 0))
    cv = amp.std(axis=1) / amp.mean(axis=1)
    assert np.all(cv <= 1e-6)


def test_povm_is_outer_product():
    g = hex7(n_quad=64, pixels=(5, 5))
    basis = ModeBasis.vortex([-1, 0, 2], 0.3)
    psi = response_amplitudes(basis, g, 3)
    op = povm_element(basis, g, 3, 7)
    for m in range(3):
        for n in range(3):
            assert op.pi[m, n] == pytest.approx(psi[n, 7] * np.conj(psi[m, 7]), abs=1e-15)
    np.testing.assert_allclose(np.outer(op.ket(), op.ket().conj()), op.pi, atol=1e-14)


@given(st.integers(0, 2**32 - 1), st.sampled_from(["square", "gaussian", "unbounded"]))
def test_povm_elements_rank_one_psd(seed, kind):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 5))
    basis = ModeBasis.plane_waves(rng.uniform(-2, 2, d) + np.arange(d) * 1e-3, 2 * math.pi)
    size = 2.0 if kind != "gaussian" else 0.6
    g = SensorGeometry(rng.uniform(-3, 3, (1, 1)), Aperture(kind, size), 1.0, 2 * math.pi,
                       PixelGrid(0.4, (9,)), 64)
    for pi in povm_elements(basis, g):
        assert np.max(np.abs(pi - pi.conj().T)) < 1e-14
        w = np.linalg.eigvalsh(pi)
        assert w[0] >= -1e-12 * max(w[-1], 1e-300)
        assert w[-2] <= 1e-10 * max(w[-1], 1e-300) + 1e-300


def test_born_rule_linearity():
    rng = np.random.default_rng(5)
    g = hex7(n_quad=64, pixels=(7, 7))
    basis = ModeBasis.vortex([-2, 0, 2, 4], 0.3)
    r1, r2 = random_rho(rng, 4), random_rho(rng, 4)
    i1 = simulate_intensities(CoherenceMatrix(r1, basis), g).values
    i2 = simulate_intensities(CoherenceMatrix(r2, basis), g).values
    i12 = simulate_intensities(CoherenceMatrix(0.3 * r1 + 1.7 * r2, basis), g).values
    np.testing.assert_allclose(i12, 0.3 * i1 + 1.7 * i2, atol=1e-12 * i12.max())


def test_maximally_mixed_symmetric_pattern():
    g = line_sensor([0.0, 3.0], n_pix=41)
    basis = ModeBasis.plane_waves([-1.3, 0.0, 1.3], 2 * math.pi)
    vals = simulate_intensities(CoherenceMatrix(np.eye(3), basis), g).values
    np.testing.assert_allclose(vals, vals[:, ::-1], atol=1e-12 * vals.max())


def test_mixed_vortex_central_lens_dark():
    # wide beam: the vortex ring clears the central lenslet
    power = simulate_intensities(mixed_vortex_state(0.3), hex7()).lens_power()
    assert power[0] < 0.02 * power[1:].mean()


def test_lens_power_parseval():
    # 1D square aperture: sum_j I_j dp * area^2 / 2pi equals the transmitted power
    rng = np.random.default_rng(2)
    p = np.array([-1.0, 0.4, 2.5])
    rho = CoherenceMatrix(random_rho(rng, 3), ModeBasis.plane_waves(p, 2 * math.pi))
    dx, side = 0.7, 2.0
    g = SensorGeometry([[dx]], Aperture("square", side), 1.0, 2 * math.pi, PixelGrid(0.5, (8001,)), 4096)
    detected = simulate_intensities(rho, g).values.sum() * 0.5 * side**2 / (2 * math.pi)
    x, w = np.polynomial.legendre.leggauss(200)
    psi = rho.basis.amplitudes(dx + x * side / 2)
    direct = np.sum(w * side / 2 * np.einsum("xm,mn,xn->x", psi, rho.rho, psi.conj()).real)
    assert detected == pytest.approx(direct, rel=1e-3)


def test_sampling_error_on_coarse_grid():
    basis = ModeBasis.plane_waves([0.0, 200.0], 2 * math.pi)
    with pytest.raises(SamplingError):
        simulate_intensities(CoherenceMatrix(np.eye(2), basis), line_sensor([0.0], n_quad=32))


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        response_amplitudes(ModeBasis.vortex([0, 1], 1.0), line_sensor([0.0]), 0)


def test_overlap_of_disjoint_lenses_shrinks_with_band():
    # a dense plane-wave comb approaches a complete basis; kets of disjoint lenses decouple
    overlaps = []
    for k in (8, 32, 128):
        basis = ModeBasis.plane_waves(np.arange(-k, k + 1) * 0.25, 2 * math.pi)
        g = SensorGeometry([[0.0], [3.0]], Aperture("square", 2.0), 1.0, 2 * math.pi,
                           PixelGrid(0.5, (5,)), 1024)
        kets = measurement_kets(basis, g)[0]
        a, b = kets[2], kets[7]
        overlaps.append(abs(np.vdot(a, b)) / (np.linalg.norm(a) * np.linalg.norm(b)))
    assert overlaps[0] > overlaps[1] > overlaps[2]
    assert overlaps[2] < 0.05


def test_finite_pixels_average_subsamples():
    basis = ModeBasis.plane_waves([-1.0, 0.5], 2 * math.pi)
    g_point = line_sensor([0.0], n_pix=21)
    g_area = SensorGeometry(g_point.lens_centers, g_point.aperture, 1.0, 2 * math.pi, g_point.pixels,
                            256, finite_pixels=True)
    pis = povm_elements(basis, g_area)
    q = g_point.pixels.pitch / 4
    for j in (3, 10):
        u = g_point.pixel_momenta()[j, 0]
        expect = 0.5 * (sinc_povm_analytic([-1.0, 0.5], 0.0, u - q).pi
                        + sinc_povm_analytic([-1.0, 0.5], 0.0, u + q).pi)
        np.testing.assert_allclose(pis[j], expect, atol=1e-6)


def test_noise_models_are_seeded():
    rho = mixed_vortex_state(0.22)
    g = hex7(n_quad=128)
    clean = simulate_intensities(rho, g).values
    for spec in (NoiseSpec("gaussian", sigma=0.01), NoiseSpec("background", sigma=0.01, offset=0.02),
                 NoiseSpec("poisson", photons=1e5)):
        a = simulate_intensities(rho, g, spec, seed=7).values
        b = simulate_intensities(rho, g, spec, seed=7).values
        np.testing.assert_array_equal(a, b)
        assert np.all(a >= 0) and not np.array_equal(a, clean)
    noisy = simulate_intensities(rho, g, NoiseSpec("gaussian", sigma=0.01), seed=1).values
    resid = (noisy - clean)[clean > 0.2 * clean.max()]
    assert np.std(resid) == pytest.approx(0.01 * clean.max(), rel=0.2)


def test_intensity_record_io(tmp_path):
    rec = simulate_intensities(mixed_vortex_state(0.22), hex7(n_quad=128))
    rec.to_csv(tmp_path / "i.csv")
    back = IntensityRecord.from_csv(tmp_path / "i.csv")
    np.testing.assert_array_equal(back.values, rec.values)
    assert back.pixel_shape == (11, 11)
    paths = rec.to_pgm(tmp_path / "pgm")
    assert len(paths) == 7
    img = read_pgm(paths[3])
    assert img.shape == (11, 11)
    np.testing.assert_allclose(img, rec.lens_image(3) / rec.values.max(), atol=1 / 65535)


def test_intensity_record_validation():
    with pytest.raises(ValueError):
        IntensityRecord(-np.ones((2, 4)), (2, 2))
    with pytest.raises(DimensionError):
        IntensityRecord(np.ones((2, 5)), (2, 2))


def test_husimi_requires_gaussian():
    rho = CoherenceMatrix(np.eye(2), ModeBasis.plane_waves([0.0, 1.0], 2 * math.pi))
    with pytest.raises(ApertureError):
        husimi_sample(rho, line_sensor([0.0]))


def test_husimi_matched_gaussian_peaks_at_origin():
    # LG0 with w0 = sqrt(2) is exp(-r^2/2), the vacuum for apertures exp(-x^2/2)
    basis = ModeBasis.vortex([0, 1], math.sqrt(2.0), wavelength=2 * math.pi)
    rho = CoherenceMatrix(np.diag([1.0, 0.0]), basis)
    centers = np.array([[0.0, 0.0], [0.5, 0.0], [1.0, 0.0], [2.0, 0.0]])
    g = SensorGeometry(centers, Aperture("gaussian", 1.0), 1.0, 2 * math.pi, PixelGrid(0.5, (9, 9)), 256)
    q = husimi_sample(rho, g)
    alpha2 = np.sum(q.displacements**2, axis=1)[:, None] + np.sum(q.momenta**2, axis=1)[None, :]
    order = np.argsort(alpha2.ravel(), kind="stable")
    assert np.argmax(q.q) == order[0]
    expect = np.exp(-alpha2 / 2)
    np.testing.assert_allclose(q.q / q.q.max(), expect, atol=1e-9)


def test_husimi_flat_for_maximally_mixed_symmetric():
    basis = ModeBasis.vortex([-1, 1], 1.0, wavelength=2 * math.pi)
    rho = CoherenceMatrix(np.eye(2), basis)
    g = SensorGeometry([[0.5, 0.0], [-0.5, 0.0]], Aperture("gaussian", 0.4), 1.0, 2 * math.pi,
                       PixelGrid(0.5, (5, 5)), 128)
    q = husimi_sample(rho, g).q
    np.testing.assert_allclose(q[0], q[1][::-1], atol=1e-9 * q.max())
    assert np.all(q >= 0)


def test_husimi_nonnegative_random_states():
    rng = np.random.default_rng(9)
    basis = ModeBasis.vortex([-2, -1, 0, 1, 2], 1.0, wavelength=2 * math.pi)
    g = SensorGeometry([[0.0, 0.0], [1.0, 0.5]], Aperture("gaussian", 0.7), 1.0, 2 * math.pi,
                       PixelGrid(0.4, (5, 5)), 64)
    kets = measurement_kets(basis, g)
    for _ in range(1000):
        rho = random_rho(rng, 5, rank=int(rng.integers(1, 6)))
        assert np.einsum("sam,mn,san->a", kets.conj(), rho, kets).real.min() >= -1e-15
