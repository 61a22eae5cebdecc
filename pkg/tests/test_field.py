import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import unitary_group

from shtomo.errors import DimensionError, InvalidStateError
from shtomo.field import (CoherenceMatrix, MixtureSpec, ModeBasis, coherence_from_mixture, fidelity,
                          intensity_at, lg_radial, purity)

from conftest import CHARGES, LAM, mixed_vortex_state, random_rho


def test_pure_basis_state():
    rho = coherence_from_mixture(MixtureSpec([(1.0, [1, 0])]), d=2)
    np.testing.assert_array_equal(rho.rho, [[1, 0], [0, 0]])


def test_mixed_vortex_matrix_elements():
    rho = mixed_vortex_state(0.22).rho
    i = {ell: k for k, ell in enumerate(CHARGES)}
    assert rho[i[-3], i[-3]] == pytest.approx(1.0)
    assert rho[i[-6], i[-6]] == pytest.approx(0.25)
    assert rho[i[3], i[3]] == pytest.approx(0.5)
    assert rho[i[-3], i[-6]] == pytest.approx(0.5j)
    assert rho[i[-6], i[-3]] == pytest.approx(-0.5j)
    assert mixed_vortex_state(0.22).trace == pytest.approx(1.75)


def test_maximally_mixed_qubit():
    rho = coherence_from_mixture(MixtureSpec([(0.5, [1, 0]), (0.5, [0, 1])]), d=2)
    np.testing.assert_allclose(rho.rho, np.diag([0.5, 0.5]))
    assert purity(rho) == pytest.approx(0.5)


def test_ket_length_mismatch():
    basis = ModeBasis.vortex([-1, 0, 1], 1.0)
    with pytest.raises(DimensionError):
        coherence_from_mixture(MixtureSpec([(1.0, [1, 0])]), basis)


@pytest.mark.parametrize("components", [[], [(0.0, [1, 0])], [(-1.0, [1, 0])]])
def test_mixture_rejects_bad_weights(components):
    with pytest.raises(InvalidStateError):
        MixtureSpec(components)


def test_coherence_matrix_validation():
    with pytest.raises(InvalidStateError):
        CoherenceMatrix([[1, 1j], [1j, 1]])
    with pytest.raises(InvalidStateError):
        CoherenceMatrix(np.diag([1.0, -0.5]))
    with pytest.raises(InvalidStateError):
        CoherenceMatrix(np.zeros((2, 2)))
    with pytest.raises(DimensionError):
        CoherenceMatrix(np.eye(3), ModeBasis.vortex([0, 1], 1.0))


def test_fidelity_examples():
    assert fidelity(np.eye(2), np.eye(2)) == pytest.approx(1.0)
    assert fidelity(np.diag([1.0, 0]), np.diag([0, 1.0])) == pytest.approx(0.0, abs=1e-12)
    assert fidelity(np.diag([1.0, 0]), np.diag([0.5, 0.5])) == pytest.approx(math.sqrt(0.5))


def test_fidelity_rejects_non_psd():
    with pytest.raises(InvalidStateError):
        fidelity(np.diag([1.0, -1.0]) + 0.1 * np.eye(2), np.eye(2))


def test_purity_examples():
    assert purity(np.diag([1.0, 0, 0])) == pytest.approx(1.0)
    assert purity(np.eye(5)) == pytest.approx(0.2)
    r = mixed_vortex_state(0.22).normalized().rho
    assert purity(mixed_vortex_state(0.22)) == pytest.approx(np.trace(r @ r).real)


@given(st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_fidelity_unitary_invariance_and_symmetry(d, seed):
    rng = np.random.default_rng(seed)
    a, b = random_rho(rng, d), random_rho(rng, d, rank=1 + seed % d)
    u = unitary_group.rvs(d, random_state=seed % 2**31)
    f = fidelity(a, b)
    assert 0.0 <= f <= 1.0
    assert fidelity(b, a) == pytest.approx(f, abs=1e-9)
    assert fidelity(u @ a @ u.conj().T, u @ b @ u.conj().T) == pytest.approx(f, abs=1e-9)


@given(st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_mixture_always_valid(n, seed):
    rng = np.random.default_rng(seed)
    comps = [(float(rng.uniform(0.1, 2)), rng.normal(size=5) + 1j * rng.normal(size=5)) for _ in range(n)]
    rho = coherence_from_mixture(MixtureSpec(comps), d=5)
    assert np.max(np.abs(rho.rho - rho.rho.conj().T)) <= 1e-12
    assert np.linalg.eigvalsh(rho.rho)[0] >= -1e-10 * rho.trace
    assert 1 / 5 - 1e-12 <= purity(rho) <= 1 + 1e-12


def test_plane_wave_intensity_is_one():
    basis = ModeBasis.plane_waves([[0.3, -1.0], [2.0, 0.5]])
    rho = CoherenceMatrix(np.diag([0.0, 1.0]), basis)
    pts = np.random.default_rng(1).uniform(-5, 5, (50, 2))
    np.testing.assert_allclose(intensity_at(rho, pts), 1.0, atol=1e-12)


def test_vortex_dark_on_axis():
    basis = ModeBasis.vortex([-2, 0, 3], 0.5)
    for k, ell in enumerate(basis.charges):
        rho = CoherenceMatrix(np.diag(np.eye(3)[k]), basis)
        val = intensity_at(rho, [0.0, 0.0])
        if ell:
            assert val == 0.0
        else:
            assert val > 0


def test_vortex_azimuthal_structure():
    basis = ModeBasis.vortex([-3, 2], 0.7)
    r, phi = 0.4, np.linspace(0, 2 * np.pi, 13)
    amps = basis.amplitudes(np.stack([r * np.cos(phi), r * np.sin(phi)], -1))
    for k, ell in enumerate(basis.charges):
        np.testing.assert_allclose(amps[:, k], lg_radial(ell, 0.7, r) * np.exp(1j * ell * phi), atol=1e-14)
        assert lg_radial(ell, 0.7, r) >= 0


def test_lg_unit_norm():
    r = np.linspace(0, 6, 20001)
    for ell in (0, 1, 4, 9):
        norm = 2 * np.pi * np.trapezoid(lg_radial(ell, 0.8, r) ** 2 * r, r)
        assert norm == pytest.approx(1.0, rel=1e-6)


def test_mixed_vortex_intensity_matches_double_sum():
    rho = mixed_vortex_state(0.3)
    rr, pp = np.meshgrid(np.linspace(0, 0.6, 9), np.linspace(0, 2 * np.pi, 16), indexing="ij")
    pts = np.stack([rr * np.cos(pp), rr * np.sin(pp)], -1)
    psi = rho.basis.amplitudes(pts)
    brute = np.zeros(pts.shape[:-1])
    for m in range(7):
        for n in range(7):
            brute = brute + (psi[..., m] * rho.rho[m, n] * np.conj(psi[..., n])).real
    np.testing.assert_allclose(intensity_at(rho, pts), brute, atol=1e-12)


def test_diagonal_mixture_is_rotationally_symmetric():
    basis = ModeBasis.vortex(CHARGES, 0.3, LAM)
    rho = CoherenceMatrix(np.diag(np.random.default_rng(3).uniform(0, 1, 7)), basis)
    phi = np.linspace(0, 2 * np.pi, 37)
    for r in (0.1, 0.3, 0.5):
        vals = intensity_at(rho, np.stack([r * np.cos(phi), r * np.sin(phi)], -1))
        assert np.ptp(vals) <= 1e-10 * max(vals.max(), 1.0)


def test_serialisation_round_trip(tmp_path):
    rho = mixed_vortex_state(0.22)
    rho.to_json(tmp_path / "rho.json")
    back = CoherenceMatrix.from_json(tmp_path / "rho.json")
    np.testing.assert_array_equal(back.rho, rho.rho)
    assert back.basis.charges == rho.basis.charges and back.basis.waist == rho.basis.waist
    rho.to_csv(tmp_path / "re.csv", tmp_path / "im.csv")
    assert len((tmp_path / "re.csv").read_text().splitlines()) == 7
    np.testing.assert_array_equal(CoherenceMatrix.from_csv(tmp_path / "re.csv", tmp_path / "im.csv").rho, rho.rho)


def test_basis_validation():
    with pytest.raises(DimensionError):
        ModeBasis.vortex([1], 1.0)
    with pytest.raises(DimensionError):
        ModeBasis.vortex([1, 1], 1.0)
    with pytest.raises(DimensionError):
        ModeBasis.plane_waves([0.0, 0.0])
    assert ModeBasis.vortex([-3, 0, 3], 1.0).labels == ["V-3", "V0", "V+3"]
