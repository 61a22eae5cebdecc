import numpy as np
import pytest
from hypothesis import settings

from shtomo.field import MixtureSpec, ModeBasis, coherence_from_mixture
from shtomo.sensor import Aperture, PixelGrid, SensorGeometry, hexagonal_lens_centers

settings.register_profile("default", deadline=None, max_examples=30)
settings.load_profile("default")

# acceptance verdicts, printed as one block at the end of the run
CRITERIA: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str, seconds: float) -> None:
    CRITERIA[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  ({seconds:.1f} s) {detail}"


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])

LAM = 633e-6
CHARGES = (-9, -6, -3, 0, 3, 6, 9)


def random_rho(rng, d, rank=None):
    rank = rank or d
    a = rng.normal(size=(d, rank)) + 1j * rng.normal(size=(d, rank))
    rho = a @ a.conj().T
    return rho / np.trace(rho).real


def mixed_vortex_state(waist):
    basis = ModeBasis.vortex(CHARGES, waist, LAM)
    ket1 = np.zeros(7, complex)
    ket1[2], ket1[1] = 1.0, -0.5j
    ket2 = np.zeros(7, complex)
    ket2[4] = 1.0
    return coherence_from_mixture(MixtureSpec([(1.0, ket1), (0.5, ket2)]), basis)


def hex7(n_quad=256, pixels=(11, 11)):
    return SensorGeometry(hexagonal_lens_centers(1, 0.3), Aperture("hexagon", 0.3), 17.9, LAM,
                          PixelGrid(0.0099, pixels), n_quad)


def line_sensor(centers, side=2.0, n_pix=81, pmax=12.0, n_quad=256):
    """Dimensionless 1D square-aperture sensor (wavelength 2*pi, f = 1, so dp = u)."""
    pitch = 2 * pmax / (n_pix - 1)
    return SensorGeometry(np.asarray(centers, float)[:, None], Aperture("square", side), 1.0, 2 * np.pi,
                          PixelGrid(pitch, (n_pix,)), n_quad)


@pytest.fixture(scope="session")
def hex7_geom():
    return hex7()


def complete_line_setup(d, rng):
    """Random 1D plane-wave basis with enough generic lenses to make P full rank."""
    n_lens = 2 if d == 2 else int(np.ceil(d * (d - 1) / (2 * d - 3))) + 1
    p = np.linspace(-1.5, 1.5, d) * d / 3 + rng.uniform(-0.2, 0.2, d)
    xs = np.arange(n_lens) * 2.7 + rng.uniform(-0.3, 0.3, n_lens) - 1.3 * n_lens
    return ModeBasis.plane_waves(p, 2 * np.pi), line_sensor(xs, n_pix=61, pmax=10, n_quad=128)
