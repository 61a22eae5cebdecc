"""Shack-Hartmann forward model: microlens apertures, CCD pixels, POVM elements.

A lens centred at ``c`` sees the incident field ``U(c + x)`` in its local
coordinate ``x``. The complex amplitude at a pixel with momentum displacement
``dp`` is

    psi(dp) = (1/area) * integral conj(A(x)) U(c + x) exp(-i dp.x) dx,

normalised so that a unit on-axis plane wave gives unit peak amplitude. The
integral is a separable matrix Fourier transform on the aperture quadrature
grid, so it is exact at whatever pixel momenta are requested.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ApertureError, DimensionError, GeometryError, SamplingError
from .field import CoherenceMatrix, ModeBasis
from .fourier import mft
from .io import write_pgm


class ApertureKind(str, Enum):
    SQUARE = "square"
    HEXAGON = "hexagon"
    GAUSSIAN = "gaussian"
    POINTLIKE = "pointlike"
    UNBOUNDED = "unbounded"


@dataclass(frozen=True)
class Aperture:
    """Microlens pupil.

    ``size`` is the side of a square, the flat-to-flat width of a hexagon,
    the 1/e amplitude half-width ``w`` of a Gaussian ``exp(-x^2 / 2w^2)``,
    or the integration window of an unbounded aperture.
    """

    kind: ApertureKind
    size: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ApertureKind(self.kind))
        if self.kind is not ApertureKind.POINTLIKE and not self.size > 0:
            raise ApertureError(f"{self.kind.value} aperture needs a positive size")

    @property
    def footprint(self) -> float | None:
        """Width used for the non-overlap check; None when apertures may overlap."""
        if self.kind in (ApertureKind.SQUARE, ApertureKind.HEXAGON):
            return self.size
        if self.kind is ApertureKind.POINTLIKE:
            return 0.0
        return None

    def area(self, ndim: int) -> float:
        if self.kind is ApertureKind.SQUARE or self.kind is ApertureKind.UNBOUNDED:
            return self.size**ndim
        if self.kind is ApertureKind.HEXAGON:
            return math.sqrt(3.0) / 2.0 * self.size**2
        if self.kind is ApertureKind.GAUSSIAN:
            return (math.sqrt(2 * math.pi) * self.size) ** ndim
        return 0.0


@dataclass(frozen=True)
class PixelGrid:
    """Regular CCD pixel grid centred on each lens axis. ``counts`` is (n,) or (nu, nv)."""

    pitch: float
    counts: tuple[int, ...]

    def __post_init__(self):
        counts = tuple(int(c) for c in np.atleast_1d(self.counts))
        if not self.pitch > 0 or not counts or min(counts) < 1:
            raise GeometryError("pixel grid needs a positive pitch and counts")
        object.__setattr__(self, "counts", counts)

    @property
    def ndim(self) -> int:
        return len(self.counts)

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    def axes(self) -> list[np.ndarray]:
        return [(np.arange(n) - (n - 1) / 2.0) * self.pitch for n in self.counts]

    def positions(self) -> np.ndarray:
        """Pixel centres, shape (size, ndim), row-major over (u, v)."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass(frozen=True, eq=False)
class SensorGeometry:
    """Microlens array plus detector.

    Pixel ``u`` behind a lens of focal length ``f`` maps to the momentum
    displacement ``dp = 2*pi*u / (wavelength*f)``. Dimensionless set-ups use
    ``wavelength=2*pi, focal_length=1`` so that ``dp == u``.
    """

    lens_centers: np.ndarray
    aperture: Aperture
    focal_length: float
    wavelength: float
    pixels: PixelGrid
    n_quad: int = 256
    finite_pixels: bool = False

    def __post_init__(self):
        c = np.array(self.lens_centers, dtype=float)
        if c.ndim == 1:
            c = c[:, None]
        if c.ndim != 2 or c.shape[1] not in (1, 2) or c.shape[0] < 1:
            raise GeometryError("lens_centers must have shape (M, 1|2)")
        if c.shape[1] != self.pixels.ndim:
            raise GeometryError("pixel grid and lens centres differ in dimension")
        if self.aperture.kind is ApertureKind.HEXAGON and c.shape[1] != 2:
            raise GeometryError("hexagonal apertures are two-dimensional")
        if not (self.focal_length > 0 and self.wavelength > 0):
            raise GeometryError("focal length and wavelength must be positive")
        n = self.n_quad
        if n < 32 or n & (n - 1):
            raise GeometryError("n_quad must be a power of two >= 32")
        if c.shape[0] > 1:
            dist = np.linalg.norm(c[:, None, :] - c[None, :, :], axis=-1)
            dist = dist[np.triu_indices(c.shape[0], 1)]
            if np.min(dist) <= 0:
                raise GeometryError("lens centres must be distinct")
            width = self.aperture.footprint
            if width is not None and np.min(dist) < width * (1 - 1e-9):
                raise GeometryError("microlens apertures overlap")
        c.setflags(write=False)
        object.__setattr__(self, "lens_centers", c)

    @property
    def ndim(self) -> int:
        return self.lens_centers.shape[1]

    @property
    def n_lenses(self) -> int:
        return self.lens_centers.shape[0]

    @property
    def n_pixels(self) -> int:
        return self.pixels.size

    @property
    def n_measurements(self) -> int:
        return self.n_lenses * self.n_pixels

    def momentum_scale(self) -> float:
        return 2.0 * math.pi / (self.wavelength * self.focal_length)

    def momentum_axes(self) -> list[np.ndarray]:
        return [a * self.momentum_scale() for a in self.pixels.axes()]

    def pixel_momenta(self) -> np.ndarray:
        return self.pixels.positions() * self.momentum_scale()

    def row_index(self) -> list[tuple[int, int]]:
        return [(i, j) for i in range(self.n_lenses) for j in range(self.n_pixels)]


def hexagonal_lens_centers(rings: int, pitch: float) -> np.ndarray:
    """Centres of a hexagonal lenslet array: centre lens first, then ring by ring.

    Lenses have flats facing +-y, so nearest neighbours sit at 30 + 60k degrees
    and ``pitch`` equals the flat-to-flat width of a close-packed array.
    """
    a1 = np.array([math.sqrt(3.0) / 2.0, 0.5]) * pitch
    a2 = np.array([0.0, 1.0]) * pitch
    cells = []
    for q in range(-rings, rings + 1):
        for r in range(-rings, rings + 1):
            ring = max(abs(q), abs(r), abs(q + r))
            if ring <= rings:
                pos = q * a1 + r * a2
                angle = math.atan2(pos[1], pos[0]) % (2 * math.pi)
                cells.append((ring, round(angle, 9), pos))
    cells.sort(key=lambda c: (c[0], c[1]))
    return np.array([c[2] for c in cells])


# quadrature --------------------------------------------------------------

def _midpoint(half: float, n: int):
    h = 2.0 * half / n
    return (np.arange(n) + 0.5) * h - half, np.full(n, h)


def _quadrature(aperture: Aperture, ndim: int, n: int):
    """Per-axis nodes and the weight array ``w(x) * conj(A(x))`` on the tensor grid."""
    kind = aperture.kind
    if kind is ApertureKind.POINTLIKE:
        return [np.zeros(1)] * ndim, np.ones((1,) * ndim)
    if kind is ApertureKind.SQUARE:
        t, w = np.polynomial.legendre.leggauss(n)
        axes = [t * aperture.size / 2.0] * ndim
        ws = [w * aperture.size / 2.0] * ndim
        weights = ws[0] if ndim == 1 else np.outer(ws[0], ws[1])
        return axes, weights
    if kind is ApertureKind.UNBOUNDED:
        x, w = _midpoint(aperture.size / 2.0, n)
        return [x] * ndim, (w if ndim == 1 else np.outer(w, w))
    if kind is ApertureKind.GAUSSIAN:
        x, w = _midpoint(7.0 * aperture.size, n)
        g = w * np.exp(-x**2 / (2.0 * aperture.size**2))
        return [x] * ndim, (g if ndim == 1 else np.outer(g, g))
    # hexagon, flats facing +-y, vertices on the x axis
    width = aperture.size
    rc = width / math.sqrt(3.0)
    x, wx = _midpoint(rc, n)
    y, wy = _midpoint(width / 2.0, n)
    X, Y = np.meshgrid(x, y, indexing="ij")
    inside = (np.abs(Y) <= width / 2.0) & (math.sqrt(3.0) * np.abs(X) + np.abs(Y) <= width)
    return [x, y], np.outer(wx, wy) * inside


def _max_step(axes) -> float:
    return max((float(np.max(np.diff(a))) if a.size > 1 else 0.0) for a in axes)


def _subsample_offsets(geom: SensorGeometry) -> np.ndarray:
    if not geom.finite_pixels:
        return np.zeros((1, geom.ndim))
    q = geom.pixels.pitch / 4.0 * geom.momentum_scale()
    grid = np.meshgrid(*([np.array([-q, q])] * geom.ndim), indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=-1)


def _transform(samples, axes, momenta=None, maxes=None):
    return mft(samples, axes, maxes=maxes, points=momenta)


def _lens_samples(fn, geom: SensorGeometry, lens: int):
    axes, weights = _quadrature(geom.aperture, geom.ndim, geom.n_quad)
    c = geom.lens_centers[lens]
    mesh = np.meshgrid(*[a + c[k] for k, a in enumerate(axes)], indexing="ij")
    pts = np.stack(mesh, axis=-1)
    vals = fn(pts)  # (*grid, d)
    area = float(np.sum(weights))
    samples = np.moveaxis(vals, -1, 0) * weights / area
    return axes, samples


def _check_sampling(basis_bw: float, axes, momenta_max: float, geom: SensorGeometry):
    extra = 0.0
    if geom.aperture.kind is ApertureKind.GAUSSIAN:
        extra = 6.0 / geom.aperture.size
    step = _max_step(axes)
    if (basis_bw + momenta_max + extra) * step > math.pi:
        raise SamplingError(
            f"aperture grid step {step:.3g} too coarse for band limit "
            f"{basis_bw + momenta_max + extra:.3g} rad/length (n_quad={geom.n_quad})")


def response_amplitudes(basis: ModeBasis, geom: SensorGeometry, lens: int,
                        momenta=None) -> np.ndarray:
    """CCD-plane amplitudes ``psi_{m,lens}(dp_j)``; shape (d, n_pixels).

    ``momenta`` overrides the pixel grid with explicit displacements (n, ndim).
    """
    if not 0 <= lens < geom.n_lenses:
        raise IndexError(f"lens index {lens} out of range")
    if basis.ndim != geom.ndim:
        raise DimensionError("basis and sensor differ in dimension")
    axes, samples = _lens_samples(basis.amplitudes, geom, lens)
    if momenta is not None:
        momenta = np.asarray(momenta, dtype=float).reshape(-1, geom.ndim)
        pmax = float(np.max(np.linalg.norm(momenta, axis=1)))
        _check_sampling(basis.bandwidth(), axes, pmax, geom)
        return _transform(samples, axes, momenta=momenta)
    offsets = _subsample_offsets(geom)
    pmax = float(np.max(np.linalg.norm(geom.pixel_momenta(), axis=1))) + float(np.max(np.abs(offsets)))
    _check_sampling(basis.bandwidth(), axes, pmax, geom)
    return _transform(samples, axes, maxes=geom.momentum_axes())


def measurement_kets(basis: ModeBasis, geom: SensorGeometry) -> np.ndarray:
    """Vectors ``|pi_a>`` for every (lens, pixel) row; shape (n_sub, n_meas, d).

    ``Pi_a = mean_s |pi_sa><pi_sa|``; n_sub is 1 for point pixels and 2**ndim
    when finite pixel area is modelled.
    """
    offsets = _subsample_offsets(geom)
    out = np.empty((offsets.shape[0], geom.n_measurements, basis.d), dtype=complex)
    base = geom.momentum_axes()
    for i in range(geom.n_lenses):
        rows = slice(i * geom.n_pixels, (i + 1) * geom.n_pixels)
        if not geom.finite_pixels:
            out[0, rows] = response_amplitudes(basis, geom, i).T.conj()
            continue
        axes, samples = _lens_samples(basis.amplitudes, geom, i)
        pmax = float(np.max(np.linalg.norm(geom.pixel_momenta(), axis=1))) + float(np.max(np.abs(offsets)))
        _check_sampling(basis.bandwidth(), axes, pmax, geom)
        for s, off in enumerate(offsets):
            amp = _transform(samples, axes, maxes=[a + off[k] for k, a in enumerate(base)])
            out[s, rows] = amp.T.conj()
    return out


@dataclass(frozen=True, eq=False)
class MeasurementOperator:
    pi: np.ndarray
    lens_index: int
    pixel_index: int

    def ket(self) -> np.ndarray:
        """A vector whose projector reproduces ``pi`` (exact when rank one)."""
        w, v = np.linalg.eigh(self.pi)
        return v[:, -1] * math.sqrt(max(w[-1], 0.0))


def _projectors(kets: np.ndarray) -> np.ndarray:
    # kets: (n_sub, n, d) -> (n, d, d)
    return np.einsum("sam,san->amn", kets, kets.conj()) / kets.shape[0]


def povm_element(basis: ModeBasis, geom: SensorGeometry, lens: int, pixel: int) -> MeasurementOperator:
    """``(Pi)_mn = psi_n conj(psi_m)`` for one lens/pixel pair."""
    if not 0 <= pixel < geom.n_pixels:
        raise IndexError(f"pixel index {pixel} out of range")
    if geom.finite_pixels:
        kets = measurement_kets(basis, geom)[:, lens * geom.n_pixels + pixel][:, None, :]
        return MeasurementOperator(_projectors(kets)[0], lens, pixel)
    psi = response_amplitudes(basis, geom, lens)[:, pixel]
    return MeasurementOperator(np.outer(psi.conj(), psi), lens, pixel)


def povm_elements(basis: ModeBasis, geom: SensorGeometry) -> np.ndarray:
    """All POVM elements stacked in row order; shape (n_meas, d, d)."""
    return _projectors(measurement_kets(basis, geom))


def sinc(z):
    """Unnormalised sinc, ``sin(z)/z``."""
    return np.sinc(np.asarray(z) / np.pi)


def sinc_povm_analytic(momenta, lens_offset: float, pixel_momentum: float,
                       side: float = 2.0) -> MeasurementOperator:
    """Closed-form POVM element for a 1D square lens of side ``side`` and plane waves."""
    p = np.asarray(momenta, dtype=float).ravel()
    s = sinc((pixel_momentum + p) * side / 2.0)
    phase = np.exp(1j * np.subtract.outer(p, p) * lens_offset)
    return MeasurementOperator(np.outer(s, s) * phase, -1, -1)


# intensities -------------------------------------------------------------

class NoiseKind(str, Enum):
    NONE = "none"
    GAUSSIAN = "gaussian"
    POISSON = "poisson"
    BACKGROUND = "background"


@dataclass(frozen=True)
class NoiseSpec:
    """Detector noise model.

    ``sigma`` and ``offset`` are fractions of the peak noiseless intensity;
    ``photons`` is the total photon budget for Poisson noise.
    """

    kind: NoiseKind = NoiseKind.NONE
    sigma: float = 0.0
    photons: float = 0.0
    offset: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        if self.sigma < 0 or self.offset < 0 or self.photons < 0:
            raise ValueError("noise parameters must be nonnegative")
        if self.kind is NoiseKind.POISSON and not self.photons > 0:
            raise ValueError("Poisson noise needs a positive photon budget")

    def apply(self, values: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.kind is NoiseKind.NONE:
            return values.copy()
        peak = float(np.max(values))
        if self.kind is NoiseKind.GAUSSIAN:
            out = values + rng.normal(0.0, self.sigma * peak, values.shape)
        elif self.kind is NoiseKind.BACKGROUND:
            out = values + self.offset * peak + rng.normal(0.0, self.sigma * peak, values.shape)
        else:
            total = float(np.sum(values))
            out = rng.poisson(values / total * self.photons).astype(float)
        return np.clip(out, 0.0, None)


@dataclass(frozen=True, eq=False)
class IntensityRecord:
    """Pixel intensities, ``values[lens, pixel]`` with pixels row-major over (u, v)."""

    values: np.ndarray
    pixel_shape: tuple[int, ...]
    scale: float = 1.0

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        shape = tuple(int(c) for c in self.pixel_shape)
        if v.ndim != 2 or v.shape[1] != int(np.prod(shape)):
            raise DimensionError("values must have shape (n_lenses, prod(pixel_shape))")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("intensities must be finite and nonnegative")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "pixel_shape", shape)

    @property
    def n_lenses(self) -> int:
        return self.values.shape[0]

    def lens_image(self, lens: int) -> np.ndarray:
        return self.values[lens].reshape(self.pixel_shape)

    def lens_power(self) -> np.ndarray:
        return self.values.sum(axis=1)

    def flat(self) -> np.ndarray:
        return self.values.ravel()

    def to_csv(self, path) -> None:
        nu = self.pixel_shape[0]
        nv = self.pixel_shape[1] if len(self.pixel_shape) > 1 else 1
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["lens", "pixel_u", "pixel_v", "value"])
            for i in range(self.n_lenses):
                img = self.values[i].reshape(nu, nv)
                for u in range(nu):
                    for v in range(nv):
                        writer.writerow([i, u, v, repr(float(img[u, v]))])

    @classmethod
    def from_csv(cls, path) -> "IntensityRecord":
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if rows.size == 0:
            raise ValueError(f"{path}: no intensity rows")
        lens = rows[:, 0].astype(int)
        u = rows[:, 1].astype(int)
        v = rows[:, 2].astype(int)
        nl, nu, nv = lens.max() + 1, u.max() + 1, v.max() + 1
        if rows.shape[0] != nl * nu * nv:
            raise ValueError(f"{path}: incomplete pixel table")
        vals = np.zeros((nl, nu, nv))
        vals[lens, u, v] = rows[:, 3]
        shape = (nu, nv) if nv > 1 else (nu,)
        return cls(vals.reshape(nl, -1), shape)

    def to_pgm(self, directory, prefix: str = "lens") -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        peak = float(self.values.max()) or 1.0
        paths = []
        for i in range(self.n_lenses):
            img = self.lens_image(i)
            if img.ndim == 1:
                img = img[None, :]
            path = directory / f"{prefix}_{i:03d}.pgm"
            write_pgm(path, img / peak)
            paths.append(path)
        return paths


def born_intensities(rho: np.ndarray, kets: np.ndarray) -> np.ndarray:
    """``Tr(rho Pi_a)`` for kets of shape (n_sub, n, d)."""
    val = np.einsum("sam,mn,san->a", kets.conj(), rho, kets).real / kets.shape[0]
    return val


def simulate_intensities(rho: CoherenceMatrix, geom: SensorGeometry,
                         noise: NoiseSpec | None = None, seed: int | None = 0,
                         rng: np.random.Generator | None = None) -> IntensityRecord:
    """Born-rule intensities ``Tr(rho Pi_ij)``, optionally with detector noise."""
    if rho.basis is None:
        raise DimensionError("simulation needs a coherence matrix with a mode basis")
    kets = measurement_kets(rho.basis, geom)
    vals = np.clip(born_intensities(rho.rho, kets), 0.0, None)
    vals = vals.reshape(geom.n_lenses, geom.n_pixels)
    if noise is not None and noise.kind is not NoiseKind.NONE:
        vals = noise.apply(vals, rng if rng is not None else np.random.default_rng(seed))
    return IntensityRecord(vals, geom.pixels.counts)


@dataclass(frozen=True, eq=False)
class HusimiSamples:
    displacements: np.ndarray  # (n_lenses, ndim)
    momenta: np.ndarray  # (n_pixels, ndim)
    q: np.ndarray  # (n_lenses, n_pixels)

    def as_dict(self) -> dict:
        return {(tuple(self.displacements[i]), tuple(self.momenta[j])): float(self.q[i, j])
                for i in range(self.q.shape[0]) for j in range(self.q.shape[1])}


def husimi_sample(rho: CoherenceMatrix, geom: SensorGeometry) -> HusimiSamples:
    """Sensor intensities for Gaussian apertures, i.e. Husimi-function samples.

    Each value is proportional to ``<alpha|rho|alpha>`` for the coherent state
    centred at the lens position with momentum equal to the pixel displacement.
    """
    if geom.aperture.kind is not ApertureKind.GAUSSIAN:
        raise ApertureError("Husimi sampling requires Gaussian apertures")
    record = simulate_intensities(rho, geom)
    return HusimiSamples(np.array(geom.lens_centers), geom.pixel_momenta(), np.array(record.values))
