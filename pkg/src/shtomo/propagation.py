"""Propagation of coherence matrices to other planes and far-field comparison.

The output intensity ``I(u) = sum_mn psi~_m(u) rho_mn conj(psi~_n(u))`` is
obtained by propagating each basis mode through the response kernel first,
which costs d transforms instead of a four-fold integral over the mutual
coherence function.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import DegenerateDataError, DimensionError, SamplingError
from .field import CoherenceMatrix, ModeBasis, ModeKind
from .fourier import mft
from .io import write_pgm, write_table


@dataclass(frozen=True)
class Grid:
    """Uniform centred grid with ``n`` points per axis and spacing ``step``."""

    n: int
    step: float
    ndim: int = 2

    @classmethod
    def spanning(cls, half_width: float, n: int, ndim: int = 2) -> "Grid":
        """Grid whose outermost points sit at +-half_width."""
        return cls(n, 2.0 * half_width / (n - 1), ndim)

    @property
    def half_width(self) -> float:
        return (self.n - 1) * self.step / 2.0

    def axis(self) -> np.ndarray:
        return (np.arange(self.n) - (self.n - 1) / 2.0) * self.step

    def axes(self) -> list[np.ndarray]:
        return [self.axis()] * self.ndim

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack(mesh, axis=-1)

    @property
    def cell(self) -> float:
        return self.step**self.ndim


class KernelKind(str, Enum):
    FRAUNHOFER = "fraunhofer"
    FRESNEL = "fresnel"


@dataclass(frozen=True)
class ResponseKernel:
    """Propagation response ``h(u, x)``.

    Fraunhofer: focal plane of a lens of focal length ``distance``.
    Fresnel: free space over ``distance`` (single-transform form).
    """

    kind: KernelKind
    distance: float
    wavelength: float
    output: Grid

    def __post_init__(self):
        object.__setattr__(self, "kind", KernelKind(self.kind))
        if not (self.distance > 0 and self.wavelength > 0):
            raise ValueError("kernel distance and wavelength must be positive")

    @property
    def scale(self) -> float:
        """Spatial frequency (rad/mm) per unit output coordinate."""
        return 2.0 * math.pi / (self.wavelength * self.distance)

    def prefactor(self, ndim: int) -> float:
        return (self.wavelength * self.distance) ** (-ndim / 2.0)

    def matrix(self, source: Grid) -> np.ndarray:
        """Dense kernel ``h[u, x]`` with quadrature weights folded in (small grids only)."""
        u = self.output.points().reshape(-1, self.output.ndim)
        x = source.points().reshape(-1, source.ndim)
        phase = -self.scale * (u @ x.T)
        h = np.exp(1j * phase) * self.prefactor(source.ndim) * source.cell
        if self.kind is KernelKind.FRESNEL:
            k = math.pi / (self.wavelength * self.distance)
            h *= np.exp(1j * k * np.sum(u**2, axis=1))[:, None]
            h *= np.exp(1j * k * np.sum(x**2, axis=1))[None, :]
        return h


def default_source_grid(basis: ModeBasis, n: int = 256) -> Grid:
    if basis.kind is not ModeKind.VORTEX:
        raise DimensionError("plane-wave bases need an explicit source window")
    return Grid.spanning(basis.extent(), n, basis.ndim)


def _check_nyquist(bandwidth: float, source: Grid, kernel: ResponseKernel):
    if bandwidth * source.step > math.pi:
        raise SamplingError(f"source step {source.step:.3g} under-samples band limit {bandwidth:.3g}")
    kmax = kernel.scale * kernel.output.half_width * math.sqrt(kernel.output.ndim)
    if kmax * source.step > math.pi:
        raise SamplingError("output grid extends beyond the alias-free range of the source grid")


def propagate_field(samples: np.ndarray, source: Grid, kernel: ResponseKernel,
                    points=None) -> np.ndarray:
    """Propagate sampled fields (..., *source grid) to the output grid or to ``points``."""
    if kernel.output.ndim != source.ndim:
        raise DimensionError("source and output grids differ in dimension")
    axes = source.axes()
    samples = np.asarray(samples, dtype=complex)
    if kernel.kind is KernelKind.FRESNEL:
        chirp = np.exp(1j * math.pi / (kernel.wavelength * kernel.distance)
                       * np.sum(source.points() ** 2, axis=-1))
        samples = samples * chirp
    if points is None:
        out_pts = kernel.output.points().reshape(-1, source.ndim)
        out = mft(samples, axes, maxes=[a * kernel.scale for a in kernel.output.axes()])
    else:
        out_pts = np.asarray(points, dtype=float).reshape(-1, source.ndim)
        out = mft(samples, axes, points=out_pts * kernel.scale)
    out = out * kernel.prefactor(source.ndim) * source.cell
    if kernel.kind is KernelKind.FRESNEL:
        out = out * np.exp(1j * math.pi / (kernel.wavelength * kernel.distance)
                           * np.sum(out_pts**2, axis=-1))
    return out


@dataclass(frozen=True, eq=False)
class PropagatedModes:
    amplitudes: np.ndarray  # (d, n_out) on the output grid, row-major
    grid: Grid
    source: Grid


def propagate_modes(basis: ModeBasis, kernel: ResponseKernel,
                    source: Grid | None = None) -> PropagatedModes:
    source = source or default_source_grid(basis)
    _check_nyquist(basis.bandwidth(), source, kernel)
    samples = np.moveaxis(basis.amplitudes(source.points()), -1, 0)
    amps = propagate_field(samples, source, kernel)
    return PropagatedModes(amps, kernel.output, source)


@dataclass(frozen=True, eq=False)
class IntensityMap:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape((self.grid.n,) * self.grid.ndim)
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("intensity map must be finite and nonnegative")
        object.__setattr__(self, "values", v)

    @property
    def total_power(self) -> float:
        return float(self.values.sum() * self.grid.cell)

    def to_csv(self, path) -> None:
        header = ["x_mm", "y_mm"][: self.grid.ndim] + ["value"]
        pts = self.grid.points().reshape(-1, self.grid.ndim)
        write_table(path, header, (list(p) + [v] for p, v in zip(pts, self.values.ravel())))

    def to_pgm(self, path) -> None:
        """16-bit image scaled to the map's peak; rows run along -y, columns along +x."""
        img = self.values[None, :] if self.grid.ndim == 1 else self.values.T[::-1]
        peak = float(img.max()) or 1.0
        write_pgm(path, img / peak)


def contract(amplitudes: np.ndarray, rho: np.ndarray) -> np.ndarray:
    val = np.einsum("m...,mn,n...->...", amplitudes, rho, amplitudes.conj()).real
    return np.clip(val, 0.0, None)


def far_field_intensity(rho: CoherenceMatrix, basis: ModeBasis | None = None,
                        kernel: ResponseKernel | None = None, source: Grid | None = None,
                        modes: PropagatedModes | None = None) -> IntensityMap:
    """Output-plane intensity of a partially coherent field given by ``rho``."""
    basis = basis or rho.basis
    if rho.d != basis.d:
        raise DimensionError("coherence matrix and basis differ in dimension")
    if modes is None:
        modes = propagate_modes(basis, kernel, source)
    return IntensityMap(modes.grid, contract(modes.amplitudes, rho.rho))


def intensity_at_points(rho: CoherenceMatrix, kernel: ResponseKernel, points,
                        source: Grid | None = None) -> np.ndarray:
    """Output intensity evaluated at arbitrary output-plane points."""
    basis = rho.basis
    source = source or default_source_grid(basis)
    _check_nyquist(basis.bandwidth(), source, kernel)
    samples = np.moveaxis(basis.amplitudes(source.points()), -1, 0)
    amps = propagate_field(samples, source, kernel, points=points)
    return contract(amps, rho.rho)


def far_field_waist(basis: ModeBasis, kernel: ResponseKernel) -> float:
    """Waist of the focal-plane image of an LG mode, ``lambda f / (pi w0)``."""
    return kernel.wavelength * kernel.distance / (math.pi * basis.waist)


def ring_profile(rho: CoherenceMatrix, kernel: ResponseKernel, radius: float,
                 n_phi: int = 360, source: Grid | None = None) -> np.ndarray:
    phi = 2.0 * math.pi * np.arange(n_phi) / n_phi
    pts = radius * np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    return intensity_at_points(rho, kernel, pts, source)


def modulation_depth(values) -> float:
    v = np.asarray(values, dtype=float)
    hi, lo = float(v.max()), float(v.min())
    return (hi - lo) / (hi + lo) if hi + lo > 0 else 0.0


def resample(a: IntensityMap, onto: Grid) -> IntensityMap:
    """Linear interpolation of ``a`` onto another grid; zero outside ``a``'s support."""
    interp = RegularGridInterpolator(a.grid.axes(), a.values, method="linear",
                                     bounds_error=False, fill_value=0.0)
    pts = onto.points().reshape(-1, onto.ndim)
    return IntensityMap(onto, np.clip(interp(pts), 0.0, None))


def correlation_coefficient(a: IntensityMap, b: IntensityMap) -> float:
    """Normalised correlation ``sum ab / sqrt(sum a^2 sum b^2)``.

    Maps on different grids are compared on the coarser one.
    """
    if a.grid != b.grid:
        if a.grid.step >= b.grid.step:
            b = resample(b, a.grid)
        else:
            a = resample(a, b.grid)
    va, vb = a.values.ravel(), b.values.ravel()
    na, nb = float(np.sum(va * va)), float(np.sum(vb * vb))
    if na == 0 or nb == 0:
        raise DegenerateDataError("correlation of an all-zero intensity map")
    return float(np.sum(va * vb) / math.sqrt(na * nb))
