"""Conventional Shack-Hartmann processing, used as a comparator.

Spot centroids give local slopes, slopes are integrated zonally into a
wavefront, and the far field is predicted by propagating ``sqrt(I) e^{ikW}``
as if the beam were fully coherent.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import griddata
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import DegenerateDataError, GeometryError
from .field import ModeBasis
from .propagation import Grid, IntensityMap, ResponseKernel, propagate_field
from .sensor import IntensityRecord, SensorGeometry, response_amplitudes

INVALID_FLOOR = 0.01  # fraction of the mean lens power
SPOT_THRESHOLD = 0.1  # fraction of each lens's peak pixel


@dataclass(frozen=True, eq=False)
class SlopeField:
    """Per-lens spot displacement (mm on the CCD) and slope ``displacement / f``."""

    centers: np.ndarray
    displacement: np.ndarray
    slopes: np.ndarray
    power: np.ndarray
    valid: np.ndarray

    @property
    def n_valid(self) -> int:
        return int(np.sum(self.valid))


def _centroid(image: np.ndarray, pos: np.ndarray, threshold: float) -> np.ndarray:
    w = np.clip(image - threshold * image.max(), 0.0, None)
    return w @ pos / w.sum()


def _reference_centroid(geom: SensorGeometry, threshold: float) -> np.ndarray:
    # the on-axis plane wave; the second mode only satisfies the d >= 2 rule
    p = np.zeros((2, geom.ndim))
    p[1, 0] = 1.0
    ref = np.abs(response_amplitudes(ModeBasis.plane_waves(p, geom.wavelength), geom, 0)[0]) ** 2
    return _centroid(ref, geom.pixels.positions(), threshold)


def centroid_slopes(data: IntensityRecord, geom: SensorGeometry,
                    floor: float = INVALID_FLOOR,
                    threshold: float = SPOT_THRESHOLD) -> SlopeField:
    """Spot centroids relative to the on-axis reference.

    Pixels are weighted by their intensity above ``threshold`` times the
    lens's peak, which suppresses the bias from truncated diffraction tails.
    Lenses whose total intensity is below ``floor`` times the mean lens
    power are marked invalid and get zero slope.
    """
    if data.n_lenses != geom.n_lenses or data.values.shape[1] != geom.n_pixels:
        raise GeometryError("intensity record does not match the sensor geometry")
    pos = geom.pixels.positions()
    power = data.lens_power()
    mean = float(power.mean())
    if not mean > 0:
        raise DegenerateDataError("no light on any lens")
    valid = power >= floor * mean
    if not np.any(valid):
        raise DegenerateDataError("every lens is below the intensity floor")
    disp = np.zeros((geom.n_lenses, geom.ndim))
    ref = _reference_centroid(geom, threshold)
    for i in np.flatnonzero(valid):
        disp[i] = _centroid(data.values[i], pos, threshold) - ref
    return SlopeField(np.array(geom.lens_centers), disp, disp / geom.focal_length, power, valid)


@dataclass(frozen=True, eq=False)
class Wavefront:
    """Wavefront (mm of optical path) at the lens centres; NaN at invalid lenses."""

    centers: np.ndarray
    values: np.ndarray
    valid: np.ndarray
    residual: float


def neighbour_edges(centers: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Pairs of lenses at the nearest-neighbour distance (hexagonal or square lattices)."""
    c = np.asarray(centers, dtype=float)
    dist = np.linalg.norm(c[:, None] - c[None, :], axis=-1)
    iu = np.triu_indices(len(c), 1)
    if iu[0].size == 0:
        return np.empty((0, 2), dtype=int)
    pitch = float(dist[iu].min())
    keep = dist[iu] <= pitch * (1 + tol)
    return np.stack([iu[0][keep], iu[1][keep]], axis=-1)


def reconstruct_wavefront(slopes: SlopeField, geom: SensorGeometry | None = None) -> Wavefront:
    """Zonal least-squares integration of slopes on the lens adjacency graph.

    Each edge contributes ``W_j - W_i = (s_i + s_j)/2 . (c_j - c_i)``; the
    piston is fixed by ``W = 0`` at the first valid lens. ``residual`` is the
    RMS edge misfit, which is large for slope fields with curl.
    """
    centers = slopes.centers
    idx = np.flatnonzero(slopes.valid)
    if idx.size < 3:
        raise GeometryError(f"wavefront integration needs 3 valid lenses, got {idx.size}")
    edges = neighbour_edges(centers[idx])
    n = idx.size
    if edges.size == 0:
        raise GeometryError("valid lenses share no neighbours")
    graph = coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n))
    n_comp, _ = connected_components(graph, directed=False)
    if n_comp > 1:
        raise GeometryError(f"lens graph splits into {n_comp} disconnected parts")
    c = centers[idx]
    s = slopes.slopes[idx]
    i, j = edges[:, 0], edges[:, 1]
    rhs = np.einsum("ek,ek->e", 0.5 * (s[i] + s[j]), c[j] - c[i])
    A = np.zeros((len(edges), n))
    A[np.arange(len(edges)), j] = 1.0
    A[np.arange(len(edges)), i] = -1.0
    w_rest, *_ = np.linalg.lstsq(A[:, 1:], rhs, rcond=None)
    w = np.concatenate([[0.0], w_rest])
    residual = float(np.sqrt(np.mean((A @ w - rhs) ** 2)))
    values = np.full(len(centers), np.nan)
    values[idx] = w
    return Wavefront(centers, values, slopes.valid.copy(), residual)


def baseline_source_grid(geom: SensorGeometry, n: int = 128) -> Grid:
    c = geom.lens_centers
    half = float(np.max(np.abs(c))) + (geom.aperture.footprint or 0.0) / 2.0
    return Grid.spanning(half, n, geom.ndim)


def standard_far_field(slopes: SlopeField, wavefront: Wavefront, geom: SensorGeometry,
                       kernel: ResponseKernel, source: Grid | None = None) -> IntensityMap:
    """Far field predicted from per-lens intensity and wavefront, assuming full coherence.

    Mean lens intensity and ``W`` are interpolated (cubic) over the convex
    hull of the valid lens centres; the field vanishes outside it.
    """
    if geom.ndim != 2:
        raise GeometryError("the standard far-field prediction is two-dimensional")
    source = source or baseline_source_grid(geom)
    idx = np.flatnonzero(wavefront.valid)
    c = wavefront.centers[idx]
    area = geom.aperture.area(geom.ndim) or 1.0
    mean_i = slopes.power[idx] / area
    pts = source.points().reshape(-1, 2)
    inten = griddata(c, mean_i, pts, method="cubic", fill_value=0.0)
    w = griddata(c, wavefront.values[idx], pts, method="cubic", fill_value=0.0)
    k0 = 2.0 * math.pi / geom.wavelength
    field = (np.sqrt(np.clip(inten, 0.0, None)) * np.exp(1j * k0 * w)).reshape(source.n, source.n)
    out = propagate_field(field, source, kernel)
    return IntensityMap(kernel.output, np.abs(out) ** 2)
