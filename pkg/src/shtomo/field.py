"""Mode bases, coherence matrices and the scalar figures of merit built on them.

Lengths are in millimetres and transverse momenta in rad/mm throughout the
package. A plane-wave mode with momentum ``p`` has amplitude ``exp(-i p.x)``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionError, InvalidStateError

HERMITIAN_TOL = 1e-12
PSD_FLOOR = 1e-10  # times the trace


class ModeKind(str, Enum):
    PLANE_WAVE = "plane_wave"
    VORTEX = "vortex"


@dataclass(frozen=True, eq=False)
class ModeBasis:
    """A finite set of evaluable transverse modes.

    Use :meth:`plane_waves` or :meth:`vortex` rather than the constructor.
    """

    kind: ModeKind
    wavelength: float
    momenta: np.ndarray | None = None
    charges: tuple[int, ...] | None = None
    waist: float | None = None

    @classmethod
    def plane_waves(cls, momenta, wavelength: float = 633e-6) -> "ModeBasis":
        p = np.asarray(momenta, dtype=float)
        if p.ndim == 1:
            p = p[:, None]
        if p.ndim != 2 or p.shape[1] not in (1, 2):
            raise DimensionError("plane-wave momenta must have shape (d,) or (d, 1|2)")
        if p.shape[0] < 2:
            raise DimensionError("a mode basis needs at least two modes")
        if len({tuple(row) for row in p}) != p.shape[0]:
            raise DimensionError("plane-wave momenta must be distinct")
        p.setflags(write=False)
        return cls(ModeKind.PLANE_WAVE, float(wavelength), momenta=p)

    @classmethod
    def vortex(cls, charges: Sequence[int], waist: float,
               wavelength: float = 633e-6) -> "ModeBasis":
        charges = tuple(int(c) for c in charges)
        if len(charges) < 2:
            raise DimensionError("a mode basis needs at least two modes")
        if len(set(charges)) != len(charges):
            raise DimensionError("vortex charges must be distinct")
        if waist <= 0:
            raise DimensionError("waist must be positive")
        return cls(ModeKind.VORTEX, float(wavelength), charges=charges, waist=float(waist))

    @property
    def d(self) -> int:
        if self.kind is ModeKind.PLANE_WAVE:
            return self.momenta.shape[0]
        return len(self.charges)

    @property
    def ndim(self) -> int:
        if self.kind is ModeKind.PLANE_WAVE:
            return self.momenta.shape[1]
        return 2

    @property
    def labels(self) -> list[str]:
        if self.kind is ModeKind.VORTEX:
            return [f"V{c:+d}" if c else "V0" for c in self.charges]
        return [f"p{k}" for k in range(self.d)]

    def bandwidth(self) -> float:
        """Largest transverse spatial frequency (rad/mm) carried by any mode."""
        if self.kind is ModeKind.PLANE_WAVE:
            return float(np.max(np.linalg.norm(self.momenta, axis=1)))
        lmax = max(abs(c) for c in self.charges)
        return 2.0 / self.waist * (math.sqrt(lmax / 2.0) + 4.0)

    def extent(self) -> float:
        """Radius (mm) outside which every vortex mode is negligible."""
        if self.kind is ModeKind.PLANE_WAVE:
            return math.inf
        lmax = max(abs(c) for c in self.charges)
        return self.waist * (math.sqrt(lmax / 2.0) + 4.0)

    def amplitudes(self, points) -> np.ndarray:
        """Complex mode amplitudes at ``points``; shape ``points.shape[:-1] + (d,)``.

        ``points`` has a trailing axis of length ``ndim``. In 1D a bare array
        of coordinates is accepted too.
        """
        x = np.asarray(points, dtype=float)
        if self.ndim == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            x = x[..., None]
        if x.shape[-1] != self.ndim:
            raise DimensionError(f"points must have trailing dimension {self.ndim}")
        if self.kind is ModeKind.PLANE_WAVE:
            return np.exp(-1j * (x @ self.momenta.T))
        r = np.hypot(x[..., 0], x[..., 1])
        phi = np.arctan2(x[..., 1], x[..., 0])
        out = np.empty(x.shape[:-1] + (self.d,), dtype=complex)
        for k, ell in enumerate(self.charges):
            out[..., k] = lg_radial(ell, self.waist, r) * np.exp(1j * ell * phi)
        return out

    def descriptor(self) -> dict:
        if self.kind is ModeKind.VORTEX:
            return {"kind": "vortex", "charges": list(self.charges),
                    "waist_mm": self.waist, "wavelength_nm": self.wavelength * 1e6}
        return {"kind": "plane_wave", "momenta_per_mm": self.momenta.tolist(),
                "wavelength_nm": self.wavelength * 1e6}

    @classmethod
    def from_descriptor(cls, desc: dict) -> "ModeBasis":
        lam = float(desc.get("wavelength_nm", 633.0)) * 1e-6
        if desc["kind"] == "vortex":
            return cls.vortex(desc["charges"], desc["waist_mm"], lam)
        if desc["kind"] == "plane_wave":
            return cls.plane_waves(desc["momenta_per_mm"], lam)
        raise DimensionError(f"unknown basis kind {desc['kind']!r}")


def lg_radial(ell: int, waist: float, r):
    """Unit-norm radial profile of the Laguerre-Gauss mode LG(p=0, ell)."""
    n = abs(ell)
    norm = math.sqrt(2.0 / (math.pi * waist**2 * math.factorial(n)))
    s = np.asarray(r) * math.sqrt(2.0) / waist
    return norm * s**n * np.exp(-np.asarray(r) ** 2 / waist**2)


@dataclass(frozen=True, eq=False)
class CoherenceMatrix:
    """Hermitian positive semidefinite coherence matrix in a mode basis.

    The matrix is kept as built (not trace normalised); :meth:`normalized`
    gives the unit-trace view used by all figures of merit.
    """

    rho: np.ndarray
    basis: ModeBasis | None = None

    def __post_init__(self):
        rho = np.array(self.rho, dtype=complex)
        if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
            raise DimensionError("coherence matrix must be square")
        if self.basis is not None and rho.shape[0] != self.basis.d:
            raise DimensionError(f"matrix is {rho.shape[0]}x{rho.shape[0]}, basis has d={self.basis.d}")
        if not np.all(np.isfinite(rho)):
            raise InvalidStateError("coherence matrix has non-finite entries")
        scale = max(float(np.max(np.abs(rho))), 1.0)
        if np.max(np.abs(rho - rho.conj().T)) > 1e-8 * scale:
            raise InvalidStateError("coherence matrix is not Hermitian")
        rho = 0.5 * (rho + rho.conj().T)
        tr = float(np.trace(rho).real)
        if tr <= 0:
            raise InvalidStateError("coherence matrix must have positive trace")
        if np.linalg.eigvalsh(rho)[0] < -PSD_FLOOR * tr:
            raise InvalidStateError("coherence matrix is not positive semidefinite")
        rho.setflags(write=False)
        object.__setattr__(self, "rho", rho)

    @property
    def d(self) -> int:
        return self.rho.shape[0]

    @property
    def trace(self) -> float:
        return float(np.trace(self.rho).real)

    def normalized(self) -> "CoherenceMatrix":
        return CoherenceMatrix(self.rho / self.trace, self.basis)

    # serialisation

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "basis": self.basis.descriptor() if self.basis is not None else None,
            "rho": [[float(z.real), float(z.imag)] for z in self.rho.ravel()],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "CoherenceMatrix":
        d = int(obj["d"])
        pairs = np.asarray(obj["rho"], dtype=float).reshape(-1, 2)
        if pairs.shape[0] != d * d:
            raise DimensionError(f"expected {d * d} entries, got {pairs.shape[0]}")
        rho = (pairs[:, 0] + 1j * pairs[:, 1]).reshape(d, d)
        basis = ModeBasis.from_descriptor(obj["basis"]) if obj.get("basis") else None
        return cls(rho, basis)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_json(cls, path) -> "CoherenceMatrix":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_csv(self, real_path, imag_path) -> None:
        for path, part in ((real_path, self.rho.real), (imag_path, self.rho.imag)):
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                for row in part:
                    writer.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, real_path, imag_path, basis: ModeBasis | None = None) -> "CoherenceMatrix":
        re = np.loadtxt(real_path, delimiter=",", ndmin=2)
        im = np.loadtxt(imag_path, delimiter=",", ndmin=2)
        return cls(re + 1j * im, basis)


@dataclass
class MixtureSpec:
    """Weighted incoherent mixture of pure states, ``sum_c w_c |ket_c><ket_c|``."""

    components: list[tuple[float, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        if not self.components:
            raise InvalidStateError("mixture needs at least one component")
        comps = []
        for w, ket in self.components:
            if w < 0:
                raise InvalidStateError("mixture weights must be nonnegative")
            comps.append((float(w), np.asarray(ket, dtype=complex).ravel()))
        if not any(w > 0 for w, _ in comps):
            raise InvalidStateError("at least one mixture weight must be positive")
        self.components = comps


def coherence_from_mixture(spec: MixtureSpec, basis: ModeBasis | None = None,
                           d: int | None = None) -> CoherenceMatrix:
    dim = basis.d if basis is not None else d
    if dim is None:
        dim = len(spec.components[0][1])
    rho = np.zeros((dim, dim), dtype=complex)
    for w, ket in spec.components:
        if ket.shape != (dim,):
            raise DimensionError(f"ket of length {ket.size} does not match d={dim}")
        rho += w * np.outer(ket, ket.conj())
    return CoherenceMatrix(rho, basis)


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(a)
    # rounding-level eigenvalues would contribute sqrt(eps) noise
    w = np.where(w > 1e-13 * max(w[-1], 0.0), w, 0.0)
    return (v * np.sqrt(w)) @ v.conj().T


def _as_state(x) -> np.ndarray:
    rho = x.rho if isinstance(x, CoherenceMatrix) else np.asarray(x, dtype=complex)
    rho = 0.5 * (rho + rho.conj().T)
    tr = np.trace(rho).real
    if tr <= 0 or np.linalg.eigvalsh(rho)[0] < -PSD_FLOOR * tr:
        raise InvalidStateError("fidelity needs positive semidefinite arguments")
    return rho / tr


def fidelity(a, b) -> float:
    """Uhlmann fidelity ``Tr sqrt(sqrt(a) b sqrt(a))`` of the unit-trace views.

    Evaluated as the nuclear norm of ``sqrt(a) sqrt(b)``, which is the same
    quantity and symmetric by construction.
    """
    ra, rb = _as_state(a), _as_state(b)
    if ra.shape != rb.shape:
        raise DimensionError("fidelity arguments differ in dimension")
    sv = np.linalg.svd(_psd_sqrt(ra) @ _psd_sqrt(rb), compute_uv=False)
    return float(min(np.sum(sv), 1.0))


def purity(rho) -> float:
    r = _as_state(rho)
    return float(np.real(np.trace(r @ r)))


def intensity_at(rho: CoherenceMatrix, points) -> np.ndarray:
    """Intensity ``sum_mn psi_m(x) rho_mn conj(psi_n(x))`` at each point."""
    psi = rho.basis.amplitudes(points)
    val = np.einsum("...m,mn,...n->...", psi, rho.rho, psi.conj()).real
    return np.clip(val, 0.0, None)
