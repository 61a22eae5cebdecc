"""Scenario configuration: JSON schema, validation and conversion to domain objects.

Lengths are millimetres, wavelengths nanometres and angles milliradians.
Unknown keys are rejected everywhere.
"""
from __future__ import annotations

import json
import math
from importlib import resources
from pathlib import Path
from typing import Annotated, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError, ShtomoError
from .field import CoherenceMatrix, MixtureSpec, ModeBasis, coherence_from_mixture
from .propagation import Grid, ResponseKernel
from .sensor import Aperture, NoiseSpec, PixelGrid, SensorGeometry, hexagonal_lens_centers
from .tomography import RANK_THRESHOLD, MLOptions

FIXTURE_PACKAGE = "shtomo.fixtures"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class VortexBasisConfig(_Strict):
    kind: Literal["vortex"]
    charges: list[int] = Field(min_length=2)
    waist_mm: float = Field(gt=0)
    wavelength_nm: float = Field(633.0, gt=0)


class PlaneWaveBasisConfig(_Strict):
    kind: Literal["plane_wave"]
    momenta_per_mm: list[list[float]] | None = None
    angles_mrad: list[list[float]] | None = None
    wavelength_nm: float = Field(633.0, gt=0)

    @model_validator(mode="after")
    def _one_source(self):
        if (self.momenta_per_mm is None) == (self.angles_mrad is None):
            raise ValueError("give exactly one of momenta_per_mm or angles_mrad")
        return self


BasisConfig = Annotated[Union[VortexBasisConfig, PlaneWaveBasisConfig], Field(discriminator="kind")]


class ComponentConfig(_Strict):
    weight: float = Field(ge=0)
    # each entry is a real number or a [re, im] pair
    ket: list[Union[float, tuple[float, float]]] = Field(min_length=1)

    def vector(self) -> np.ndarray:
        return np.array([complex(*c) if isinstance(c, tuple) else complex(c) for c in self.ket])


class StateConfig(_Strict):
    components: list[ComponentConfig] = Field(min_length=1)


class HexLayout(_Strict):
    type: Literal["hexagonal"]
    rings: int = Field(1, ge=0)
    pitch_mm: float = Field(gt=0)


class ExplicitLayout(_Strict):
    type: Literal["explicit"]
    centers_mm: list[list[float]] = Field(min_length=1)


class ApertureConfig(_Strict):
    type: Literal["square", "hexagon", "gaussian", "pointlike", "unbounded"]
    size_mm: float = Field(0.0, ge=0)


class SensorConfig(_Strict):
    layout: Annotated[Union[HexLayout, ExplicitLayout], Field(discriminator="type")]
    aperture: ApertureConfig
    focal_length_mm: float = Field(gt=0)
    pixel_pitch_mm: float = Field(gt=0)
    pixels: list[int] = Field(min_length=1, max_length=2)
    n_quad: int = 256
    finite_pixels: bool = False

    @field_validator("n_quad")
    @classmethod
    def _pow2(cls, v):
        if v < 32 or v & (v - 1):
            raise ValueError("n_quad must be a power of two >= 32")
        return v


class NoiseConfig(_Strict):
    type: Literal["none", "gaussian", "poisson", "background"] = "none"
    sigma: float = Field(0.0, ge=0)
    photons: float = Field(0.0, ge=0)
    offset: float = Field(0.0, ge=0)


class ReconstructionConfig(_Strict):
    methods: list[Literal["ml", "linear"]] = ["ml", "linear"]
    tol: float = Field(1e-10, gt=0)
    max_iter: int = Field(5000, ge=1)
    background: bool = False
    rank_threshold: float = Field(RANK_THRESHOLD, gt=0, lt=1)
    dynamical_range_threshold: float = Field(0.01, gt=0, le=1)


class PlaneConfig(_Strict):
    type: Literal["fraunhofer", "fresnel"] = "fraunhofer"
    f_mm: float | None = Field(None, gt=0)
    z_mm: float | None = Field(None, gt=0)
    grid_points: int = Field(96, ge=8)
    # default: 3.5 far-field Gaussian waists
    half_width_mm: float | None = Field(None, gt=0)
    source_points: int = Field(256, ge=16)

    @model_validator(mode="after")
    def _distance(self):
        if self.type == "fraunhofer" and self.f_mm is None:
            raise ValueError("fraunhofer plane needs f_mm")
        if self.type == "fresnel" and self.z_mm is None:
            raise ValueError("fresnel plane needs z_mm")
        return self

    @property
    def distance(self) -> float:
        return self.f_mm if self.type == "fraunhofer" else self.z_mm


class BaselineConfig(_Strict):
    enabled: bool = True
    sensor: SensorConfig | None = None
    source_points: int = Field(128, ge=16)


class ScenarioConfig(_Strict):
    name: str = "scenario"
    seed: int = Field(0, ge=0, lt=2**64)
    basis: BasisConfig
    state: StateConfig
    sensor: SensorConfig
    noise: NoiseConfig = NoiseConfig()
    reconstruction: ReconstructionConfig = ReconstructionConfig()
    plane: PlaneConfig | None = None
    baseline: BaselineConfig = BaselineConfig(enabled=False)
    output_dir: str = "out"

    @model_validator(mode="after")
    def _consistent(self):
        d = len(self.basis.charges) if self.basis.kind == "vortex" else len(
            self.basis.momenta_per_mm or self.basis.angles_mrad)
        for c in self.state.components:
            if len(c.ket) != d:
                raise ValueError(f"ket of length {len(c.ket)} does not match basis dimension {d}")
        if not any(c.weight > 0 for c in self.state.components):
            raise ValueError("at least one state weight must be positive")
        return self

    # conversion ------------------------------------------------------------

    @property
    def wavelength(self) -> float:
        return self.basis.wavelength_nm * 1e-6

    def build_basis(self) -> ModeBasis:
        b = self.basis
        if b.kind == "vortex":
            return ModeBasis.vortex(b.charges, b.waist_mm, self.wavelength)
        if b.momenta_per_mm is not None:
            return ModeBasis.plane_waves(b.momenta_per_mm, self.wavelength)
        k0 = 2.0 * math.pi / self.wavelength
        return ModeBasis.plane_waves(k0 * np.sin(np.asarray(b.angles_mrad) * 1e-3), self.wavelength)

    def build_state(self, basis: ModeBasis) -> CoherenceMatrix:
        spec = MixtureSpec([(c.weight, c.vector()) for c in self.state.components])
        return coherence_from_mixture(spec, basis)

    def build_sensor(self, which: SensorConfig | None = None) -> SensorGeometry:
        s = which or self.sensor
        if s.layout.type == "hexagonal":
            centers = hexagonal_lens_centers(s.layout.rings, s.layout.pitch_mm)
        else:
            centers = np.asarray(s.layout.centers_mm, dtype=float)
        return SensorGeometry(centers, Aperture(s.aperture.type, s.aperture.size_mm), s.focal_length_mm,
                              self.wavelength, PixelGrid(s.pixel_pitch_mm, tuple(s.pixels)),
                              s.n_quad, s.finite_pixels)

    def build_noise(self) -> NoiseSpec:
        n = self.noise
        return NoiseSpec(n.type, n.sigma, n.photons, n.offset)

    def build_ml_options(self, reference: CoherenceMatrix | None = None) -> MLOptions:
        r = self.reconstruction
        return MLOptions(tol=r.tol, max_iter=r.max_iter, background=r.background, reference=reference)

    def build_kernel(self, basis: ModeBasis) -> tuple[ResponseKernel, Grid] | None:
        p = self.plane
        if p is None:
            return None
        half = p.half_width_mm
        if half is None:
            w = basis.waist if basis.waist is not None else 1.0
            half = 3.5 * self.wavelength * p.distance / (math.pi * w)
        kernel = ResponseKernel(p.type, p.distance, self.wavelength, Grid.spanning(half, p.grid_points))
        source = Grid.spanning(basis.extent(), p.source_points) if basis.waist is not None else None
        return kernel, source


def _resolve(path_or_name) -> Path | None:
    p = Path(path_or_name)
    if p.is_file():
        return p
    name = p.name if p.suffix == ".json" else p.name + ".json"
    res = resources.files(FIXTURE_PACKAGE) / name
    return Path(str(res)) if res.is_file() else None


def bundled_fixtures() -> list[str]:
    return sorted(f.name for f in resources.files(FIXTURE_PACKAGE).iterdir() if f.name.endswith(".json"))


def load_config(path_or_name, seed: int | None = None, output_dir: str | None = None) -> ScenarioConfig:
    """Load a config file or a bundled fixture by name, applying CLI overrides."""
    path = _resolve(path_or_name)
    if path is None:
        raise ConfigError(f"no config file or bundled fixture named {str(path_or_name)!r}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    if seed is not None:
        raw["seed"] = seed
    if output_dir is not None:
        raw["output_dir"] = output_dir
    return parse_config(raw)


def parse_config(raw: dict) -> ScenarioConfig:
    try:
        cfg = ScenarioConfig.model_validate(raw)
    except ValidationError as exc:
        problems = "; ".join(f"{'.'.join(str(x) for x in e['loc'])}: {e['msg']}" for e in exc.errors())
        raise ConfigError(problems) from exc
    # domain-level checks (overlapping lenses, bad apertures) are config errors too
    try:
        basis = cfg.build_basis()
        cfg.build_state(basis)
        cfg.build_sensor()
        if cfg.baseline.sensor is not None:
            cfg.build_sensor(cfg.baseline.sensor)
        cfg.build_noise()
    except (ShtomoError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg
