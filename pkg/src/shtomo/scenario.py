"""Pipeline orchestration and report emission.

Every stage runs inside :func:`stage`, which tags failures with the stage
name. Artifacts are written to a scratch directory next to the output
directory and moved into place only when the whole run succeeds.
"""
from __future__ import annotations

import json
import math
import shutil
import tempfile
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .baseline import baseline_source_grid, centroid_slopes, reconstruct_wavefront, standard_far_field
from .config import ScenarioConfig
from .errors import ScenarioError
from .field import CoherenceMatrix, ModeBasis, fidelity, purity
from .io import write_table
from .propagation import IntensityMap, correlation_coefficient, far_field_intensity, propagate_modes
from .sensor import IntensityRecord, SensorGeometry, simulate_intensities
from .tomography import (TomographyMatrix, build_tomography_matrix, dynamical_range, linear_reconstruct,
                         ml_reconstruct, singular_spectrum)

SCHEMA_VERSION = 1
TIMESTAMP_KEY = "generated_at"


@contextmanager
def stage(name: str):
    try:
        yield
    except ScenarioError:
        raise
    except Exception as exc:  # noqa: BLE001 - every failure is reported with its stage
        raise ScenarioError(name, exc) from exc


def _round(x, digits: int = 12):
    if isinstance(x, dict):
        return {k: _round(v, digits) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_round(v, digits) for v in x]
    if isinstance(x, np.ndarray):
        return _round(x.tolist(), digits)
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if not math.isfinite(x):
            return None
        return float(f"{x:.{digits}g}") + 0.0
    return x


def dump_report(report: dict) -> str:
    return json.dumps(_round(report), indent=2, sort_keys=True) + "\n"


class ArtifactWriter:
    """Collects output files in a scratch directory; :meth:`commit` moves them to ``out``."""

    def __init__(self, out: Path, fmt: str = "csv"):
        self.out = Path(out)
        self.fmt = fmt
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.out.name}-", dir=self.out.parent))
        self.names: list[str] = []

    def path(self, name: str) -> Path:
        self.names.append(name)
        p = self.tmp / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def text(self, name: str, content: str) -> None:
        self.path(name).write_text(content)

    def table(self, stem: str, header: list[str], rows) -> str:
        rows = [list(r) for r in rows]
        if self.fmt == "json":
            name = f"{stem}.json"
            self.text(name, json.dumps(_round([dict(zip(header, r)) for r in rows]), indent=1) + "\n")
        else:
            name = f"{stem}.csv"
            write_table(self.path(name), header, rows)
        return name

    def matrix(self, stem: str, rho: CoherenceMatrix) -> list[str]:
        if self.fmt == "json":
            self.text(f"{stem}.json", json.dumps(_round(rho.to_dict()), indent=1) + "\n")
            return [f"{stem}.json"]
        names = [f"{stem}_real.csv", f"{stem}_imag.csv"]
        rho.to_csv(self.path(names[0]), self.path(names[1]))
        return names

    def intensity_map(self, stem: str, m: IntensityMap) -> list[str]:
        pts = m.grid.points().reshape(-1, m.grid.ndim)
        header = ["x_mm", "y_mm"][: m.grid.ndim] + ["value"]
        table = self.table(stem, header, (list(p) + [v] for p, v in zip(pts, m.values.ravel())))
        m.to_pgm(self.path(f"{stem}.pgm"))
        return [table, f"{stem}.pgm"]

    def commit(self) -> list[str]:
        self.out.mkdir(parents=True, exist_ok=True)
        for name in self.names:
            dest = self.out / name
            dest.parent.mkdir(parents=True, exist_ok=True)
            (self.tmp / name).replace(dest)
        shutil.rmtree(self.tmp, ignore_errors=True)
        return sorted(set(self.names))

    def abort(self) -> None:
        shutil.rmtree(self.tmp, ignore_errors=True)


# stages ------------------------------------------------------------------

@dataclass
class Context:
    cfg: ScenarioConfig
    basis: ModeBasis = None
    rho_true: CoherenceMatrix = None
    geom: SensorGeometry = None
    record: IntensityRecord = None
    tomo: TomographyMatrix = None
    estimates: dict[str, CoherenceMatrix] = field(default_factory=dict)
    maps: dict[str, IntensityMap] = field(default_factory=dict)
    report: dict = field(default_factory=dict)


def setup(cfg: ScenarioConfig) -> Context:
    ctx = Context(cfg)
    with stage("config"):
        ctx.basis = cfg.build_basis()
        ctx.rho_true = cfg.build_state(ctx.basis)
        ctx.geom = cfg.build_sensor()
    ctx.report.update({
        "schema": SCHEMA_VERSION,
        "name": cfg.name,
        "seed": cfg.seed,
        "config": cfg.model_dump(mode="json", exclude={"output_dir"}),
        "basis": {"labels": ctx.basis.labels, "d": ctx.basis.d},
        "true_state": {"rho": _pairs(ctx.rho_true.normalized().rho), "purity": purity(ctx.rho_true)},
    })
    return ctx


def _pairs(m: np.ndarray) -> list:
    return [[[float(z.real), float(z.imag)] for z in row] for row in m]


def run_simulate(ctx: Context) -> None:
    with stage("simulate"):
        ctx.record = simulate_intensities(ctx.rho_true, ctx.geom, ctx.cfg.build_noise(), seed=ctx.cfg.seed)
        power = ctx.record.lens_power()
        ctx.report["measurement"] = {
            "n_lenses": ctx.geom.n_lenses,
            "pixels_per_lens": ctx.geom.n_pixels,
            "n_samples": ctx.geom.n_measurements,
            "n_parameters": ctx.basis.d ** 2,
            "noise": ctx.cfg.noise.type,
            "lens_power_fraction": power / power.sum(),
        }


def run_analysis(ctx: Context) -> None:
    cfg = ctx.cfg.reconstruction
    with stage("analyze"):
        if ctx.tomo is None:
            ctx.tomo = build_tomography_matrix(ctx.geom, ctx.basis)
        spec = singular_spectrum(ctx.tomo.P)
        rank = spec.rank(cfg.rank_threshold)
        count, _ = dynamical_range(spec, cfg.dynamical_range_threshold)
        labels = ctx.tomo.hbasis.labels
        missing = []
        for v in spec.null_directions(cfg.rank_threshold):
            k = int(np.argmax(np.abs(v)))
            missing.append({"dominant": labels[k], "alignment": float(v[k] ** 2),
                            "coordinates": {labels[j]: float(v[j]) for j in np.flatnonzero(np.abs(v) > 1e-6)}})
        d2 = ctx.basis.d ** 2
        ctx.report["spectrum"] = {
            "values": spec.values,
            "normalized": spec.normalized,
            "rank": rank,
            "rank_threshold": cfg.rank_threshold,
            "n_parameters": d2,
            "informationally_complete": rank == d2,
            "missing_directions": missing,
            "dynamical_range": {"threshold": cfg.dynamical_range_threshold, "count": count},
        }


def run_reconstruct(ctx: Context) -> None:
    cfg = ctx.cfg
    out = {}
    with stage("reconstruct"):
        if ctx.tomo is None:
            ctx.tomo = build_tomography_matrix(ctx.geom, ctx.basis)
        if "ml" in cfg.reconstruction.methods:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                res = ml_reconstruct(ctx.record, ctx.geom, ctx.basis,
                                     cfg.build_ml_options(ctx.rho_true), tomo=ctx.tomo)
            ctx.estimates["ml"] = res.rho_hat
            out["ml"] = {
                "fidelity": res.fidelity,
                "iterations": res.iterations,
                "loglik": res.loglik,
                "converged": res.converged,
                "convergence_delta": res.convergence_delta,
                "purity": purity(res.rho_hat),
                "background_fraction": res.background_fraction,
                "rho": _pairs(res.rho_hat.rho),
            }
        if "linear" in cfg.reconstruction.methods:
            rho = linear_reconstruct(ctx.record, ctx.tomo.P, ctx.tomo.hbasis, ctx.basis,
                                     cfg.reconstruction.rank_threshold)
            ctx.estimates["linear"] = rho
            out["linear"] = {"fidelity": fidelity(rho, ctx.rho_true), "purity": purity(rho),
                             "rho": _pairs(rho.rho)}
    ctx.report["reconstruction"] = out


def run_propagate(ctx: Context, with_baseline: bool | None = None) -> None:
    built = ctx.cfg.build_kernel(ctx.basis)
    if built is None or ctx.basis.waist is None:
        ctx.report["propagation"] = {"skipped": "no output plane, or a basis without finite extent"}
        return
    kernel, source = built
    with stage("propagate"):
        modes = propagate_modes(ctx.basis, kernel, source)
        ctx.maps["direct"] = far_field_intensity(ctx.rho_true, modes=modes)
        for name, rho in ctx.estimates.items():
            ctx.maps[f"tomographic_{name}"] = far_field_intensity(rho, modes=modes)
        corr = {f"tomographic_{name}": correlation_coefficient(ctx.maps[f"tomographic_{name}"], ctx.maps["direct"])
                for name in ctx.estimates}
    ctx.report["propagation"] = {
        "plane": ctx.cfg.plane.type,
        "distance_mm": kernel.distance,
        "grid": {"points": kernel.output.n, "step_mm": kernel.output.step},
        "correlation_with_direct": corr,
    }
    if ctx.cfg.baseline.enabled if with_baseline is None else with_baseline:
        run_baseline(ctx, kernel)


def run_baseline(ctx: Context, kernel) -> None:
    cfg = ctx.cfg
    with stage("baseline"):
        if cfg.baseline.sensor is None:
            geom, record = ctx.geom, ctx.record
        else:
            geom = cfg.build_sensor(cfg.baseline.sensor)
            record = simulate_intensities(ctx.rho_true, geom, cfg.build_noise(), seed=cfg.seed)
        slopes = centroid_slopes(record, geom)
        wf = reconstruct_wavefront(slopes, geom)
        std = standard_far_field(slopes, wf, geom, kernel, baseline_source_grid(geom, cfg.baseline.source_points))
        ctx.maps["standard"] = std
        c_std = correlation_coefficient(std, ctx.maps["direct"])
    ctx.report["propagation"]["correlation_with_direct"]["standard"] = c_std
    ctx.report["baseline"] = {
        "n_lenses": geom.n_lenses,
        "invalid_lenses": np.flatnonzero(~slopes.valid).tolist(),
        "slopes": slopes.slopes,
        "wavefront_mm": [None if math.isnan(v) else v for v in wf.values],
        "wavefront_residual": wf.residual,
    }


# emission ----------------------------------------------------------------

def write_artifacts(ctx: Context, writer: ArtifactWriter) -> list[str]:
    names = []
    if ctx.record is not None:
        if writer.fmt == "csv":
            ctx.record.to_csv(writer.path("intensities.csv"))
            names.append("intensities.csv")
        else:
            rows = [(i, j, v) for i in range(ctx.record.n_lenses) for j, v in enumerate(ctx.record.values[i])]
            names.append(writer.table("intensities", ["lens", "pixel", "value"], rows))
        pgms = [p.relative_to(writer.tmp).as_posix() for p in ctx.record.to_pgm(writer.tmp / "ccd")]
        writer.names += pgms
        names += pgms
    names += writer.matrix("rho_true", ctx.rho_true.normalized())
    for name, rho in ctx.estimates.items():
        names += writer.matrix(f"rho_{name}", rho)
    if "spectrum" in ctx.report:
        s = ctx.report["spectrum"]
        names.append(writer.table("spectrum", ["k", "S_kk", "S_kk_over_S_max"],
                                  ((k + 1, v, n) for k, (v, n) in enumerate(zip(s["values"], s["normalized"])))))
    for name, m in ctx.maps.items():
        names += writer.intensity_map(f"far_field_{name}", m)
    return names


def finish(ctx: Context, out: Path, fmt: str = "csv", report_name: str = "report.json") -> dict:
    writer = ArtifactWriter(out, fmt)
    try:
        with stage("write"):
            ctx.report["artifacts"] = sorted(write_artifacts(ctx, writer) + [report_name])
            ctx.report[TIMESTAMP_KEY] = datetime.now(timezone.utc).isoformat(timespec="seconds")
            writer.text(report_name, dump_report(ctx.report))
            writer.commit()
    except BaseException:
        writer.abort()
        raise
    return ctx.report


def run_scenario(cfg: ScenarioConfig, out: Path | None = None, fmt: str = "csv") -> dict:
    """Full pipeline: simulate, analyse, reconstruct, propagate, compare, write."""
    ctx = setup(cfg)
    run_simulate(ctx)
    run_analysis(ctx)
    run_reconstruct(ctx)
    run_propagate(ctx)
    return finish(ctx, Path(out or cfg.output_dir), fmt)
