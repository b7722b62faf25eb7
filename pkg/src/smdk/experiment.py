"""Config-driven experiment orchestration.

Parses and validates the YAML experiment file, runs the selected pipelines
(shared simulation -> reconstruction -> decomposition -> metrics) and writes
every artifact plus a JSON manifest into the run directory. Outputs are a
pure function of (config, seed): CSV and tensor artifacts are byte-identical
across repeat runs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .core import (
    ChannelImageStack,
    FanBeamGeometry,
    MaterialMapStack,
    MixingMatrix,
    NoiseModel,
    SinogramStack,
    read_tensor,
    write_tensor,
)
from .analyze import (
    MetricReport,
    compare_pipelines,
    evaluate_maps,
    extract_profile,
    format_ranking_table,
    write_metrics_csv,
    write_ranking_csv,
)
from .decomp import DecompParams, decompose
from .recon import ReconParams, reconstruct
from .simulate import (
    PhantomSpec,
    SpectrumSpec,
    air_from_materials,
    apply_poisson_noise,
    make_phantom,
    mix_channels,
    synthesize_sinograms,
)

PIPELINES = ("SART-DI", "TVM-DI", "SART-TVMD", "TVM-TVMD")
_PIPELINE_STAGES = {
    "SART-DI": ("SART", "DI"),
    "TVM-DI": ("TVM", "DI"),
    "SART-TVMD": ("SART", "TVMD"),
    "TVM-TVMD": ("TVM", "TVMD"),
}
REFERENCE_MODES = ("true-phantom", "paper-analog")

_DEFAULT_WINDOWS = {
    "bone": (0.03, 0.2),
    "soft_tissue": (0.1, 0.85),
    "iodine": (0.0007, 0.003),
}


class ConfigError(ValueError):
    """Invalid experiment configuration; carries the full list of violations."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n" + "\n".join(f"- {e}" for e in errors))


@dataclass
class ExperimentConfig:
    geometry: FanBeamGeometry
    spectrum: SpectrumSpec
    phantom: PhantomSpec | None
    noise: NoiseModel | None
    recon_params: dict[str, ReconParams]
    decomp_params: dict[str, DecompParams]
    pipelines: tuple[str, ...]
    reference_mode: str = "true-phantom"
    output_dir: Path | None = None
    external_sinogram: Path | None = None
    display_windows: dict[str, tuple[float, float]] = field(default_factory=dict)
    profile_lines: tuple[tuple[str, int], ...] | None = None
    raw_text: str = ""

    @property
    def material_names(self) -> tuple[str, ...]:
        if self.phantom is not None:
            return self.phantom.material_names
        if self.spectrum.mixing.material_names is not None:
            return self.spectrum.mixing.material_names
        return tuple(f"material_{v}" for v in range(self.spectrum.mixing.num_materials))


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

_TOP_LEVEL_KEYS = {
    "geometry", "phantom", "spectrum", "noise", "recon", "decomp", "pipelines",
    "reference_mode", "output_dir", "external_sinogram", "display_windows",
    "profile_lines",
}

_GEOMETRY_KEYS = {
    "source_to_detector_mm", "source_to_isocenter_mm", "num_views",
    "num_detectors", "detector_pitch_mm", "image_width_px", "image_height_px",
    "pixel_size_mm", "angular_range_rad", "detector_offset_px", "start_angle_rad",
}


def _resolve(path_str: str, base_dir: Path | None) -> Path:
    p = Path(path_str)
    if not p.is_absolute() and base_dir is not None:
        p = base_dir / p
    return p


def _parse_geometry(raw, errors) -> FanBeamGeometry | None:
    if not isinstance(raw, dict):
        errors.append("geometry: expected a mapping")
        return None
    unknown = set(raw) - _GEOMETRY_KEYS
    if unknown:
        errors.append(f"geometry: unknown keys {sorted(unknown)}")
        return None
    try:
        return FanBeamGeometry(**raw)
    except (TypeError, ValueError) as exc:
        errors.append(f"geometry: {exc}")
        return None


def _parse_phantom(raw, base_dir, errors) -> PhantomSpec | None:
    try:
        if isinstance(raw, str):
            path = _resolve(raw, base_dir)
            if not path.exists():
                errors.append(f"phantom: file {path} does not exist")
                return None
            raw = yaml.safe_load(path.read_text())
        if not isinstance(raw, dict):
            errors.append("phantom: expected a mapping or a path to a YAML file")
            return None
        return PhantomSpec.from_mapping(raw)
    except (ValueError, yaml.YAMLError) as exc:
        errors.append(f"phantom: {exc}")
        return None


def _parse_spectrum(raw, base_dir, material_names, errors) -> SpectrumSpec | None:
    if not isinstance(raw, dict):
        errors.append("spectrum: expected a mapping")
        return None
    try:
        edges = tuple(float(e) for e in raw["bin_edges_keV"])
    except (KeyError, TypeError, ValueError):
        errors.append("spectrum: missing or malformed bin_edges_keV")
        return None
    mixing_raw = raw.get("mixing")
    if mixing_raw is None:
        errors.append("spectrum: missing mixing")
        return None
    try:
        if isinstance(mixing_raw, str):
            path = _resolve(mixing_raw, base_dir)
            if not path.exists():
                errors.append(f"spectrum: mixing file {path} does not exist")
                return None
            data = read_tensor(path)[:, :, 0]
        else:
            data = np.asarray(mixing_raw, dtype=np.float64)
        names = raw.get("material_names", material_names)
        if names is not None and len(names) != data.shape[1]:
            names = None
        mixing = MixingMatrix(data=data, material_names=names)
        return SpectrumSpec(bin_edges_keV=edges, mixing=mixing)
    except (ValueError, OSError) as exc:
        errors.append(f"spectrum: {exc}")
        return None


def _parse_noise(raw, errors) -> NoiseModel | None:
    if not isinstance(raw, dict):
        errors.append("noise: expected a mapping")
        return None
    try:
        return NoiseModel(**raw)
    except (TypeError, ValueError) as exc:
        errors.append(f"noise: {exc}")
        return None


def _parse_params(raw, cls, section, errors):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        errors.append(f"{section}: expected a mapping")
        return None
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        errors.append(f"{section}: {exc}")
        return None


def validate_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    """Parse and fully validate an experiment config.

    All schema and invariant violations are collected and reported together
    in a single :class:`ConfigError`.
    """
    errors: list[str] = []
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"not valid YAML: {exc}"]) from exc
    if not isinstance(raw, dict):
        raise ConfigError(["top level must be a mapping"])

    unknown = set(raw) - _TOP_LEVEL_KEYS
    if unknown:
        errors.append(f"unknown top-level keys {sorted(unknown)}")

    external = raw.get("external_sinogram")
    external_path = None
    if external is not None:
        external_path = _resolve(str(external), base_dir)
        if not external_path.exists():
            errors.append(f"external_sinogram: file {external_path} does not exist")

    geometry = None
    if "geometry" not in raw:
        errors.append("missing required section: geometry")
    else:
        geometry = _parse_geometry(raw["geometry"], errors)

    phantom = None
    if external is None:
        if "phantom" not in raw:
            errors.append("missing required section: phantom (no external sinogram given)")
        else:
            phantom = _parse_phantom(raw["phantom"], base_dir, errors)
    elif "phantom" in raw:
        phantom = _parse_phantom(raw["phantom"], base_dir, errors)

    material_names = phantom.material_names if phantom is not None else None

    spectrum = None
    if "spectrum" not in raw:
        errors.append("missing required section: spectrum")
    else:
        spectrum = _parse_spectrum(raw["spectrum"], base_dir, material_names, errors)

    if spectrum is not None and phantom is not None:
        if spectrum.mixing.num_materials != len(phantom.material_names):
            errors.append(
                f"spectrum: mixing matrix has {spectrum.mixing.num_materials} "
                f"materials but phantom defines {len(phantom.material_names)}"
            )

    # noise is optional: a simulated run without it uses the clean sinograms
    noise = None
    if raw.get("noise") is not None:
        noise = _parse_noise(raw["noise"], errors)

    recon_raw = raw.get("recon", {}) or {}
    if not isinstance(recon_raw, dict):
        errors.append("recon: expected a mapping with optional sart/tvm sections")
        recon_raw = {}
    recon_params = {
        "SART": _parse_params(recon_raw.get("sart"), ReconParams, "recon.sart", errors),
        "TVM": _parse_params(recon_raw.get("tvm"), ReconParams, "recon.tvm", errors),
    }
    decomp_raw = raw.get("decomp", {}) or {}
    if not isinstance(decomp_raw, dict):
        errors.append("decomp: expected a mapping with optional di/tvmd sections")
        decomp_raw = {}
    decomp_params = {
        "DI": _parse_params(decomp_raw.get("di"), DecompParams, "decomp.di", errors),
        "TVMD": _parse_params(decomp_raw.get("tvmd"), DecompParams, "decomp.tvmd", errors),
    }

    pipelines: tuple[str, ...] = ()
    if "pipelines" not in raw:
        errors.append("missing required field: pipelines")
    else:
        items = raw["pipelines"]
        if not isinstance(items, (list, tuple)) or not items:
            errors.append("pipelines: expected a non-empty list")
        else:
            bad = [p for p in items if p not in PIPELINES]
            if bad:
                errors.append(f"pipelines: unknown entries {bad}; valid: {list(PIPELINES)}")
            else:
                pipelines = tuple(dict.fromkeys(items))

    reference_mode = raw.get("reference_mode", "true-phantom")
    if reference_mode not in REFERENCE_MODES:
        errors.append(
            f"reference_mode: {reference_mode!r} not one of {list(REFERENCE_MODES)}")

    windows: dict[str, tuple[float, float]] = {}
    for name, pair in (raw.get("display_windows") or {}).items():
        try:
            lo, hi = (float(pair[0]), float(pair[1]))
            if hi <= lo:
                raise ValueError
            windows[str(name)] = (lo, hi)
        except (TypeError, ValueError, IndexError):
            errors.append(f"display_windows.{name}: expected [low, high] with high > low")

    profile_lines = None
    if raw.get("profile_lines") is not None:
        parsed_lines = []
        for i, item in enumerate(raw["profile_lines"]):
            try:
                axis = item["axis"]
                index = int(item["index"])
                if axis not in ("row", "col"):
                    raise ValueError
                parsed_lines.append((axis, index))
            except (TypeError, KeyError, ValueError):
                errors.append(f"profile_lines[{i}]: expected {{axis: row|col, index: int}}")
        profile_lines = tuple(parsed_lines)
        if geometry is not None:
            for axis, index in parsed_lines:
                limit = geometry.image_height_px if axis == "row" else geometry.image_width_px
                if not 0 <= index < limit:
                    errors.append(f"profile_lines: {axis} {index} outside [0, {limit})")

    if errors or geometry is None or spectrum is None:
        if not errors:
            errors.append("configuration incomplete")
        raise ConfigError(errors)

    output_dir = raw.get("output_dir")
    return ExperimentConfig(
        geometry=geometry,
        spectrum=spectrum,
        phantom=phantom,
        noise=noise,
        recon_params=recon_params,
        decomp_params=decomp_params,
        pipelines=pipelines,
        reference_mode=reference_mode,
        output_dir=_resolve(output_dir, base_dir) if output_dir else None,
        external_sinogram=external_path,
        display_windows=windows,
        profile_lines=profile_lines,
        raw_text=text,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return validate_config(path.read_text(), base_dir=path.parent)


# ---------------------------------------------------------------------------
# artifact helpers
# ---------------------------------------------------------------------------

def load_external_sinogram(path, geom: FanBeamGeometry) -> SinogramStack:
    """Load a sinogram stack from an SMDK1 tensor file, checking dimensions."""
    data = read_tensor(path)
    if data.shape[:2] != (geom.num_views, geom.num_detectors):
        raise ValueError(
            f"external sinogram dims {data.shape} do not match geometry "
            f"({geom.num_views} views, {geom.num_detectors} detectors)"
        )
    return SinogramStack(data=data, geometry=geom)


def write_pgm16(path, img: np.ndarray, window: tuple[float, float]) -> None:
    """16-bit binary portable graymap with the given display window."""
    lo, hi = window
    if hi <= lo:
        raise ValueError(f"display window {window} must have high > low")
    scaled = np.clip((np.asarray(img, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)
    pixels = np.rint(scaled * 65535.0).astype(">u2")
    height, width = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n65535\n".encode("ascii"))
        fh.write(pixels.tobytes())


def _window_for(name: str, config: ExperimentConfig, reference: np.ndarray) -> tuple[float, float]:
    if name in config.display_windows:
        return config.display_windows[name]
    if name in _DEFAULT_WINDOWS:
        return _DEFAULT_WINDOWS[name]
    hi = float(reference.max())
    return (0.0, hi if hi > 0 else 1.0)


# ---------------------------------------------------------------------------
# runner
# ---------------------------------------------------------------------------

def recompute_metrics(config: ExperimentConfig, run_dir: Path) -> list[MetricReport]:
    """Rebuild metric tables from the tensors of an existing run directory."""
    run_dir = Path(run_dir)
    names = config.material_names
    ref_file = ("materials_truth.smdk" if config.reference_mode == "true-phantom"
                else "materials_reference.smdk")
    ref_path = run_dir / ref_file
    if not ref_path.exists():
        raise ValueError(f"reference tensor {ref_path} not found; run the pipeline first")
    reference = read_tensor(ref_path)
    reports = []
    for pipeline in config.pipelines:
        maps_path = run_dir / f"materials_{pipeline}.smdk"
        if not maps_path.exists():
            continue
        reports.append(evaluate_maps(pipeline, read_tensor(maps_path), reference, names))
    if not reports:
        raise ValueError(f"no material map tensors for {config.pipelines} in {run_dir}")
    write_metrics_csv(run_dir / "metrics.csv", reports)
    if len(reports) >= 2:
        ranking = compare_pipelines(reports)
        write_ranking_csv(run_dir / "ranking.csv", ranking)
        (run_dir / "ranking.txt").write_text(format_ranking_table(ranking))
    return reports


@dataclass
class PipelineResult:
    name: str
    status: str
    error: str = ""
    seconds: float = 0.0


@dataclass
class RunManifest:
    config_sha256: str
    seed: int | None
    versions: dict
    pipelines: list[PipelineResult]
    stage_seconds: dict
    noise_clamps: dict
    artifacts: list[str]
    output_dir: str

    @property
    def all_ok(self) -> bool:
        return all(p.status == "ok" for p in self.pipelines)

    def to_json(self) -> str:
        payload = {
            "config_sha256": self.config_sha256,
            "seed": self.seed,
            "versions": self.versions,
            "pipelines": [vars(p) for p in self.pipelines],
            "stage_seconds": self.stage_seconds,
            "noise_clamps": self.noise_clamps,
            "artifacts": self.artifacts,
            "output_dir": self.output_dir,
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def _versions() -> dict:
    import numba
    import scipy

    return {
        "smdk": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
        "python": platform.python_version(),
    }


def _default_profile_lines(config: ExperimentConfig) -> tuple[tuple[str, int], ...]:
    if config.profile_lines is not None:
        return config.profile_lines
    geom = config.geometry
    lines = []
    if config.phantom is not None and config.phantom.ellipses:
        # row through the first ellipse that carries the last material
        target = config.phantom.ellipses[-1]
        row = int(round((target.center_y + 1.0) / 2.0 * geom.image_height_px))
        row = min(max(row, 0), geom.image_height_px - 1)
        lines.append(("row", row))
    lines.append(("col", geom.image_width_px // 2))
    return tuple(lines)


def run_experiment(config: ExperimentConfig, seed: int | None = None,
                   output_dir=None, stages: tuple[str, ...] = ("simulate", "reconstruct",
                                                               "decompose", "metrics"),
                   ) -> RunManifest:
    """Execute the selected pipelines end to end and write all artifacts.

    All pipelines consume the same noisy sinogram realization. A numeric
    failure aborts only its pipeline and is recorded in the manifest.
    ``stages`` trims the run for the partial CLI subcommands.
    """
    out = Path(output_dir or config.output_dir or "smdk_run")
    out.mkdir(parents=True, exist_ok=True)
    geom = config.geometry
    mixing = config.spectrum.mixing
    names = config.material_names
    artifacts: list[str] = []
    stage_seconds: dict[str, float] = {}
    noise_clamps: dict[str, int] = {}
    effective_seed: int | None = None

    def save_tensor(name: str, array: np.ndarray):
        write_tensor(out / name, array)
        artifacts.append(name)

    t0 = time.perf_counter()
    truth: MaterialMapStack | None = None
    channels_true: ChannelImageStack | None = None
    sino_clean: SinogramStack | None = None
    if config.external_sinogram is not None:
        sino_noisy = load_external_sinogram(config.external_sinogram, geom)
        if sino_noisy.num_bins != mixing.num_bins:
            raise ValueError(
                f"external sinogram has {sino_noisy.num_bins} bins but the "
                f"mixing matrix has {mixing.num_bins}"
            )
    else:
        assert config.phantom is not None
        truth = make_phantom(config.phantom, geom)
        channels_true = mix_channels(truth, mixing, geom)
        sino_clean = synthesize_sinograms(channels_true)
        save_tensor("materials_truth.smdk", truth.data)
        save_tensor("air_truth.smdk", air_from_materials(truth))
        save_tensor("channels_truth.smdk", channels_true.data)
        save_tensor("sinogram_clean.smdk", sino_clean.data)
        if config.noise is None:
            sino_noisy = sino_clean
        else:
            noise = config.noise
            if seed is not None:
                noise = NoiseModel(photons_per_ray=noise.photons_per_ray,
                                   rng_seed=seed,
                                   min_counts_clamp=noise.min_counts_clamp,
                                   clamp_log_nonnegative=noise.clamp_log_nonnegative)
            effective_seed = noise.rng_seed
            sino_noisy = apply_poisson_noise(sino_clean, noise)
            noise_clamps = {k: sino_noisy.meta[k]
                            for k in ("zero_count_clamps", "negative_log_clamps")}
            save_tensor("sinogram_noisy.smdk", sino_noisy.data)
    stage_seconds["simulate"] = time.perf_counter() - t0

    results: list[PipelineResult] = []
    manifest = RunManifest(
        config_sha256=hashlib.sha256(config.raw_text.encode("utf-8")).hexdigest(),
        seed=effective_seed,
        versions=_versions(),
        pipelines=results,
        stage_seconds=stage_seconds,
        noise_clamps=noise_clamps,
        artifacts=artifacts,
        output_dir=str(out),
    )
    if "reconstruct" not in stages:
        (out / "run_manifest.json").write_text(manifest.to_json())
        return manifest

    # references for convergence logs and metrics
    metrics_possible = config.external_sinogram is None
    reference_maps: MaterialMapStack | None = None
    reference_channels: ChannelImageStack | None = None
    if metrics_possible:
        if config.reference_mode == "true-phantom":
            reference_maps = truth
            reference_channels = channels_true
        else:  # paper-analog: noise-free SART reconstruction decomposed by DI
            t0 = time.perf_counter()
            clean_rec, _ = reconstruct(sino_clean, geom, config.recon_params["SART"], "SART")
            reference_maps, _, _ = decompose(clean_rec, mixing,
                                             config.decomp_params["DI"], "DI")
            reference_channels = clean_rec
            stage_seconds["reference"] = time.perf_counter() - t0
            save_tensor("materials_reference.smdk", reference_maps.data)

    recon_modes = {_PIPELINE_STAGES[p][0] for p in config.pipelines}
    channels: dict[str, ChannelImageStack] = {}
    for mode in sorted(recon_modes):
        t0 = time.perf_counter()
        stack, log = reconstruct(sino_noisy, geom, config.recon_params[mode], mode,
                                 reference=reference_channels)
        stage_seconds[f"recon_{mode}"] = time.perf_counter() - t0
        channels[mode] = stack
        save_tensor(f"channels_{mode}.smdk", stack.data)
        log.write_csv(out / f"convergence_recon_{mode}.csv")
        artifacts.append(f"convergence_recon_{mode}.csv")

    if "decompose" not in stages:
        (out / "run_manifest.json").write_text(manifest.to_json())
        return manifest

    maps_by_pipeline: dict[str, MaterialMapStack] = {}
    for pipeline in config.pipelines:
        recon_mode, decomp_mode = _PIPELINE_STAGES[pipeline]
        t0 = time.perf_counter()
        try:
            maps, air, log = decompose(channels[recon_mode], mixing,
                                       config.decomp_params[decomp_mode], decomp_mode,
                                       reference=reference_maps)
        except Exception as exc:  # isolate pipeline failures
            results.append(PipelineResult(name=pipeline, status="failed",
                                          error=f"{type(exc).__name__}: {exc}",
                                          seconds=time.perf_counter() - t0))
            continue
        seconds = time.perf_counter() - t0
        maps_by_pipeline[pipeline] = maps
        save_tensor(f"materials_{pipeline}.smdk", maps.data)
        save_tensor(f"air_{pipeline}.smdk", air.data)
        log.write_csv(out / f"convergence_decomp_{pipeline}.csv")
        artifacts.append(f"convergence_decomp_{pipeline}.csv")
        ref_for_window = reference_maps.data if reference_maps is not None else maps.data
        for v, mat in enumerate(names):
            window = _window_for(mat, config, ref_for_window[:, :, v])
            gname = f"materials_{pipeline}_{mat}.pgm"
            write_pgm16(out / gname, maps.data[:, :, v], window)
            artifacts.append(gname)
        results.append(PipelineResult(name=pipeline, status="ok", seconds=seconds))

    if "metrics" in stages and metrics_possible and maps_by_pipeline:
        t0 = time.perf_counter()
        reports = [evaluate_maps(p, maps_by_pipeline[p].data, reference_maps.data, names)
                   for p in config.pipelines if p in maps_by_pipeline]
        write_metrics_csv(out / "metrics.csv", reports)
        artifacts.append("metrics.csv")
        if len(reports) >= 2:
            ranking = compare_pipelines(reports)
            write_ranking_csv(out / "ranking.csv", ranking)
            (out / "ranking.txt").write_text(format_ranking_table(ranking))
            artifacts.extend(["ranking.csv", "ranking.txt"])
        for axis, index in _default_profile_lines(config):
            for v, mat in enumerate(names):
                fname = f"profile_{mat}_{axis}{index}.csv"
                with open(out / fname, "w", newline="") as fh:
                    writer = csv.writer(fh)
                    header = ["index", "reference"] + [p for p in config.pipelines
                                                       if p in maps_by_pipeline]
                    writer.writerow(header)
                    ref_line = extract_profile(reference_maps.data[:, :, v], (axis, index))
                    lines = [extract_profile(maps_by_pipeline[p].data[:, :, v], (axis, index))
                             for p in config.pipelines if p in maps_by_pipeline]
                    for i in range(len(ref_line)):
                        writer.writerow([i, repr(float(ref_line[i]))]
                                        + [repr(float(ln[i])) for ln in lines])
                artifacts.append(fname)
        stage_seconds["metrics"] = time.perf_counter() - t0

    (out / "run_manifest.json").write_text(manifest.to_json())
    return manifest
