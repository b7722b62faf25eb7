import json
import os
import subprocess
import sys

import numpy as np
import pytest
import yaml

from smdk.core import read_tensor, write_tensor
from smdk.experiment import (
    ConfigError,
    load_external_sinogram,
    run_experiment,
    validate_config,
    write_pgm16,
)
import smdk.experiment as experiment_module


TINY_CONFIG = """
geometry:
  source_to_detector_mm: 180.0
  source_to_isocenter_mm: 132.0
  num_views: 60
  num_detectors: 64
  detector_pitch_mm: 0.8
  image_width_px: 32
  image_height_px: 32
  pixel_size_mm: 0.8
phantom:
  materials: [bone, soft_tissue, iodine]
  ellipses:
    - {center: [0.0, 0.0], axes: [0.8, 0.7], fractions: {soft_tissue: 0.8}}
    - {center: [0.0, 0.35], axes: [0.18, 0.14], fractions: {bone: 0.2, soft_tissue: 0.6}}
    - {center: [0.1, -0.15], axes: [0.16, 0.16], fractions: {soft_tissue: 0.85, iodine: 0.012}}
spectrum:
  bin_edges_keV: [16.0, 22.0, 25.0, 28.0, 50.0]
  mixing: {MIXING}
noise:
  photons_per_ray: 5000
  rng_seed: 0
recon:
  sart: {outer_iterations: 8, sart_relaxation: 1.9}
  tvm:
    outer_iterations: 8
    sart_relaxation: 1.9
    tv_weight_per_bin: [0.01, 0.008, 0.007, 0.006]
decomp:
  di: {}
  tvmd: {outer_iterations: 5, coupling: 0.2, tv_weight_per_material: [0.02, 0.085, 0.0012]}
pipelines: [SART-DI, TVM-TVMD]
reference_mode: true-phantom
"""


@pytest.fixture
def tiny_config(data_dir):
    text = TINY_CONFIG.replace("{MIXING}", str(data_dir / "mixing_4bin.smdk"))
    return validate_config(text)


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------

def test_validate_reports_all_errors_together(data_dir):
    text = TINY_CONFIG.replace("{MIXING}", str(data_dir / "mixing_4bin.smdk"))
    raw = yaml.safe_load(text)
    raw.pop("pipelines")
    raw["noise"]["photons_per_ray"] = -5
    raw["geometry"]["num_views"] = 0
    with pytest.raises(ConfigError) as err:
        validate_config(yaml.safe_dump(raw))
    messages = "\n".join(err.value.errors)
    assert "pipelines" in messages
    assert "photons_per_ray" in messages
    assert "num_views" in messages
    assert len(err.value.errors) >= 3


def test_validate_missing_field_named(data_dir):
    text = TINY_CONFIG.replace("{MIXING}", str(data_dir / "mixing_4bin.smdk"))
    raw = yaml.safe_load(text)
    raw.pop("pipelines")
    with pytest.raises(ConfigError, match="pipelines"):
        validate_config(yaml.safe_dump(raw))


def test_validate_unknown_pipeline(data_dir):
    text = TINY_CONFIG.replace("{MIXING}", str(data_dir / "mixing_4bin.smdk"))
    raw = yaml.safe_load(text)
    raw["pipelines"] = ["SART-DI", "FBP-DI"]
    with pytest.raises(ConfigError, match="FBP-DI"):
        validate_config(yaml.safe_dump(raw))


def test_validate_rejects_unknown_top_level_key(data_dir):
    text = TINY_CONFIG.replace("{MIXING}", str(data_dir / "mixing_4bin.smdk"))
    with pytest.raises(ConfigError, match="unknown top-level"):
        validate_config(text + "\nbogus_key: 1\n")


def test_validate_not_yaml():
    with pytest.raises(ConfigError, match="YAML"):
        validate_config("geometry: [unclosed")


def test_validate_bundled_desk_config_golden(data_dir):
    config = validate_config((data_dir / "config_desk.yaml").read_text(), base_dir=data_dir)
    g = config.geometry
    assert (g.source_to_detector_mm, g.source_to_isocenter_mm) == (180.0, 132.0)
    assert (g.num_views, g.num_detectors) == (360, 256)
    assert (g.image_width_px, g.image_height_px, g.pixel_size_mm) == (128, 128, 0.2)
    assert config.noise.photons_per_ray == 5000 and config.noise.rng_seed == 0
    assert config.pipelines == ("SART-DI", "TVM-DI", "SART-TVMD", "TVM-TVMD")
    assert config.spectrum.bin_edges_keV == (16.0, 22.0, 25.0, 28.0, 50.0)
    assert config.spectrum.mixing.num_materials == 3
    assert config.material_names == ("bone", "soft_tissue", "iodine")
    assert config.recon_params["TVM"].tv_weight_per_bin == (0.01, 0.008, 0.007, 0.006)
    assert config.decomp_params["TVMD"].coupling == 0.2
    assert config.display_windows["bone"] == (0.03, 0.2)
    assert config.reference_mode == "true-phantom"


def test_validate_bundled_full_config_golden(data_dir):
    config = validate_config((data_dir / "config_full.yaml").read_text(), base_dir=data_dir)
    g = config.geometry
    assert (g.source_to_detector_mm, g.source_to_isocenter_mm) == (180.0, 132.0)
    assert (g.num_views, g.num_detectors, g.detector_pitch_mm) == (640, 512, 0.1)
    assert (g.image_width_px, g.image_height_px, g.pixel_size_mm) == (512, 512, 0.05)
    assert config.noise.photons_per_ray == 5000
    assert config.recon_params["SART"].outer_iterations == 30
    assert config.reference_mode == "paper-analog"
    assert config.pipelines == ("SART-DI", "TVM-DI", "SART-TVMD", "TVM-TVMD")


def test_validate_missing_phantom_file(tmp_path, data_dir):
    text = TINY_CONFIG.replace("{MIXING}", str(data_dir / "mixing_4bin.smdk"))
    raw = yaml.safe_load(text)
    raw["phantom"] = "no_such_phantom.yaml"
    with pytest.raises(ConfigError, match="does not exist"):
        validate_config(yaml.safe_dump(raw), base_dir=tmp_path)


# ---------------------------------------------------------------------------
# external sinograms and graymaps
# ---------------------------------------------------------------------------

def test_external_sinogram_round_trip(tmp_path, tiny_config, rng):
    stack = rng.random((60, 64, 4))
    path = tmp_path / "sino.smdk"
    write_tensor(path, stack)
    loaded = load_external_sinogram(path, tiny_config.geometry)
    np.testing.assert_array_equal(loaded.data, stack)


def test_external_sinogram_dim_mismatch(tmp_path, tiny_config, rng):
    path = tmp_path / "sino.smdk"
    write_tensor(path, rng.random((61, 64, 4)))
    with pytest.raises(ValueError, match="do not match"):
        load_external_sinogram(path, tiny_config.geometry)


def test_pgm16_layout(tmp_path):
    img = np.array([[0.0, 0.5], [1.0, 2.0]])
    path = tmp_path / "img.pgm"
    write_pgm16(path, img, window=(0.0, 1.0))
    data = path.read_bytes()
    assert data.startswith(b"P5\n2 2\n65535\n")
    pixels = np.frombuffer(data.split(b"65535\n", 1)[1], dtype=">u2").reshape(2, 2)
    assert pixels[0, 0] == 0 and pixels[1, 0] == 65535
    assert pixels[1, 1] == 65535  # clipped at window top
    assert pixels[0, 1] == round(0.5 * 65535)


# ---------------------------------------------------------------------------
# run_experiment
# ---------------------------------------------------------------------------

def test_run_experiment_artifacts_and_manifest(tmp_path, tiny_config):
    manifest = run_experiment(tiny_config, output_dir=tmp_path / "run")
    assert manifest.all_ok
    names = {p.name for p in manifest.pipelines}
    assert names == {"SART-DI", "TVM-TVMD"}
    out = tmp_path / "run"
    for fname in ("materials_truth.smdk", "sinogram_noisy.smdk", "channels_SART.smdk",
                  "materials_SART-DI.smdk", "air_TVM-TVMD.smdk", "metrics.csv",
                  "ranking.csv", "convergence_recon_TVM.csv",
                  "convergence_decomp_TVM-TVMD.csv", "run_manifest.json",
                  "materials_TVM-TVMD_iodine.pgm"):
        assert (out / fname).exists(), fname
    saved = json.loads((out / "run_manifest.json").read_text())
    assert saved["seed"] == 0
    assert saved["versions"]["smdk"]
    assert "zero_count_clamps" in saved["noise_clamps"]
    maps = read_tensor(out / "materials_TVM-TVMD.smdk")
    air = read_tensor(out / "air_TVM-TVMD.smdk")[:, :, 0]
    np.testing.assert_allclose(maps.sum(axis=2) + air, 1.0, atol=1e-12)


def test_run_experiment_noise_free_when_noise_absent(tmp_path, tiny_config, data_dir):
    text = TINY_CONFIG.replace("{MIXING}", str(data_dir / "mixing_4bin.smdk"))
    raw = yaml.safe_load(text)
    raw.pop("noise")
    raw["pipelines"] = ["SART-DI"]
    config = validate_config(yaml.safe_dump(raw))
    manifest = run_experiment(config, output_dir=tmp_path / "clean")
    assert manifest.seed is None
    assert not (tmp_path / "clean" / "sinogram_noisy.smdk").exists()
    clean = read_tensor(tmp_path / "clean" / "sinogram_clean.smdk")
    assert np.all(np.isfinite(clean))


def test_run_experiment_seed_override_changes_noise(tmp_path, tiny_config):
    run_experiment(tiny_config, seed=1, output_dir=tmp_path / "a",
                   stages=("simulate",))
    run_experiment(tiny_config, seed=2, output_dir=tmp_path / "b",
                   stages=("simulate",))
    a = read_tensor(tmp_path / "a" / "sinogram_noisy.smdk")
    b = read_tensor(tmp_path / "b" / "sinogram_noisy.smdk")
    assert not np.array_equal(a, b)


def test_run_experiment_deterministic_outputs(tmp_path, tiny_config):
    m1 = run_experiment(tiny_config, output_dir=tmp_path / "r1")
    m2 = run_experiment(tiny_config, output_dir=tmp_path / "r2")
    for name in sorted(set(m1.artifacts)):
        if name.endswith((".csv", ".smdk")):
            b1 = (tmp_path / "r1" / name).read_bytes()
            b2 = (tmp_path / "r2" / name).read_bytes()
            assert b1 == b2, f"{name} differs between identical runs"


def test_run_experiment_isolates_pipeline_failure(tmp_path, tiny_config, monkeypatch):
    real = experiment_module.decompose

    def flaky(channels, mixing, params, mode, reference=None):
        if mode == "TVMD":
            raise FloatingPointError("synthetic numeric failure")
        return real(channels, mixing, params, mode, reference=reference)

    monkeypatch.setattr(experiment_module, "decompose", flaky)
    manifest = run_experiment(tiny_config, output_dir=tmp_path / "run")
    status = {p.name: p.status for p in manifest.pipelines}
    assert status == {"SART-DI": "ok", "TVM-TVMD": "failed"}
    assert not manifest.all_ok
    failed = [p for p in manifest.pipelines if p.status == "failed"][0]
    assert "FloatingPointError" in failed.error
    assert (tmp_path / "run" / "materials_SART-DI.smdk").exists()


def test_run_experiment_external_sinogram_skips_simulation(tmp_path, tiny_config, data_dir, rng):
    ext = tmp_path / "external.smdk"
    write_tensor(ext, rng.random((60, 64, 4)).astype(float))
    text = TINY_CONFIG.replace("{MIXING}", str(data_dir / "mixing_4bin.smdk"))
    raw = yaml.safe_load(text)
    raw["external_sinogram"] = str(ext)
    raw["pipelines"] = ["SART-DI"]
    config = validate_config(yaml.safe_dump(raw))
    manifest = run_experiment(config, output_dir=tmp_path / "ext_run")
    assert manifest.all_ok
    assert not (tmp_path / "ext_run" / "materials_truth.smdk").exists()
    assert not (tmp_path / "ext_run" / "metrics.csv").exists()  # no reference
    assert (tmp_path / "ext_run" / "materials_SART-DI.smdk").exists()


def test_paper_analog_reference_mode(tmp_path, tiny_config, data_dir):
    text = TINY_CONFIG.replace("{MIXING}", str(data_dir / "mixing_4bin.smdk"))
    raw = yaml.safe_load(text)
    raw["reference_mode"] = "paper-analog"
    raw["pipelines"] = ["SART-DI"]
    config = validate_config(yaml.safe_dump(raw))
    manifest = run_experiment(config, output_dir=tmp_path / "pa")
    assert manifest.all_ok
    assert (tmp_path / "pa" / "materials_reference.smdk").exists()
    ref = read_tensor(tmp_path / "pa" / "materials_reference.smdk")
    truth = read_tensor(tmp_path / "pa" / "materials_truth.smdk")
    assert not np.array_equal(ref, truth)  # reference is recon-based, not truth


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def _write_tiny(tmp_path, data_dir, **overrides):
    text = TINY_CONFIG.replace("{MIXING}", str(data_dir / "mixing_4bin.smdk"))
    raw = yaml.safe_load(text)
    raw.update(overrides)
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


def _cli(*args, env=None):
    full_env = dict(os.environ)
    if env:
        full_env.update(env)
    result = subprocess.run([sys.executable, "-m", "smdk.cli", *args],
                            capture_output=True, text=True, env=full_env)
    return result


def test_cli_validate_ok(tmp_path, data_dir):
    cfg = _write_tiny(tmp_path, data_dir)
    result = _cli("validate", "--config", str(cfg))
    assert result.returncode == 0
    assert "config OK" in result.stdout


def test_cli_validate_reports_errors_exit_2(tmp_path, data_dir):
    cfg = _write_tiny(tmp_path, data_dir, pipelines=[])
    result = _cli("validate", "--config", str(cfg))
    assert result.returncode == 2
    assert "pipelines" in result.stderr


def test_cli_requires_config_or_preset():
    result = _cli("validate")
    assert result.returncode == 2


def test_cli_rejects_config_plus_desk_scale(tmp_path, data_dir):
    cfg = _write_tiny(tmp_path, data_dir)
    result = _cli("validate", "--config", str(cfg), "--desk-scale")
    assert result.returncode == 2


def test_cli_run_and_metrics_roundtrip(tmp_path, data_dir):
    cfg = _write_tiny(tmp_path, data_dir)
    out = tmp_path / "run"
    result = _cli("run", "--config", str(cfg), "--out", str(out),
                  "--pipelines", "SART-DI")
    assert result.returncode == 0, result.stderr
    assert (out / "metrics.csv").exists()
    (out / "metrics.csv").unlink()
    result = _cli("metrics", "--config", str(cfg), "--out", str(out),
                  "--pipelines", "SART-DI")
    assert result.returncode == 0, result.stderr
    assert (out / "metrics.csv").exists()


def test_cli_simulate_stage_only(tmp_path, data_dir):
    cfg = _write_tiny(tmp_path, data_dir)
    out = tmp_path / "sim"
    result = _cli("simulate", "--config", str(cfg), "--out", str(out))
    assert result.returncode == 0, result.stderr
    assert (out / "sinogram_noisy.smdk").exists()
    assert not (out / "channels_SART.smdk").exists()


def test_cli_unknown_pipeline_flag(tmp_path, data_dir):
    cfg = _write_tiny(tmp_path, data_dir)
    result = _cli("run", "--config", str(cfg), "--pipelines", "NOPE")
    assert result.returncode == 2
