"""Quantitative evaluation: RMSE, PSNR, SSIM, line profiles and pipeline ranking."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_same_shape(x: np.ndarray, y: np.ndarray):
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")


def rmse(x: np.ndarray, y: np.ndarray) -> float:
    """Root mean square error between two images."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_same_shape(x, y)
    return float(np.sqrt(np.mean((x - y) ** 2)))


def psnr(x: np.ndarray, ref: np.ndarray, peak: float) -> float:
    """Peak signal-to-noise ratio in dB; +inf when the images are identical."""
    if peak <= 0:
        raise ValueError("peak must be strictly positive")
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    _check_same_shape(x, ref)
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def ssim(x: np.ndarray, ref: np.ndarray, dynamic_range: float) -> float:
    """Mean local structural similarity (Gaussian 11x11 window, sigma 1.5).

    Local means, variances and covariance are Gaussian-weighted; the mean is
    taken over windows fully inside the image. The stabilizing constants
    C1 = (K1 L)^2 and C2 = (K2 L)^2 keep flat regions well-defined, and
    identical images score exactly 1.
    """
    if dynamic_range <= 0:
        raise ValueError("dynamic_range must be strictly positive")
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    _check_same_shape(x, ref)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels per side")
    w = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    mu_x = convolve2d(x, w, mode="valid")
    mu_y = convolve2d(ref, w, mode="valid")
    exx = convolve2d(x * x, w, mode="valid")
    eyy = convolve2d(ref * ref, w, mode="valid")
    exy = convolve2d(x * ref, w, mode="valid")
    var_x = exx - mu_x * mu_x
    var_y = eyy - mu_y * mu_y
    cov = exy - mu_x * mu_y
    c1 = (SSIM_K1 * dynamic_range) ** 2
    c2 = (SSIM_K2 * dynamic_range) ** 2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def extract_profile(img: np.ndarray, line: tuple[str, int]) -> np.ndarray:
    """Pixel values along a grid line; ``line`` is ("row" | "col", index)."""
    img = np.asarray(img)
    axis, index = line
    if axis == "row":
        if not 0 <= index < img.shape[0]:
            raise IndexError(f"row {index} out of range [0, {img.shape[0]})")
        return img[index, :].copy()
    if axis == "col":
        if not 0 <= index < img.shape[1]:
            raise IndexError(f"col {index} out of range [0, {img.shape[1]})")
        return img[:, index].copy()
    raise ValueError(f"line axis must be 'row' or 'col', got {axis!r}")


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaterialMetrics:
    material: str
    rmse: float
    psnr_db: float
    ssim: float


@dataclass
class MetricReport:
    """Per-material metric triple for one pipeline."""

    pipeline_label: str
    per_material: list[MaterialMetrics]

    def for_material(self, material: str) -> MaterialMetrics:
        for m in self.per_material:
            if m.material == material:
                return m
        raise KeyError(material)


def evaluate_maps(pipeline_label: str, maps: np.ndarray, reference: np.ndarray,
                  material_names: tuple[str, ...]) -> MetricReport:
    """Metric report for a material map stack against a reference stack.

    PSNR peak and SSIM dynamic range default to the per-material reference
    maximum (falling back to 1 for an all-zero reference slice).
    """
    rows = []
    for v, name in enumerate(material_names):
        ref = reference[:, :, v]
        got = maps[:, :, v]
        peak = float(ref.max())
        if peak <= 0:
            peak = 1.0
        rows.append(MaterialMetrics(
            material=name,
            rmse=rmse(got, ref),
            psnr_db=psnr(got, ref, peak),
            ssim=ssim(got, ref, peak),
        ))
    return MetricReport(pipeline_label=pipeline_label, per_material=rows)


def compare_pipelines(reports: list[MetricReport]) -> dict[str, list[tuple[str, float]]]:
    """Rank pipelines per material by ascending RMSE.

    Returns material -> [(pipeline, rmse), ...] best first. All reports must
    cover the same material set.
    """
    if not reports:
        raise ValueError("need at least one report")
    materials = [m.material for m in reports[0].per_material]
    for rep in reports[1:]:
        if [m.material for m in rep.per_material] != materials:
            raise ValueError("reports cover different material sets")
    ranking: dict[str, list[tuple[str, float]]] = {}
    for material in materials:
        pairs = [(rep.pipeline_label, rep.for_material(material).rmse) for rep in reports]
        pairs.sort(key=lambda pr: pr[1])
        ranking[material] = pairs
    return ranking


def write_metrics_csv(path, reports: list[MetricReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pipeline", "material", "rmse", "psnr_db", "ssim"])
        for rep in reports:
            for m in rep.per_material:
                writer.writerow([rep.pipeline_label, m.material,
                                 repr(m.rmse), repr(m.psnr_db), repr(m.ssim)])


def write_ranking_csv(path, ranking: dict[str, list[tuple[str, float]]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["material", "rank", "pipeline", "rmse"])
        for material, pairs in ranking.items():
            for rank, (pipeline, value) in enumerate(pairs, start=1):
                writer.writerow([material, rank, pipeline, repr(value)])


def format_ranking_table(ranking: dict[str, list[tuple[str, float]]]) -> str:
    lines = []
    for material, pairs in ranking.items():
        lines.append(f"{material}:")
        for rank, (pipeline, value) in enumerate(pairs, start=1):
            lines.append(f"  {rank}. {pipeline:<12s} rmse={value:.6g}")
    return "\n".join(lines) + "\n"
