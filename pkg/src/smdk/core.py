"""Domain types, dense rank-3 tensor helpers and the versioned tensor file format.

All scalar data is 64-bit float. Tensors are dense, row-major, with the
bin/material index as the slowest-varying (last) axis so that mode-3
unfolding is a plain reshape.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TENSOR_MAGIC = "SMDK1"


class TensorFormatError(ValueError):
    """Raised when a tensor file violates the SMDK1 format."""


class FieldOfViewWarning(UserWarning):
    """Image square extends beyond the scan field of view (data truncation)."""


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FanBeamGeometry:
    """Circular fan-beam scanner description.

    The geometry implicitly defines the system matrix: one ray per
    (view, detector) pair, from a point source to the center of a detector
    element, intersected with a square pixel grid centered on the isocenter.

    Distances are millimetres. ``detector_offset_px`` shifts the detector
    array center by a (possibly fractional) number of elements. View angles
    are uniformly spaced: ``start_angle_rad + k * angular_range_rad / num_views``.
    """

    source_to_detector_mm: float
    source_to_isocenter_mm: float
    num_views: int
    num_detectors: int
    detector_pitch_mm: float
    image_width_px: int
    image_height_px: int
    pixel_size_mm: float
    angular_range_rad: float = 2.0 * math.pi
    detector_offset_px: float = 0.0
    start_angle_rad: float = 0.0

    def __post_init__(self):
        positive = {
            "source_to_detector_mm": self.source_to_detector_mm,
            "source_to_isocenter_mm": self.source_to_isocenter_mm,
            "num_views": self.num_views,
            "num_detectors": self.num_detectors,
            "detector_pitch_mm": self.detector_pitch_mm,
            "image_width_px": self.image_width_px,
            "image_height_px": self.image_height_px,
            "pixel_size_mm": self.pixel_size_mm,
            "angular_range_rad": self.angular_range_rad,
        }
        for name, value in positive.items():
            if not value > 0:
                raise ValueError(f"{name} must be strictly positive, got {value}")
        if not self.source_to_detector_mm > self.source_to_isocenter_mm:
            raise ValueError(
                "source_to_detector_mm must exceed source_to_isocenter_mm "
                f"({self.source_to_detector_mm} <= {self.source_to_isocenter_mm})"
            )
        if self.image_half_diagonal_mm > self.fov_radius_mm:
            warnings.warn(
                "image diagonal (%.3f mm) exceeds the scan field of view radius "
                "(%.3f mm); corner pixels are not seen by every view and "
                "projections are truncated" % (self.image_half_diagonal_mm, self.fov_radius_mm),
                FieldOfViewWarning,
                stacklevel=2,
            )

    # -- derived quantities ------------------------------------------------

    @property
    def num_rays(self) -> int:
        return self.num_views * self.num_detectors

    @property
    def image_half_width_mm(self) -> float:
        return 0.5 * self.image_width_px * self.pixel_size_mm

    @property
    def image_half_height_mm(self) -> float:
        return 0.5 * self.image_height_px * self.pixel_size_mm

    @property
    def image_half_diagonal_mm(self) -> float:
        return math.hypot(self.image_half_width_mm, self.image_half_height_mm)

    @property
    def fov_radius_mm(self) -> float:
        """Radius of the circle covered by the fan from every view."""
        # smallest half-extent of the detector (offset shrinks one side)
        lo = abs((-0.5 * self.num_detectors - self.detector_offset_px) * self.detector_pitch_mm)
        hi = abs((0.5 * self.num_detectors - self.detector_offset_px) * self.detector_pitch_mm)
        half_extent = min(lo, hi)
        gamma = math.atan2(half_extent, self.source_to_detector_mm)
        return self.source_to_isocenter_mm * math.sin(gamma)

    def view_angles(self) -> np.ndarray:
        step = self.angular_range_rad / self.num_views
        return self.start_angle_rad + step * np.arange(self.num_views, dtype=np.float64)

    def detector_coords_mm(self) -> np.ndarray:
        """Signed tangential coordinate of each detector element center."""
        idx = np.arange(self.num_detectors, dtype=np.float64)
        center = 0.5 * (self.num_detectors - 1) + self.detector_offset_px
        return (idx - center) * self.detector_pitch_mm


# ---------------------------------------------------------------------------
# data stacks
# ---------------------------------------------------------------------------

def _as_f64(a, name: str, ndim: int) -> np.ndarray:
    out = np.asarray(a, dtype=np.float64)
    if out.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-D, got shape {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains non-finite entries")
    return out


@dataclass
class SinogramStack:
    """Per-energy-bin log-domain line integrals, shape (views, detectors, bins)."""

    data: np.ndarray
    geometry: FanBeamGeometry
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = _as_f64(self.data, "sinogram data", 3)
        g = self.geometry
        if self.data.shape[:2] != (g.num_views, g.num_detectors):
            raise ValueError(
                f"sinogram shape {self.data.shape[:2]} does not match geometry "
                f"({g.num_views}, {g.num_detectors})"
            )

    @property
    def num_bins(self) -> int:
        return self.data.shape[2]


@dataclass
class ChannelImageStack:
    """Reconstructed per-bin attenuation images in 1/cm, shape (J1, J2, bins)."""

    data: np.ndarray
    geometry: FanBeamGeometry

    def __post_init__(self):
        self.data = _as_f64(self.data, "channel image data", 3)
        g = self.geometry
        if self.data.shape[:2] != (g.image_height_px, g.image_width_px):
            raise ValueError(
                f"image shape {self.data.shape[:2]} does not match geometry "
                f"({g.image_height_px}, {g.image_width_px})"
            )

    @property
    def num_bins(self) -> int:
        return self.data.shape[2]


@dataclass
class MaterialMapStack:
    """Per-material volume-fraction images, shape (J1, J2, materials).

    ``constrained`` marks stacks whose pixels satisfy the box and
    volume-conservation constraints (each fraction in [0, 1], per-pixel sum
    at most 1). Intermediates produced by unconstrained solves carry
    ``constrained=False`` and may violate both.
    """

    data: np.ndarray
    material_names: tuple[str, ...]
    constrained: bool = False

    def __post_init__(self):
        self.data = _as_f64(self.data, "material map data", 3)
        self.material_names = tuple(self.material_names)
        if len(self.material_names) != self.data.shape[2]:
            raise ValueError(
                f"{len(self.material_names)} material names for "
                f"{self.data.shape[2]} map slices"
            )

    @property
    def num_materials(self) -> int:
        return self.data.shape[2]

    def slice(self, material: str) -> np.ndarray:
        return self.data[:, :, self.material_names.index(material)]


@dataclass
class AirMap:
    """Air volume fraction, pointwise 1 minus the material fraction sum."""

    data: np.ndarray

    def __post_init__(self):
        self.data = _as_f64(self.data, "air map data", 2)


@dataclass
class MixingMatrix:
    """Bin-averaged linear attenuation of each pure basis material, 1/cm.

    Shape (bins, materials); entry [n, v] is the attenuation a pixel made
    entirely of material v contributes to channel n. Must have full column
    rank; the condition number is computed at load time.
    """

    data: np.ndarray
    material_names: tuple[str, ...] | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError(f"mixing matrix must be 2-D, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("mixing matrix contains non-finite entries")
        if np.any(self.data < 0):
            raise ValueError("mixing matrix entries must be non-negative")
        n, v = self.data.shape
        if n < v:
            raise ValueError(f"need at least as many bins as materials ({n} < {v})")
        svals = np.linalg.svd(self.data, compute_uv=False)
        if svals[-1] <= svals[0] * np.finfo(np.float64).eps * max(n, v):
            raise ValueError("mixing matrix is rank deficient")
        self.condition_number = float(svals[0] / svals[-1])
        if self.material_names is not None:
            self.material_names = tuple(self.material_names)
            if len(self.material_names) != v:
                raise ValueError(
                    f"{len(self.material_names)} material names for {v} columns"
                )

    @property
    def num_bins(self) -> int:
        return self.data.shape[0]

    @property
    def num_materials(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class NoiseModel:
    """Beer-Lambert Poisson counting noise parameters.

    ``photons_per_ray`` is the unattenuated photon count per ray and bin.
    ``min_counts_clamp`` floors sampled counts before the log transform;
    ``clamp_log_nonnegative`` additionally floors the resulting line
    integrals at zero (on by default).
    """

    photons_per_ray: int
    rng_seed: int = 0
    min_counts_clamp: int = 1
    clamp_log_nonnegative: bool = True

    def __post_init__(self):
        if self.photons_per_ray < 1:
            raise ValueError("photons_per_ray must be at least 1")
        if self.min_counts_clamp < 1:
            raise ValueError("min_counts_clamp must be at least 1")


# ---------------------------------------------------------------------------
# tensor helpers
# ---------------------------------------------------------------------------

def tensor_mode3_unfold(t: np.ndarray) -> np.ndarray:
    """Mode-3 unfolding: (J1, J2, K) -> (K, J1*J2), row k = slice k row-major."""
    t = np.asarray(t)
    if t.ndim != 3:
        raise ValueError(f"expected a rank-3 tensor, got shape {t.shape}")
    j1, j2, k = t.shape
    return np.ascontiguousarray(t.transpose(2, 0, 1).reshape(k, j1 * j2))


def tensor_mode3_fold(m: np.ndarray, image_shape: tuple[int, int]) -> np.ndarray:
    """Inverse of :func:`tensor_mode3_unfold` for the given (J1, J2)."""
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {m.shape}")
    j1, j2 = image_shape
    k = m.shape[0]
    if m.shape[1] != j1 * j2:
        raise ValueError(f"cannot fold {m.shape} into image shape {image_shape}")
    return np.ascontiguousarray(m.reshape(k, j1, j2).transpose(1, 2, 0))


# ---------------------------------------------------------------------------
# deterministic random streams
# ---------------------------------------------------------------------------

def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic counter-based random stream for a 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=int(seed)))


def ray_rng(seed: int, ray_index: int) -> np.random.Generator:
    """Independent per-ray stream: Philox keyed by ``seed``, counter = ray index.

    Splitting by counter makes the draw for a given ray independent of how
    rays are batched or threaded, so noise synthesis is bit-reproducible.
    """
    return np.random.Generator(np.random.Philox(key=int(seed), counter=int(ray_index) << 64))


# ---------------------------------------------------------------------------
# tensor file format
# ---------------------------------------------------------------------------

def write_tensor(path, array: np.ndarray) -> None:
    """Write a 2-D or 3-D float64 tensor in the SMDK1 format.

    Format: one UTF-8 header line ``SMDK1 <dim0> <dim1> <dim2>\\n`` followed
    by the row-major little-endian float64 payload. 2-D arrays are stored
    with dim2 = 1. The representation is bit-exact.
    """
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, np.newaxis]
    if arr.ndim != 3:
        raise ValueError(f"only rank-2 or rank-3 tensors supported, got shape {arr.shape}")
    header = f"{TENSOR_MAGIC} {arr.shape[0]} {arr.shape[1]} {arr.shape[2]}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_tensor(path) -> np.ndarray:
    """Read an SMDK1 tensor file; always returns a (dim0, dim1, dim2) array."""
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.readline()
        try:
            text = header.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise TensorFormatError(f"{path}: header is not UTF-8") from exc
        parts = text.split()
        if len(parts) != 4 or parts[0] != TENSOR_MAGIC:
            raise TensorFormatError(
                f"{path}: expected header '{TENSOR_MAGIC} <dim0> <dim1> <dim2>', got {text!r}"
            )
        try:
            dims = tuple(int(p) for p in parts[1:])
        except ValueError as exc:
            raise TensorFormatError(f"{path}: non-integer dimensions in header {text!r}") from exc
        if any(d <= 0 for d in dims):
            raise TensorFormatError(f"{path}: dimensions must be positive, got {dims}")
        expected = 8 * dims[0] * dims[1] * dims[2]
        payload = fh.read()
        if len(payload) != expected:
            raise TensorFormatError(
                f"{path}: expected {expected} payload bytes for dims {dims}, "
                f"got {len(payload)}"
            )
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)


# ---------------------------------------------------------------------------
# convergence logging
# ---------------------------------------------------------------------------

@dataclass
class ConvergenceLog:
    """Per-iteration diagnostic rows with a fixed column header."""

    columns: tuple[str, ...]
    rows: list = field(default_factory=list)

    def append(self, *values) -> None:
        if len(values) != len(self.columns):
            raise ValueError(f"expected {len(self.columns)} values, got {len(values)}")
        self.rows.append(tuple(values))

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [row[i] for row in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns)
            for row in self.rows:
                writer.writerow([_csv_cell(v) for v in row])


def _csv_cell(value):
    # repr keeps full float precision and is byte-stable between runs
    if isinstance(value, float):
        return repr(value)
    return value
