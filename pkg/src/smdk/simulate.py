"""Phantom rasterization, channel mixing, projection synthesis and Poisson noise."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    ChannelImageStack,
    FanBeamGeometry,
    MaterialMapStack,
    MixingMatrix,
    NoiseModel,
    SinogramStack,
    tensor_mode3_fold,
    tensor_mode3_unfold,
    ray_rng,
)
from .projector import forward_project_stack


@dataclass(frozen=True)
class EllipseSpec:
    """One phantom ellipse in normalized image coordinates.

    Centers and semi-axes are fractions of the image half-extent, so the
    square [-1, 1] x [-1, 1] spans the full image. ``material_fractions``
    are volume fractions over the basis materials; they must lie in [0, 1]
    and sum to at most 1 (the remainder is air).
    """

    center_x: float
    center_y: float
    semi_axis_a: float
    semi_axis_b: float
    rotation_rad: float
    material_fractions: tuple[float, ...]

    def __post_init__(self):
        if not (-1.0 <= self.center_x <= 1.0 and -1.0 <= self.center_y <= 1.0):
            raise ValueError(f"ellipse center ({self.center_x}, {self.center_y}) outside [-1, 1]")
        if self.semi_axis_a <= 0 or self.semi_axis_b <= 0:
            raise ValueError("ellipse semi-axes must be strictly positive")
        fr = self.material_fractions
        if any(f < 0 or f > 1 for f in fr):
            raise ValueError(f"material fractions {fr} outside [0, 1]")
        if sum(fr) > 1.0 + 1e-12:
            raise ValueError(f"material fractions {fr} sum to more than 1")


@dataclass(frozen=True)
class PhantomSpec:
    """Ordered ellipse phantom; later ellipses paint over earlier ones."""

    material_names: tuple[str, ...]
    ellipses: tuple[EllipseSpec, ...]

    def __post_init__(self):
        if not self.material_names:
            raise ValueError("phantom needs at least one material name")
        for e in self.ellipses:
            if len(e.material_fractions) != len(self.material_names):
                raise ValueError(
                    f"ellipse fraction vector has {len(e.material_fractions)} entries "
                    f"for {len(self.material_names)} materials"
                )

    @classmethod
    def from_mapping(cls, raw: dict) -> "PhantomSpec":
        """Build from the YAML layout: material list plus per-ellipse mappings."""
        try:
            names = tuple(str(m) for m in raw["materials"])
            ellipses = []
            for item in raw["ellipses"]:
                fr = item.get("fractions", {})
                unknown = set(fr) - set(names)
                if unknown:
                    raise ValueError(f"fractions reference unknown materials {sorted(unknown)}")
                vec = tuple(float(fr.get(m, 0.0)) for m in names)
                ellipses.append(EllipseSpec(
                    center_x=float(item["center"][0]),
                    center_y=float(item["center"][1]),
                    semi_axis_a=float(item["axes"][0]),
                    semi_axis_b=float(item["axes"][1]),
                    rotation_rad=float(item.get("rotation_rad", 0.0)),
                    material_fractions=vec,
                ))
        except (KeyError, TypeError, IndexError) as exc:
            raise ValueError(f"malformed phantom spec: {exc!r}") from exc
        return cls(material_names=names, ellipses=tuple(ellipses))

    def to_mapping(self) -> dict:
        return {
            "materials": list(self.material_names),
            "ellipses": [
                {
                    "center": [e.center_x, e.center_y],
                    "axes": [e.semi_axis_a, e.semi_axis_b],
                    "rotation_rad": e.rotation_rad,
                    "fractions": {
                        m: f for m, f in zip(self.material_names, e.material_fractions) if f != 0.0
                    },
                }
                for e in self.ellipses
            ],
        }


@dataclass(frozen=True)
class SpectrumSpec:
    """Energy binning plus the bin-averaged mixing matrix."""

    bin_edges_keV: tuple[float, ...]
    mixing: MixingMatrix

    def __post_init__(self):
        edges = self.bin_edges_keV
        if len(edges) < 2:
            raise ValueError("need at least two bin edges")
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError(f"bin edges must be strictly increasing, got {edges}")
        if len(edges) - 1 != self.mixing.num_bins:
            raise ValueError(
                f"{len(edges) - 1} bins from edges but mixing matrix has "
                f"{self.mixing.num_bins} rows"
            )

    @property
    def num_bins(self) -> int:
        return len(self.bin_edges_keV) - 1


def make_phantom(spec: PhantomSpec, geom: FanBeamGeometry) -> MaterialMapStack:
    """Rasterize the ellipse phantom on the geometry's pixel grid.

    A pixel takes the fraction vector of the last ellipse containing its
    center; pixels in no ellipse are air (all-zero fractions).
    """
    height, width = geom.image_height_px, geom.image_width_px
    nmat = len(spec.material_names)
    xs = (np.arange(width) + 0.5) / width * 2.0 - 1.0
    ys = (np.arange(height) + 0.5) / height * 2.0 - 1.0
    gx, gy = np.meshgrid(xs, ys)
    data = np.zeros((height, width, nmat))
    for e in spec.ellipses:
        dx = gx - e.center_x
        dy = gy - e.center_y
        c, s = math.cos(e.rotation_rad), math.sin(e.rotation_rad)
        u = (dx * c + dy * s) / e.semi_axis_a
        w = (-dx * s + dy * c) / e.semi_axis_b
        inside = u * u + w * w <= 1.0
        data[inside] = np.asarray(e.material_fractions)
    return MaterialMapStack(data=data, material_names=spec.material_names, constrained=True)


def air_from_materials(materials: MaterialMapStack) -> np.ndarray:
    """Air fraction by volume conservation, clipped to [0, 1]."""
    return np.clip(1.0 - materials.data.sum(axis=2), 0.0, 1.0)


def mix_channels(materials: MaterialMapStack, mixing: MixingMatrix,
                 geom: FanBeamGeometry) -> ChannelImageStack:
    """Channel images as the mixing matrix applied to the unfolded material maps."""
    if materials.num_materials != mixing.num_materials:
        raise ValueError(
            f"{materials.num_materials} material maps but mixing matrix has "
            f"{mixing.num_materials} columns"
        )
    m3 = tensor_mode3_unfold(materials.data)
    h3 = mixing.data @ m3
    shape = (materials.data.shape[0], materials.data.shape[1])
    return ChannelImageStack(data=tensor_mode3_fold(h3, shape), geometry=geom)


def synthesize_sinograms(channels: ChannelImageStack,
                         geom: FanBeamGeometry | None = None) -> SinogramStack:
    """Noise-free per-bin forward projections of the channel images."""
    geom = geom or channels.geometry
    data = forward_project_stack(channels.data, geom)
    return SinogramStack(data=data, geometry=geom)


def apply_poisson_noise(sinograms: SinogramStack, noise: NoiseModel) -> SinogramStack:
    """Beer-Lambert Poisson counting noise on log-domain projections.

    Counts c = Poisson(I0 * exp(-p)) are drawn per ray and bin from a
    counter-based stream split by flat ray index (see :func:`smdk.core.ray_rng`),
    floored at ``min_counts_clamp``, and transformed back to p = ln(I0 / c).
    With ``clamp_log_nonnegative`` the output is floored at zero. Clamp event
    counts are recorded in the returned stack's ``meta``.
    """
    p = sinograms.data
    if np.any(p < 0):
        raise ValueError("negative line integrals in noise-free sinogram")
    i0 = float(noise.photons_per_ray)
    lam = i0 * np.exp(-p)
    nviews, ndet, nbins = p.shape
    counts = np.empty_like(lam)
    flat_lam = lam.reshape(nviews * ndet, nbins)
    flat_counts = counts.reshape(nviews * ndet, nbins)
    for ray in range(nviews * ndet):
        flat_counts[ray] = ray_rng(noise.rng_seed, ray).poisson(flat_lam[ray])
    low = counts < noise.min_counts_clamp
    count_clamps = int(np.count_nonzero(low))
    counts[low] = noise.min_counts_clamp
    noisy = np.log(i0 / counts)
    neg = noisy < 0.0
    log_clamps = int(np.count_nonzero(neg))
    if noise.clamp_log_nonnegative:
        noisy[neg] = 0.0
    else:
        log_clamps = 0
    meta = dict(sinograms.meta)
    meta.update(zero_count_clamps=count_clamps, negative_log_clamps=log_clamps)
    return SinogramStack(data=noisy, geometry=sinograms.geometry, meta=meta)
