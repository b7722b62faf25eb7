"""Image-domain basis-material decomposition.

Direct inversion (DI) solves the per-pixel least-squares system given by the
mixing matrix. The regularized variant (TVMD) alternates a closed-form
proximal quadratic step, Euclidean projection onto the capped simplex implied
by volume conservation, and per-material TV denoising.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    AirMap,
    ChannelImageStack,
    ConvergenceLog,
    MaterialMapStack,
    MixingMatrix,
    tensor_mode3_fold,
    tensor_mode3_unfold,
)
from .recon import tv_denoise

DI = "DI"
TVMD = "TVMD"
DECOMP_MODES = (DI, TVMD)


@dataclass
class DecompParams:
    """Iteration controls for :func:`decompose`.

    ``coupling`` is the proximal weight binding the quadratic data step to the
    TV-denoised feedback iterate; ``tv_weight_per_material`` the per-material
    denoising weights (``None`` means all zeros). ``project_di`` additionally
    projects the plain DI output onto the constraint set (off by default; the
    unprojected solve is the conventional DI baseline).
    """

    outer_iterations: int = 30
    coupling: float = 1e-3
    tv_weight_per_material: tuple[float, ...] | None = None
    tv_inner_iterations: int = 20
    tv_step: float = 0.1
    tv_epsilon: float = 1e-8
    enforce_constraints: bool = True
    project_di: bool = False

    def __post_init__(self):
        if self.outer_iterations < 1:
            raise ValueError("outer_iterations must be at least 1")
        if self.coupling <= 0:
            raise ValueError("coupling must be strictly positive")
        if self.tv_inner_iterations < 1:
            raise ValueError("tv_inner_iterations must be at least 1")
        if self.tv_step <= 0:
            raise ValueError("tv_step must be strictly positive")
        if self.tv_epsilon <= 0:
            raise ValueError("tv_epsilon must be strictly positive")
        if self.tv_weight_per_material is not None:
            self.tv_weight_per_material = tuple(float(w) for w in self.tv_weight_per_material)
            if any(w < 0 for w in self.tv_weight_per_material):
                raise ValueError("tv weights must be non-negative")

    def weights_for(self, num_materials: int) -> tuple[float, ...]:
        if self.tv_weight_per_material is None:
            return (0.0,) * num_materials
        if len(self.tv_weight_per_material) != num_materials:
            raise ValueError(
                f"{len(self.tv_weight_per_material)} TV weights for "
                f"{num_materials} materials"
            )
        return self.tv_weight_per_material


def _material_names(mixing: MixingMatrix) -> tuple[str, ...]:
    if mixing.material_names is not None:
        return mixing.material_names
    return tuple(f"material_{v}" for v in range(mixing.num_materials))


def direct_inversion(channels: ChannelImageStack, mixing: MixingMatrix) -> MaterialMapStack:
    """Unconstrained per-pixel least-squares decomposition (the DI baseline)."""
    if channels.num_bins != mixing.num_bins:
        raise ValueError(
            f"{channels.num_bins} channel images but mixing matrix has "
            f"{mixing.num_bins} rows"
        )
    b = mixing.data
    h3 = tensor_mode3_unfold(channels.data)
    m3 = np.linalg.solve(b.T @ b, b.T @ h3)
    data = tensor_mode3_fold(m3, channels.data.shape[:2])
    return MaterialMapStack(data=data, material_names=_material_names(mixing),
                            constrained=False)


def quad_step(channels: ChannelImageStack, mixing: MixingMatrix,
              feedback: MaterialMapStack, coupling: float) -> MaterialMapStack:
    """Closed-form minimizer of the coupled quadratic decomposition step.

    Solves (B^T B + delta I) M = B^T H + delta W per pixel; the system is
    factored once and applied to all pixels. Output is unconstrained.
    """
    if coupling <= 0:
        raise ValueError("coupling must be strictly positive")
    b = mixing.data
    h3 = tensor_mode3_unfold(channels.data)
    w3 = tensor_mode3_unfold(feedback.data)
    lhs = b.T @ b + coupling * np.eye(b.shape[1])
    m3 = np.linalg.solve(lhs, b.T @ h3 + coupling * w3)
    data = tensor_mode3_fold(m3, channels.data.shape[:2])
    return MaterialMapStack(data=data, material_names=feedback.material_names,
                            constrained=False)


def _project_capped_simplex(x: np.ndarray) -> np.ndarray:
    """Euclidean projection of row vectors onto {m in [0,1]^V : sum m <= 1}.

    Rows whose box projection already satisfies the sum constraint keep it
    (the box projection is then optimal); the rest are projected onto the
    slice {m in [0,1]^V : sum m = 1} by the exact piecewise-linear threshold
    m_i = clip(x_i - theta, 0, 1).
    """
    clipped = np.clip(x, 0.0, 1.0)
    over = clipped.sum(axis=1) > 1.0
    if not np.any(over):
        return clipped
    y = x[over]
    # threshold candidates: where a coordinate enters the [0, 1] clamp
    breakpoints = np.sort(np.concatenate([y, y - 1.0], axis=1), axis=1)
    fvals = np.clip(y[:, np.newaxis, :] - breakpoints[:, :, np.newaxis], 0.0, 1.0).sum(axis=2)
    # fvals is non-increasing along the breakpoint axis, from V down to 0;
    # locate the segment bracketing sum == 1 and interpolate exactly
    j = np.maximum((fvals >= 1.0).sum(axis=1) - 1, 0)
    rows = np.arange(y.shape[0])
    f_lo = fvals[rows, j]
    f_hi = fvals[rows, j + 1]
    t_lo = breakpoints[rows, j]
    t_hi = breakpoints[rows, j + 1]
    slope_span = f_lo - f_hi
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(slope_span > 0, (f_lo - 1.0) / np.where(slope_span > 0, slope_span, 1.0), 0.0)
    theta = t_lo + frac * (t_hi - t_lo)
    clipped[over] = np.clip(y - theta[:, np.newaxis], 0.0, 1.0)
    return clipped


def project_constraints(maps: MaterialMapStack) -> tuple[MaterialMapStack, AirMap]:
    """Pixelwise Euclidean projection onto the volume-conservation constraints.

    Every fraction lands in [0, 1] with per-pixel sums at most 1; the air map
    is the conserved remainder. The projection is idempotent and non-expansive.
    """
    j1, j2, v = maps.data.shape
    projected = _project_capped_simplex(maps.data.reshape(j1 * j2, v)).reshape(j1, j2, v)
    out = MaterialMapStack(data=projected, material_names=maps.material_names,
                           constrained=True)
    air = AirMap(data=np.clip(1.0 - projected.sum(axis=2), 0.0, 1.0))
    return out, air


def decomposition_fidelity(maps: MaterialMapStack, channels: ChannelImageStack,
                           mixing: MixingMatrix) -> float:
    """Data fidelity 0.5 * ||B M - H||_F^2 of a candidate decomposition."""
    resid = mixing.data @ tensor_mode3_unfold(maps.data) - tensor_mode3_unfold(channels.data)
    return 0.5 * float(np.sum(resid * resid))


def decompose(channels: ChannelImageStack, mixing: MixingMatrix,
              params: DecompParams, mode: str,
              reference: MaterialMapStack | None = None,
              ) -> tuple[MaterialMapStack, AirMap, ConvergenceLog]:
    """Decompose channel images into material maps with DI or TVMD.

    TVMD starts from the constraint-projected DI solution and alternates the
    proximal quadratic step (projected onto the constraints), then per-material
    TV denoising of the feedback iterate. The log records the data fidelity of
    the constrained iterate per outer iteration, plus per-material RMSE columns
    when a reference is supplied.
    """
    if mode not in DECOMP_MODES:
        raise ValueError(f"unknown decomposition mode {mode!r}; expected one of {DECOMP_MODES}")
    names = _material_names(mixing)
    columns = ["iteration", "fidelity"]
    if reference is not None:
        columns += [f"rmse_{m}" for m in names]
    log = ConvergenceLog(columns=tuple(columns))

    def log_row(iteration: int, maps: MaterialMapStack):
        row = [iteration, decomposition_fidelity(maps, channels, mixing)]
        if reference is not None:
            for v in range(maps.num_materials):
                err = maps.data[:, :, v] - reference.data[:, :, v]
                row.append(float(np.sqrt(np.mean(err * err))))
        log.append(*row)

    if mode == DI:
        maps = direct_inversion(channels, mixing)
        if params.enforce_constraints and params.project_di:
            maps, air = project_constraints(maps)
        else:
            air = AirMap(data=np.clip(1.0 - maps.data.sum(axis=2), 0.0, 1.0))
        log_row(1, maps)
        return maps, air, log

    weights = params.weights_for(mixing.num_materials)
    maps, air = project_constraints(direct_inversion(channels, mixing))
    feedback = maps
    for it in range(1, params.outer_iterations + 1):
        step = quad_step(channels, mixing, feedback, params.coupling)
        if params.enforce_constraints:
            maps, air = project_constraints(step)
        else:
            maps = step
            air = AirMap(data=np.clip(1.0 - maps.data.sum(axis=2), 0.0, 1.0))
        denoised = maps.data.copy()
        for v in range(maps.num_materials):
            if weights[v] > 0.0:
                denoised[:, :, v] = tv_denoise(
                    maps.data[:, :, v], weights[v], params.tv_inner_iterations,
                    params.tv_step, params.tv_epsilon)
        feedback = MaterialMapStack(data=denoised, material_names=names,
                                    constrained=False)
        log_row(it, maps)
    return maps, air, log
