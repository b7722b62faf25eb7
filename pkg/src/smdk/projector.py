"""Matched fan-beam forward/back projector realized by exact ray tracing.

One ray per (view, detector) pair, traced through the pixel grid with exact
intersection lengths, gives one row of the system matrix. The back projector
replays the identical traversal, so the pair is an exact transpose up to
floating-point summation order. All kernels run sequentially in a fixed ray
order; outputs are bit-identical regardless of thread count.

Image values are attenuation in 1/cm; intersection lengths are traced in mm
and converted once, so projections come out as dimensionless line integrals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .core import FanBeamGeometry

MM_TO_CM = 0.1

# tolerance on the ray parameter (ray spans alpha in [0, 1])
_ALPHA_EPS = 1e-12


@dataclass
class RayIntersectionList:
    """Pixel intersections of one ray: one row of the system matrix.

    ``entries`` holds (flat pixel index, intersection length in mm) pairs
    sorted by strictly increasing pixel index; lengths are strictly positive.
    """

    entries: list[tuple[int, float]]
    total_length_mm: float


def _view_vectors(geom: FanBeamGeometry):
    """Per-view source position, detector center and tangential unit vector."""
    theta = geom.view_angles()
    c, s = np.cos(theta), np.sin(theta)
    src = np.stack([geom.source_to_isocenter_mm * c,
                    geom.source_to_isocenter_mm * s], axis=1)
    det_dist = geom.source_to_detector_mm - geom.source_to_isocenter_mm
    det_center = np.stack([-det_dist * c, -det_dist * s], axis=1)
    tangent = np.stack([-s, c], axis=1)
    return src, det_center, tangent


def _grid_params(geom: FanBeamGeometry):
    return (-geom.image_half_width_mm, -geom.image_half_height_mm,
            geom.pixel_size_mm, geom.image_width_px, geom.image_height_px)


@njit(cache=True)
def _ray_trace(sx, sy, ex, ey, x0, y0, px, width, height, out_idx, out_len):
    """Trace the segment (sx, sy) -> (ex, ey) through the grid.

    Writes (flat index, length in mm) pairs in traversal order and returns
    the entry count. Zero-length corner grazes are skipped.
    """
    dx = ex - sx
    dy = ey - sy
    length = np.sqrt(dx * dx + dy * dy)
    if length <= 0.0:
        return 0

    a0 = 0.0
    a1 = 1.0
    if dx != 0.0:
        t1 = (x0 - sx) / dx
        t2 = (x0 + width * px - sx) / dx
        lo = min(t1, t2)
        hi = max(t1, t2)
        if lo > a0:
            a0 = lo
        if hi < a1:
            a1 = hi
    elif sx <= x0 or sx >= x0 + width * px:
        return 0
    if dy != 0.0:
        t1 = (y0 - sy) / dy
        t2 = (y0 + height * px - sy) / dy
        lo = min(t1, t2)
        hi = max(t1, t2)
        if lo > a0:
            a0 = lo
        if hi < a1:
            a1 = hi
    elif sy <= y0 or sy >= y0 + height * px:
        return 0
    if a0 >= a1:
        return 0

    # parameter of the next x/y grid-line crossing past the entry point
    if dx > 0.0:
        k = np.floor((sx + a0 * dx - x0) / px) + 1.0
        ax = (x0 + k * px - sx) / dx
        dax = px / dx
    elif dx < 0.0:
        k = np.ceil((sx + a0 * dx - x0) / px) - 1.0
        ax = (x0 + k * px - sx) / dx
        dax = -px / dx
    else:
        ax = 1e308
        dax = 0.0
    if dy > 0.0:
        k = np.floor((sy + a0 * dy - y0) / px) + 1.0
        ay = (y0 + k * px - sy) / dy
        day = px / dy
    elif dy < 0.0:
        k = np.ceil((sy + a0 * dy - y0) / px) - 1.0
        ay = (y0 + k * px - sy) / dy
        day = -px / dy
    else:
        ay = 1e308
        day = 0.0

    count = 0
    t = a0
    while t < a1 - _ALPHA_EPS:
        tn = ax if ax < ay else ay
        if tn > a1:
            tn = a1
        if tn > t + _ALPHA_EPS:
            mid = 0.5 * (t + tn)
            col = int((sx + mid * dx - x0) / px)
            row = int((sy + mid * dy - y0) / px)
            if 0 <= col < width and 0 <= row < height:
                out_idx[count] = row * width + col
                out_len[count] = (tn - t) * length
                count += 1
        t = tn
        if ax <= tn:
            ax += dax
        if ay <= tn:
            ay += day
    return count


@njit(cache=True)
def _forward_kernel(img, src, det_center, tangent, det_u, x0, y0, px, out):
    """out[v, d, n] = sum over ray pixels of img[r, c, n] * length_cm."""
    height, width, nbins = img.shape
    nviews = src.shape[0]
    ndet = det_u.shape[0]
    acc = np.empty(nbins, dtype=np.float64)
    for v in range(nviews):
        sx = src[v, 0]
        sy = src[v, 1]
        for d in range(ndet):
            ex = det_center[v, 0] + det_u[d] * tangent[v, 0]
            ey = det_center[v, 1] + det_u[d] * tangent[v, 1]
            for n in range(nbins):
                acc[n] = 0.0

            dx = ex - sx
            dy = ey - sy
            length = np.sqrt(dx * dx + dy * dy)
            a0 = 0.0
            a1 = 1.0
            inside = True
            if dx != 0.0:
                t1 = (x0 - sx) / dx
                t2 = (x0 + width * px - sx) / dx
                lo = min(t1, t2)
                hi = max(t1, t2)
                if lo > a0:
                    a0 = lo
                if hi < a1:
                    a1 = hi
            elif sx <= x0 or sx >= x0 + width * px:
                inside = False
            if dy != 0.0:
                t1 = (y0 - sy) / dy
                t2 = (y0 + height * px - sy) / dy
                lo = min(t1, t2)
                hi = max(t1, t2)
                if lo > a0:
                    a0 = lo
                if hi < a1:
                    a1 = hi
            elif sy <= y0 or sy >= y0 + height * px:
                inside = False
            if inside and a0 < a1 and length > 0.0:
                if dx > 0.0:
                    k = np.floor((sx + a0 * dx - x0) / px) + 1.0
                    ax = (x0 + k * px - sx) / dx
                    dax = px / dx
                elif dx < 0.0:
                    k = np.ceil((sx + a0 * dx - x0) / px) - 1.0
                    ax = (x0 + k * px - sx) / dx
                    dax = -px / dx
                else:
                    ax = 1e308
                    dax = 0.0
                if dy > 0.0:
                    k = np.floor((sy + a0 * dy - y0) / px) + 1.0
                    ay = (y0 + k * px - sy) / dy
                    day = px / dy
                elif dy < 0.0:
                    k = np.ceil((sy + a0 * dy - y0) / px) - 1.0
                    ay = (y0 + k * px - sy) / dy
                    day = -px / dy
                else:
                    ay = 1e308
                    day = 0.0
                t = a0
                while t < a1 - _ALPHA_EPS:
                    tn = ax if ax < ay else ay
                    if tn > a1:
                        tn = a1
                    if tn > t + _ALPHA_EPS:
                        mid = 0.5 * (t + tn)
                        col = int((sx + mid * dx - x0) / px)
                        row = int((sy + mid * dy - y0) / px)
                        if 0 <= col < width and 0 <= row < height:
                            seg_cm = (tn - t) * length * MM_TO_CM
                            for n in range(nbins):
                                acc[n] += img[row, col, n] * seg_cm
                    t = tn
                    if ax <= tn:
                        ax += dax
                    if ay <= tn:
                        ay += day
            for n in range(nbins):
                out[v, d, n] = acc[n]


@njit(cache=True)
def _back_kernel(sino, src, det_center, tangent, det_u, x0, y0, px, out):
    """out[r, c, n] += sino[v, d, n] * length_cm over every ray; exact transpose."""
    height, width, nbins = out.shape
    nviews = src.shape[0]
    ndet = det_u.shape[0]
    for v in range(nviews):
        sx = src[v, 0]
        sy = src[v, 1]
        for d in range(ndet):
            ex = det_center[v, 0] + det_u[d] * tangent[v, 0]
            ey = det_center[v, 1] + det_u[d] * tangent[v, 1]

            dx = ex - sx
            dy = ey - sy
            length = np.sqrt(dx * dx + dy * dy)
            a0 = 0.0
            a1 = 1.0
            inside = True
            if dx != 0.0:
                t1 = (x0 - sx) / dx
                t2 = (x0 + width * px - sx) / dx
                lo = min(t1, t2)
                hi = max(t1, t2)
                if lo > a0:
                    a0 = lo
                if hi < a1:
                    a1 = hi
            elif sx <= x0 or sx >= x0 + width * px:
                inside = False
            if dy != 0.0:
                t1 = (y0 - sy) / dy
                t2 = (y0 + height * px - sy) / dy
                lo = min(t1, t2)
                hi = max(t1, t2)
                if lo > a0:
                    a0 = lo
                if hi < a1:
                    a1 = hi
            elif sy <= y0 or sy >= y0 + height * px:
                inside = False
            if not inside or a0 >= a1 or length <= 0.0:
                continue
            if dx > 0.0:
                k = np.floor((sx + a0 * dx - x0) / px) + 1.0
                ax = (x0 + k * px - sx) / dx
                dax = px / dx
            elif dx < 0.0:
                k = np.ceil((sx + a0 * dx - x0) / px) - 1.0
                ax = (x0 + k * px - sx) / dx
                dax = -px / dx
            else:
                ax = 1e308
                dax = 0.0
            if dy > 0.0:
                k = np.floor((sy + a0 * dy - y0) / px) + 1.0
                ay = (y0 + k * px - sy) / dy
                day = px / dy
            elif dy < 0.0:
                k = np.ceil((sy + a0 * dy - y0) / px) - 1.0
                ay = (y0 + k * px - sy) / dy
                day = -px / dy
            else:
                ay = 1e308
                day = 0.0
            t = a0
            while t < a1 - _ALPHA_EPS:
                tn = ax if ax < ay else ay
                if tn > a1:
                    tn = a1
                if tn > t + _ALPHA_EPS:
                    mid = 0.5 * (t + tn)
                    col = int((sx + mid * dx - x0) / px)
                    row = int((sy + mid * dy - y0) / px)
                    if 0 <= col < width and 0 <= row < height:
                        seg_cm = (tn - t) * length * MM_TO_CM
                        for n in range(nbins):
                            out[row, col, n] += sino[v, d, n] * seg_cm
                t = tn
                if ax <= tn:
                    ax += dax
                if ay <= tn:
                    ay += day


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def trace_ray(geom: FanBeamGeometry, view: int, detector: int) -> RayIntersectionList:
    """Exact pixel/ray intersection lengths (mm) for one (view, detector) ray."""
    if not 0 <= view < geom.num_views:
        raise IndexError(f"view {view} out of range [0, {geom.num_views})")
    if not 0 <= detector < geom.num_detectors:
        raise IndexError(f"detector {detector} out of range [0, {geom.num_detectors})")
    src, det_center, tangent = _view_vectors(geom)
    det_u = geom.detector_coords_mm()
    x0, y0, px, width, height = _grid_params(geom)
    cap = width + height + 4
    idx = np.empty(cap, dtype=np.int64)
    lengths = np.empty(cap, dtype=np.float64)
    ex = det_center[view, 0] + det_u[detector] * tangent[view, 0]
    ey = det_center[view, 1] + det_u[detector] * tangent[view, 1]
    count = _ray_trace(src[view, 0], src[view, 1], ex, ey,
                       x0, y0, px, width, height, idx, lengths)
    order = np.argsort(idx[:count], kind="stable")
    entries = [(int(idx[i]), float(lengths[i])) for i in order]
    return RayIntersectionList(entries=entries,
                               total_length_mm=float(np.sum(lengths[:count])))


def forward_project_stack(images: np.ndarray, geom: FanBeamGeometry) -> np.ndarray:
    """Project an (J1, J2, N) image stack to an (views, detectors, N) sinogram stack."""
    images = np.ascontiguousarray(images, dtype=np.float64)
    if images.ndim != 3:
        raise ValueError(f"expected (J1, J2, N) stack, got shape {images.shape}")
    if images.shape[:2] != (geom.image_height_px, geom.image_width_px):
        raise ValueError(
            f"image shape {images.shape[:2]} does not match geometry "
            f"({geom.image_height_px}, {geom.image_width_px})"
        )
    src, det_center, tangent = _view_vectors(geom)
    det_u = geom.detector_coords_mm()
    x0, y0, px, width, height = _grid_params(geom)
    out = np.zeros((geom.num_views, geom.num_detectors, images.shape[2]))
    _forward_kernel(images, src, det_center, tangent, det_u, x0, y0, px, out)
    return out


def back_project_stack(sinos: np.ndarray, geom: FanBeamGeometry) -> np.ndarray:
    """Exact transpose of :func:`forward_project_stack`."""
    sinos = np.ascontiguousarray(sinos, dtype=np.float64)
    if sinos.ndim != 3:
        raise ValueError(f"expected (views, detectors, N) stack, got shape {sinos.shape}")
    if sinos.shape[:2] != (geom.num_views, geom.num_detectors):
        raise ValueError(
            f"sinogram shape {sinos.shape[:2]} does not match geometry "
            f"({geom.num_views}, {geom.num_detectors})"
        )
    src, det_center, tangent = _view_vectors(geom)
    det_u = geom.detector_coords_mm()
    x0, y0, px, width, height = _grid_params(geom)
    out = np.zeros((geom.image_height_px, geom.image_width_px, sinos.shape[2]))
    _back_kernel(sinos, src, det_center, tangent, det_u, x0, y0, px, out)
    return out


def forward_project(image: np.ndarray, geom: FanBeamGeometry) -> np.ndarray:
    """Project a single (J1, J2) image to a (views, detectors) sinogram."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {image.shape}")
    return forward_project_stack(image[:, :, np.newaxis], geom)[:, :, 0]


def back_project(sino: np.ndarray, geom: FanBeamGeometry) -> np.ndarray:
    """Back-project a single (views, detectors) sinogram to a (J1, J2) image."""
    sino = np.asarray(sino, dtype=np.float64)
    if sino.ndim != 2:
        raise ValueError(f"expected a 2-D sinogram, got shape {sino.shape}")
    return back_project_stack(sino[:, :, np.newaxis], geom)[:, :, 0]


def sart_normalizers(geom: FanBeamGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Row and column sums of the system matrix (in cm).

    row_sums[v, d] is the projection of the all-ones image (total intersection
    length of the ray); col_sums[r, c] the back projection of the all-ones
    sinogram. Zeros mark rays that miss the grid and pixels missed by every
    ray; SART skips both.
    """
    ones_img = np.ones((geom.image_height_px, geom.image_width_px))
    ones_sino = np.ones((geom.num_views, geom.num_detectors))
    row_sums = forward_project(ones_img, geom)
    col_sums = back_project(ones_sino, geom)
    return row_sums, col_sums
