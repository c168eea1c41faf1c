"""Straightened multiplanar reformation along a vessel centerline."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateCenterline, InvalidValue, StepTooLarge
from .volio import Centerline, Volume3D

DEFAULT_SLICE_THICKNESS_MM = 0.5
DEFAULT_IN_PLANE_SPACING_MM = 0.3
DEFAULT_D = 21


@dataclass(frozen=True, eq=False)
class FrameField:
    """Per-point orthonormal frames: tangent ``t``, normal ``u``, binormal ``v``.

    Arrays have shape ``(n, 3)`` in ``(z, y, x)`` order.
    """

    t: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def __len__(self):
        return self.t.shape[0]

    def matrices(self):
        """Frames stacked as ``(n, 3, 3)`` with rows ``t, u, v``."""
        return np.stack([self.t, self.u, self.v], axis=1)


def resampled_count(total_mm, step_mm):
    """Number of samples at ``0, step, ...`` reaching the endpoint within half a step."""
    return int(math.floor(total_mm / step_mm + 0.5)) + 1


def resample_centerline(c, step_mm):
    """Uniform arc-length resampling of ``c`` at ``step_mm``.

    The last sample may overshoot the end by at most half a step; it is
    extrapolated along the final segment so the spacing stays uniform.
    """
    if not step_mm > 0:
        raise InvalidValue(f"step must be positive, got {step_mm}")
    total = c.length_mm
    if step_mm > total * (1 + 1e-12):
        raise StepTooLarge(f"step {step_mm} mm exceeds centerline length {total} mm")
    n = resampled_count(total, step_mm)
    s = np.arange(n) * step_mm
    arc = c.arc_length
    seg = np.clip(np.searchsorted(arc, s, side="right") - 1, 0, len(arc) - 2)
    frac = (s - arc[seg]) / (arc[seg + 1] - arc[seg])
    p0 = c.points_mm[seg]
    p1 = c.points_mm[seg + 1]
    return Centerline(p0 + frac[:, None] * (p1 - p0))


def _unit(v, what):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if (n <= 1e-12).any():
        raise DegenerateCenterline(f"zero-length {what}")
    return v / n


def compute_frames(c):
    """Rotation-minimizing frames by the double-reflection method.

    Tangents come from central differences (one-sided at the ends). The
    initial normal is the coordinate axis least aligned with the first
    tangent, orthogonalized against it.
    """
    p = c.points_mm
    n = p.shape[0]
    d = np.empty_like(p)
    d[0] = p[1] - p[0]
    d[-1] = p[-1] - p[-2]
    if n > 2:
        d[1:-1] = p[2:] - p[:-2]
    t = _unit(d, "tangent")

    u = np.empty_like(p)
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(t[0])))] = 1.0
    u0 = axis - np.dot(axis, t[0]) * t[0]
    u[0] = u0 / np.linalg.norm(u0)

    for i in range(n - 1):
        v1 = p[i + 1] - p[i]
        c1 = np.dot(v1, v1)
        r_l = u[i] - (2.0 / c1) * np.dot(v1, u[i]) * v1
        t_l = t[i] - (2.0 / c1) * np.dot(v1, t[i]) * v1
        v2 = t[i + 1] - t_l
        c2 = np.dot(v2, v2)
        r = r_l if c2 < 1e-30 else r_l - (2.0 / c2) * np.dot(v2, r_l) * v2
        # re-orthogonalize to keep the triple orthonormal to ~1e-15
        r = r - np.dot(r, t[i + 1]) * t[i + 1]
        u[i + 1] = r / np.linalg.norm(r)
    v = np.cross(t, u)
    return FrameField(t, u, v)


def trilinear_sample_many(vol, pts_mm, fill_value=0.0):
    """Trilinear interpolation at an ``(..., 3)`` array of world points.

    Interpolation uses voxel-center coordinates; points outside the hull of
    voxel centers get ``fill_value``.
    """
    pts = np.asarray(pts_mm, dtype=np.float64)
    shape = pts.shape[:-1]
    idx = vol.world_to_index(pts.reshape(-1, 3))
    dims = np.asarray(vol.dims)
    tol = 1e-9
    inside = np.all((idx >= -tol) & (idx <= dims - 1 + tol), axis=1)
    idx = np.clip(idx, 0, dims - 1)
    i0 = np.minimum(np.floor(idx).astype(np.int64), np.maximum(dims - 2, 0))
    f = idx - i0
    i1 = np.minimum(i0 + 1, dims - 1)
    data = vol.data.astype(np.float64, copy=False)
    z0, y0, x0 = i0.T
    z1, y1, x1 = i1.T
    fz, fy, fx = f.T
    c00 = data[z0, y0, x0] * (1 - fx) + data[z0, y0, x1] * fx
    c01 = data[z0, y1, x0] * (1 - fx) + data[z0, y1, x1] * fx
    c10 = data[z1, y0, x0] * (1 - fx) + data[z1, y0, x1] * fx
    c11 = data[z1, y1, x0] * (1 - fx) + data[z1, y1, x1] * fx
    c0 = c00 * (1 - fy) + c01 * fy
    c1 = c10 * (1 - fy) + c11 * fy
    out = c0 * (1 - fz) + c1 * fz
    out[~inside] = fill_value
    return out.reshape(shape)


def trilinear_sample(vol, p_mm, fill_value=0.0):
    return float(trilinear_sample_many(vol, np.asarray(p_mm, dtype=np.float64)[None], fill_value)[0])


def mpr_sample_points(c, frames, d, in_plane_spacing_mm):
    """World coordinates of every MPR pixel, shape ``(L, d, d, 3)``."""
    offs = (np.arange(d) - (d - 1) / 2.0) * in_plane_spacing_mm
    return (
        c.points_mm[:, None, None, :]
        + offs[None, :, None, None] * frames.u[:, None, None, :]
        + offs[None, None, :, None] * frames.v[:, None, None, :]
    )


def reconstruct_mpr(
    vol,
    c,
    slice_thickness_mm=DEFAULT_SLICE_THICKNESS_MM,
    in_plane_spacing_mm=DEFAULT_IN_PLANE_SPACING_MM,
    d=DEFAULT_D,
    fill_value=0.0,
):
    """Straightened MPR volume of shape ``(L, d, d)``, one slice per resampled point."""
    if d < 1 or d % 2 == 0:
        raise InvalidValue(f"cross-section size d must be a positive odd integer, got {d}")
    if not in_plane_spacing_mm > 0:
        raise InvalidValue(f"in-plane spacing must be positive, got {in_plane_spacing_mm}")
    rc = resample_centerline(c, slice_thickness_mm)
    frames = compute_frames(rc)
    pts = mpr_sample_points(rc, frames, d, in_plane_spacing_mm)
    data = trilinear_sample_many(vol, pts, fill_value)
    return Volume3D(data, (slice_thickness_mm, in_plane_spacing_mm, in_plane_spacing_mm))
