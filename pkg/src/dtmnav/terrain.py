"""Digital terrain map storage, queries and synthetic terrain.

Heights are stored row-major as ``heights[iy, ix]`` with node ``(ix, iy)`` at
world coordinates ``(origin_x + ix * spacing, origin_y + iy * spacing)``.
The world frame is right-handed with z up.

A non-periodic grid covers ``[origin, origin + (n - 1) * spacing]`` on each
axis.  A periodic grid repeats with period ``n * spacing`` and accepts any
query coordinate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "DtmGrid",
    "GroundPoint",
    "OutsideFootprintError",
    "RayMissError",
    "build_grid",
    "sample_height",
    "surface_normal",
    "ray_intersect",
    "intersect_rays",
    "synth_terrain",
    "resample_grid",
    "height_error_std",
    "save_grid",
    "load_grid",
]

# Slack on footprint edges, in units of grid spacing.
_EDGE_EPS = 1e-9
_REFINE_MAX = 100
_REFINE_TOL = 1e-9  # meters of height residual


class OutsideFootprintError(ValueError):
    """A query fell outside a non-periodic grid."""


class RayMissError(ValueError):
    """A ray left the grid footprint before reaching the terrain."""


@dataclass(frozen=True)
class DtmGrid:
    heights: np.ndarray
    spacing: float
    origin: tuple[float, float] = (0.0, 0.0)
    periodic: bool = False

    def __post_init__(self):
        h = np.array(self.heights, dtype=float)
        if h.ndim != 2 or h.shape[0] < 2 or h.shape[1] < 2:
            raise ValueError(f"heights must be a 2-D array of at least 2x2 samples, got shape {h.shape}")
        if not np.all(np.isfinite(h)):
            raise ValueError("heights must be finite")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        h.setflags(write=False)
        object.__setattr__(self, "heights", h)
        object.__setattr__(self, "spacing", float(self.spacing))
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "periodic", bool(self.periodic))

    @property
    def shape(self) -> tuple[int, int]:
        return self.heights.shape

    @property
    def extent(self) -> tuple[float, float]:
        """Side lengths (x, y) of the covered footprint, or of one period."""
        ny, nx = self.shape
        if self.periodic:
            return nx * self.spacing, ny * self.spacing
        return (nx - 1) * self.spacing, (ny - 1) * self.spacing

    @property
    def footprint(self) -> tuple[float, float, float, float]:
        """(xmin, xmax, ymin, ymax) of the covered area (one period if periodic)."""
        ex, ey = self.extent
        ox, oy = self.origin
        return ox, ox + ex, oy, oy + ey

    @property
    def min_height(self) -> float:
        return float(self.heights.min())

    @property
    def max_height(self) -> float:
        return float(self.heights.max())

    def contains(self, x, y) -> np.ndarray:
        """Boolean mask of query points the grid can answer."""
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        if self.periodic:
            return np.ones(x.shape, dtype=bool)
        xmin, xmax, ymin, ymax = self.footprint
        eps = _EDGE_EPS * self.spacing
        return (x >= xmin - eps) & (x <= xmax + eps) & (y >= ymin - eps) & (y <= ymax + eps)

    def _cells(self, x, y):
        """Cell indices and in-cell fractions; NaN fractions mark outside points."""
        ny, nx = self.shape
        u = (np.asarray(x, float) - self.origin[0]) / self.spacing
        v = (np.asarray(y, float) - self.origin[1]) / self.spacing
        u, v = np.broadcast_arrays(u, v)
        if self.periodic:
            i0 = np.floor(u)
            j0 = np.floor(v)
            fu = u - i0
            fv = v - j0
            i0 = np.mod(i0, nx).astype(int)
            j0 = np.mod(j0, ny).astype(int)
            i1 = (i0 + 1) % nx
            j1 = (j0 + 1) % ny
            return i0, i1, j0, j1, fu, fv
        inside = (u >= -_EDGE_EPS) & (u <= nx - 1 + _EDGE_EPS) & (v >= -_EDGE_EPS) & (v <= ny - 1 + _EDGE_EPS)
        uc = np.clip(np.where(inside, u, 0.0), 0.0, nx - 1)
        vc = np.clip(np.where(inside, v, 0.0), 0.0, ny - 1)
        i0 = np.minimum(np.floor(uc).astype(int), nx - 2)
        j0 = np.minimum(np.floor(vc).astype(int), ny - 2)
        fu = np.where(inside, uc - i0, np.nan)
        fv = np.where(inside, vc - j0, np.nan)
        return i0, i0 + 1, j0, j0 + 1, fu, fv

    def _corners(self, i0, i1, j0, j1):
        h = self.heights
        return h[j0, i0], h[j0, i1], h[j1, i0], h[j1, i1]

    def height(self, x, y, strict: bool = True) -> np.ndarray:
        """Bilinear height; outside points raise, or give NaN when ``strict`` is False."""
        i0, i1, j0, j1, fu, fv = self._cells(x, y)
        if strict and np.any(np.isnan(fu)):
            raise OutsideFootprintError("height query outside the grid footprint")
        h00, h10, h01, h11 = self._corners(i0, i1, j0, j1)
        return (h00 * (1 - fu) * (1 - fv) + h10 * fu * (1 - fv)
                + h01 * (1 - fu) * fv + h11 * fu * fv)

    def gradient(self, x, y, strict: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """(dh/dx, dh/dy) of the bilinear patch containing each query."""
        i0, i1, j0, j1, fu, fv = self._cells(x, y)
        if strict and np.any(np.isnan(fu)):
            raise OutsideFootprintError("gradient query outside the grid footprint")
        h00, h10, h01, h11 = self._corners(i0, i1, j0, j1)
        dhdx = ((h10 - h00) * (1 - fv) + (h11 - h01) * fv) / self.spacing
        dhdy = ((h01 - h00) * (1 - fu) + (h11 - h10) * fu) / self.spacing
        return dhdx, dhdy

    def normal(self, x, y) -> np.ndarray:
        """Tangent-plane normal (-dh/dx, -dh/dy, 1), shape ``(..., 3)``."""
        gx, gy = self.gradient(x, y)
        return np.stack([-gx, -gy, np.ones_like(gx)], axis=-1)


@dataclass(frozen=True)
class GroundPoint:
    position: np.ndarray
    normal: np.ndarray


def build_grid(heights, spacing: float, origin=(0.0, 0.0), periodic: bool = False) -> DtmGrid:
    return DtmGrid(np.asarray(heights, dtype=float), spacing, tuple(origin), periodic)


def sample_height(grid: DtmGrid, x: float, y: float) -> float:
    return float(grid.height(x, y))


def surface_normal(grid: DtmGrid, x: float, y: float) -> np.ndarray:
    return grid.normal(x, y).reshape(3)


def intersect_rays(grid: DtmGrid, origins, directions, height_offset=0.0):
    """Vectorised first intersection of rays with the terrain surface.

    ``height_offset`` (scalar or per-ray) lifts the surface seen by each ray;
    it is how per-feature map height errors are realised.

    Returns ``(points, normals)`` with shape ``(n, 3)`` each.  Raises
    :class:`RayMissError` if any ray leaves the footprint first and
    ``ValueError`` for upward rays or origins below the surface.
    """
    d = np.atleast_2d(np.asarray(directions, dtype=float))
    o = np.atleast_2d(np.asarray(origins, dtype=float))
    o, d = np.broadcast_arrays(o, d)
    n = d.shape[0]
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    off = np.broadcast_to(np.asarray(height_offset, dtype=float), (n,))
    dz = d[:, 2]
    if np.any(dz >= 0):
        raise ValueError("ray direction must point downward (negative z)")

    h_origin = grid.height(o[:, 0], o[:, 1], strict=False) + off
    if np.any(np.isnan(h_origin)):
        raise RayMissError("ray origin outside the grid footprint")
    if np.any(o[:, 2] <= h_origin):
        raise ValueError("ray origin at or below the terrain")

    # Only the slab between the lowest and highest sample can contain a hit.
    # Padded so a flat grid still gets a bracket straddling the surface.
    pad = 1e-6 * (1.0 + grid.max_height - grid.min_height)
    t_lo = np.maximum(0.0, (o[:, 2] - (grid.max_height + off + pad)) / -dz)
    t_hi = (o[:, 2] - (grid.min_height + off - pad)) / -dz
    step = grid.spacing / 2.0
    n_steps = int(np.ceil(np.max(t_hi - t_lo) / step)) + 1
    ts = t_lo[:, None] + step * np.arange(n_steps + 1)[None, :]
    ts = np.minimum(ts, t_hi[:, None])
    px = o[:, 0, None] + ts * d[:, 0, None]
    py = o[:, 1, None] + ts * d[:, 1, None]
    pz = o[:, 2, None] + ts * d[:, 2, None]
    above = pz - (grid.height(px, py, strict=False) + off[:, None])

    below = above <= 0
    outside = np.isnan(above)
    first_hit = np.where(below.any(axis=1), below.argmax(axis=1), n_steps + 1)
    first_out = np.where(outside.any(axis=1), outside.argmax(axis=1), n_steps + 2)
    if np.any(first_out < first_hit) or np.any(first_hit > n_steps):
        raise RayMissError("ray left the grid footprint before intersecting the terrain")

    rows = np.arange(n)
    hi = ts[rows, first_hit]
    lo = ts[rows, np.maximum(first_hit - 1, 0)]
    f_lo = above[rows, np.maximum(first_hit - 1, 0)]
    f_hi = above[rows, first_hit]
    t = hi.copy()
    active = np.abs(f_hi) >= _REFINE_TOL
    side = np.zeros(n)
    # Illinois false position: keeps the bracket, converges superlinearly.
    for _ in range(_REFINE_MAX):
        if not active.any():
            break
        span = f_lo - f_hi
        tc = np.where(span > 0, hi + f_hi * (hi - lo) / np.where(span > 0, span, 1.0), 0.5 * (lo + hi))
        p = o + tc[:, None] * d
        f = p[:, 2] - (grid.height(p[:, 0], p[:, 1]) + off)
        up = active & (f > 0)
        dn = active & ~(f > 0)
        f_hi = np.where(up & (side > 0), 0.5 * f_hi, f_hi)
        f_lo = np.where(dn & (side < 0), 0.5 * f_lo, f_lo)
        lo = np.where(up, tc, lo)
        f_lo = np.where(up, f, f_lo)
        hi = np.where(dn, tc, hi)
        f_hi = np.where(dn, f, f_hi)
        side = np.where(up, 1.0, np.where(dn, -1.0, side))
        t = np.where(active, tc, t)
        active &= (np.abs(f) >= _REFINE_TOL) & (hi - lo > 1e-12 * np.maximum(hi, 1.0))
    points = o + t[:, None] * d
    normals = grid.normal(points[:, 0], points[:, 1])
    return points, normals


def ray_intersect(grid: DtmGrid, origin, direction, height_offset: float = 0.0) -> GroundPoint:
    points, normals = intersect_rays(grid, np.reshape(origin, (1, 3)), np.reshape(direction, (1, 3)), height_offset)
    return GroundPoint(points[0], normals[0])


def synth_terrain(
    seed: int,
    extent,
    target_relief: float,
    base_spacing: float,
    n_waves: int = 60,
    wavelengths: tuple[float, float] = (20.0, 2000.0),
    periodic: bool = False,
) -> DtmGrid:
    """Smooth random terrain built from random-phase sinusoids.

    Wave vectors are snapped to whole cycles over the extent, so the surface
    tiles seamlessly; ``periodic=True`` returns the tile as a periodic grid.
    Amplitudes grow with wavelength.  Heights are rescaled so that
    ``max - min == target_relief`` exactly over the sampled nodes, with the
    minimum at zero.
    """
    if target_relief < 0:
        raise ValueError("target_relief must be non-negative")
    ex, ey = (float(extent), float(extent)) if np.isscalar(extent) else map(float, extent)
    nx = int(math.floor(ex / base_spacing + 1e-9))
    ny = int(math.floor(ey / base_spacing + 1e-9))
    if not periodic:
        nx += 1
        ny += 1
    xs = np.arange(nx) * base_spacing
    ys = np.arange(ny) * base_spacing
    if target_relief == 0:
        return DtmGrid(np.zeros((ny, nx)), base_spacing, (0.0, 0.0), periodic)

    rng = np.random.default_rng(seed)
    lam_min, lam_max = wavelengths
    h = np.zeros((ny, nx))
    waves = 0
    while waves < n_waves:
        lam = math.exp(rng.uniform(math.log(lam_min), math.log(lam_max)))
        ang = rng.uniform(0.0, 2.0 * math.pi)
        kx = round(ex / lam * math.cos(ang))
        ky = round(ey / lam * math.sin(ang))
        phase = rng.uniform(0.0, 2.0 * math.pi)
        amp = lam * rng.uniform(0.5, 1.0)
        if kx == 0 and ky == 0:
            continue
        h += amp * np.cos(2 * math.pi * (kx * xs[None, :] / ex + ky * ys[:, None] / ey) + phase)
        waves += 1
    h -= h.min()
    h *= target_relief / h.max()
    return DtmGrid(h, base_spacing, (0.0, 0.0), periodic)


def resample_grid(grid: DtmGrid, new_spacing: float) -> DtmGrid:
    """Sample ``grid`` at the nodes of a coarser lattice with the same origin."""
    if new_spacing < grid.spacing * (1 - 1e-12):
        raise ValueError(f"new_spacing {new_spacing} is finer than grid spacing {grid.spacing}")
    ex, ey = grid.extent
    if grid.periodic:
        nx = ex / new_spacing
        ny = ey / new_spacing
        if abs(nx - round(nx)) > 1e-9 or abs(ny - round(ny)) > 1e-9:
            raise ValueError("periodic grids resample only to spacings dividing the period")
        nx, ny = int(round(nx)), int(round(ny))
    else:
        nx = int(math.floor(ex / new_spacing + 1e-9)) + 1
        ny = int(math.floor(ey / new_spacing + 1e-9)) + 1
    xs = grid.origin[0] + np.arange(nx) * new_spacing
    ys = grid.origin[1] + np.arange(ny) * new_spacing
    X, Y = np.meshgrid(xs, ys)
    return DtmGrid(grid.height(X, Y), new_spacing, grid.origin, grid.periodic)


def height_error_std(fine: DtmGrid, coarse: DtmGrid, n_probes: int = 20000, seed: int = 0) -> float:
    """Sample std of the coarse-minus-fine height difference over random probes.

    Probes are drawn uniformly over the coarse footprint, which must lie
    inside the fine one.
    """
    cx0, cx1, cy0, cy1 = coarse.footprint
    if not fine.periodic:
        fx0, fx1, fy0, fy1 = fine.footprint
        tol = _EDGE_EPS * fine.spacing
        if cx0 < fx0 - tol or cx1 > fx1 + tol or cy0 < fy0 - tol or cy1 > fy1 + tol:
            raise ValueError("coarse grid footprint is not covered by the fine grid")
    rng = np.random.default_rng(seed)
    x = rng.uniform(cx0, cx1, n_probes)
    y = rng.uniform(cy0, cy1, n_probes)
    diff = coarse.height(x, y) - fine.height(x, y)
    return float(np.std(diff, ddof=1))


def save_grid(grid: DtmGrid, path) -> None:
    ny, nx = grid.shape
    lines = [
        f"ncols {nx}",
        f"nrows {ny}",
        f"spacing {grid.spacing!r}",
        f"origin_x {grid.origin[0]!r}",
        f"origin_y {grid.origin[1]!r}",
        f"periodic {int(grid.periodic)}",
    ]
    lines += [" ".join(repr(float(v)) for v in row) for row in grid.heights]
    Path(path).write_text("\n".join(lines) + "\n")


def load_grid(path) -> DtmGrid:
    text = Path(path).read_text().split("\n")
    header = {}
    for lineno, line in enumerate(text[:6], start=1):
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'key value' header line")
        header[parts[0].lower()] = parts[1]
    try:
        nx = int(header["ncols"])
        ny = int(header["nrows"])
        spacing = float(header["spacing"])
        origin = (float(header["origin_x"]), float(header["origin_y"]))
        periodic = header["periodic"] not in ("0", "false", "False")
    except KeyError as exc:
        raise ValueError(f"{path}: missing header field {exc.args[0]}") from None
    values = np.array(" ".join(text[6:]).split(), dtype=float)
    if values.size != nx * ny:
        raise ValueError(f"{path}: expected {nx * ny} height values, found {values.size}")
    return DtmGrid(values.reshape(ny, nx), spacing, origin, periodic)
