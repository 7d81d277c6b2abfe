"""Grid geometry, discrete images and functions, phantoms, and divergences.

Images are nonnegative pixel densities (activity per unit area) on a fixed
rectangular grid; functions are arbitrary-sign samples on the same grid.
The duality pairing is midpoint quadrature: pixel_area times the pointwise
product summed over pixels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "GridGeometry",
    "DensityImage",
    "GridFunction",
    "pairing",
    "total_mass",
    "kl_vec",
    "kl_images",
    "make_derenzo",
    "sample_bilinear",
    "save_image",
    "load_image",
    "save_pgm",
]


@dataclass(frozen=True)
class GridGeometry:
    """Pixel grid over a physical rectangle [x_min,x_max] x [y_min,y_max].

    Values are stored row-major with y as the outer (row) index and x inner.
    Pixel (iy, ix) is centered at (x_min + (ix+0.5)*dx, y_min + (iy+0.5)*dy).
    """

    nx: int
    ny: int
    extent: tuple[float, float, float, float] = (-20.0, 20.0, -20.0, 20.0)

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError(f"grid must have at least one pixel, got {self.nx}x{self.ny}")
        x_min, x_max, y_min, y_max = self.extent
        if not (x_min < x_max and y_min < y_max):
            raise ValueError(f"degenerate extent {self.extent}")
        object.__setattr__(self, "extent", tuple(float(v) for v in self.extent))

    @property
    def dx(self) -> float:
        return (self.extent[1] - self.extent[0]) / self.nx

    @property
    def dy(self) -> float:
        return (self.extent[3] - self.extent[2]) / self.ny

    @property
    def pixel_area(self) -> float:
        return self.dx * self.dy

    @property
    def npix(self) -> int:
        return self.nx * self.ny

    def xs(self) -> np.ndarray:
        """Pixel center x coordinates, length nx."""
        return self.extent[0] + (np.arange(self.nx) + 0.5) * self.dx

    def ys(self) -> np.ndarray:
        """Pixel center y coordinates, length ny."""
        return self.extent[2] + (np.arange(self.ny) + 0.5) * self.dy

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Meshgrid of pixel centers, each shaped (ny, nx)."""
        return np.meshgrid(self.xs(), self.ys())

    def flat_centers(self) -> np.ndarray:
        """Pixel centers as an (npix, 2) array in row-major order."""
        X, Y = self.centers()
        return np.column_stack([X.ravel(), Y.ravel()])


def _as_grid_array(geom: GridGeometry, values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != (geom.ny, geom.nx):
        raise ValueError(f"values shape {arr.shape} does not match grid {(geom.ny, geom.nx)}")
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class DensityImage:
    """A nonnegative measure represented by its per-pixel density."""

    geom: GridGeometry
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = _as_grid_array(self.geom, self.values)
        if np.any(arr < 0):
            raise ValueError("density values must be nonnegative")
        if not np.all(np.isfinite(arr)):
            raise ValueError("density values must be finite")
        object.__setattr__(self, "values", arr)

    @property
    def total_mass(self) -> float:
        return self.geom.pixel_area * float(self.values.sum())


@dataclass(frozen=True)
class GridFunction:
    """A continuous function sampled at pixel centers (any sign)."""

    geom: GridGeometry
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "values", _as_grid_array(self.geom, self.values))


def _check_same_geom(a, b):
    if a.geom != b.geom:
        raise ValueError(f"geometry mismatch: {a.geom} vs {b.geom}")


def pairing(mu: DensityImage, g: GridFunction) -> float:
    """Duality pairing <mu, g> = pixel_area * sum(mu * g).

    Linear in both arguments; summation order is fixed (row-major dot)
    so repeated evaluations are bit-identical.
    """
    _check_same_geom(mu, g)
    return mu.geom.pixel_area * float(np.dot(mu.values.ravel(), g.values.ravel()))


def total_mass(mu: DensityImage) -> float:
    return mu.total_mass


def kl_vec(u, v) -> float:
    """Generalized Kullback-Leibler divergence for nonnegative vectors.

    d(u||v) = sum u_i log(u_i/v_i) - u_i + v_i, with 0*log(0) = 0.
    Returns +inf if some u_i > 0 has v_i = 0.
    """
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    if np.any(u < 0) or np.any(v < 0):
        raise ValueError("kl_vec requires nonnegative vectors")
    pos = u > 0
    if np.any(v[pos] == 0):
        return math.inf
    terms = np.zeros_like(u)
    terms[pos] = u[pos] * np.log(u[pos] / v[pos])
    return float(terms.sum() - u.sum() + v.sum())


def kl_images(p: DensityImage, q: DensityImage) -> float:
    """Generalized KL divergence of two densities, integrated over the grid.

    pixel_area * sum(p log(p/q) - p + q); +inf when p charges a pixel
    where q vanishes.
    """
    _check_same_geom(p, q)
    d = kl_vec(p.values.ravel(), q.values.ravel())
    if math.isinf(d):
        return math.inf
    return p.geom.pixel_area * d


# ---------------------------------------------------------------------------
# Bilinear sampling


def sample_bilinear(values: np.ndarray, geom: GridGeometry, px, py, mode: str = "zero") -> np.ndarray:
    """Sample a grid array at physical points (px, py) with bilinear weights.

    mode="zero": out-of-lattice corners contribute 0 (functions vanish
    outside the extent).  mode="clamp": query coordinates are clamped to
    the pixel-center lattice (constant continuation past the boundary,
    used for velocity fields).
    """
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    gx = (px - geom.extent[0]) / geom.dx - 0.5
    gy = (py - geom.extent[2]) / geom.dy - 0.5
    if mode == "clamp":
        gx = np.clip(gx, 0.0, geom.nx - 1.0)
        gy = np.clip(gy, 0.0, geom.ny - 1.0)
    elif mode != "zero":
        raise ValueError(f"unknown sampling mode {mode!r}")
    ix = np.floor(gx).astype(np.int64)
    iy = np.floor(gy).astype(np.int64)
    fx = gx - ix
    fy = gy - iy
    out = np.zeros(np.broadcast(gx, gy).shape, dtype=np.float64)
    for dy_c, dx_c, w in (
        (0, 0, (1 - fx) * (1 - fy)),
        (0, 1, fx * (1 - fy)),
        (1, 0, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        cx = ix + dx_c
        cy = iy + dy_c
        ok = (cx >= 0) & (cx < geom.nx) & (cy >= 0) & (cy < geom.ny)
        if np.any(ok):
            out[ok] += w[ok] * values[cy[ok], cx[ok]]
    return out


# ---------------------------------------------------------------------------
# Derenzo-style phantom

# Sector rod radii, one 60-degree sector per entry starting at the top and
# going clockwise.  Mirror pairs across the vertical axis share a radius so
# the rendered phantom is exactly symmetric under x -> -x.
_DERENZO_SECTORS = (
    (90.0, 1.8),
    (30.0, 1.4),
    (-30.0, 0.9),
    (-90.0, 0.55),
    (210.0, 0.9),
    (150.0, 1.4),
)
_DERENZO_DISK_RADIUS = 17.0
_DERENZO_INNER_MARGIN = 1.6


def _sector_rod_centers(bisector_deg: float, rod_radius: float) -> list[tuple[float, float]]:
    """Hexagonally packed rod centers inside one 60-degree wedge."""
    r = rod_radius
    pitch = 4.0 * r
    row_step = pitch * math.sqrt(3.0) / 2.0
    phi = math.radians(bisector_deg)
    ud = (math.cos(phi), math.sin(phi))
    wd = (-math.sin(phi), math.cos(phi))
    # wedge edge rays at bisector +/- 30 degrees
    half = math.radians(30.0)
    edges = [phi - half, phi + half]
    centers = []
    m = 0
    while True:
        u = _DERENZO_INNER_MARGIN + 2.0 * r + m * row_step
        if u + r > _DERENZO_DISK_RADIUS:
            break
        offs = [0.0] if m % 2 == 0 else []
        j = 1
        while True:
            w = (j - 0.5) * pitch if m % 2 == 1 else j * pitch
            if w > _DERENZO_DISK_RADIUS:
                break
            offs.extend([w, -w])
            j += 1
        for w in offs:
            cx = u * ud[0] + w * wd[0]
            cy = u * ud[1] + w * wd[1]
            if math.hypot(cx, cy) + r > _DERENZO_DISK_RADIUS:
                continue
            # the whole rod disk must stay inside the wedge with a small gap
            inside = True
            for e in edges:
                # signed distance to the edge line, positive toward the bisector
                d = -math.sin(e) * cx + math.cos(e) * cy
                if e == edges[1]:
                    d = -d
                if d < r + 0.5 * r:
                    inside = False
                    break
            if inside:
                centers.append((cx, cy))
        m += 1
    return centers


def _derenzo_rods() -> list[tuple[float, float, float]]:
    rods = []
    for bis, r in _DERENZO_SECTORS:
        if bis in (150.0, 210.0):
            # exact mirrors of the 30 / -30 degree sectors
            src = 30.0 if bis == 150.0 else -30.0
            for cx, cy in _sector_rod_centers(src, r):
                rods.append((-cx, cy, r))
        else:
            rods.extend((cx, cy, r) for cx, cy in _sector_rod_centers(bis, r))
    return rods


def make_derenzo(geom: GridGeometry, dose: float) -> DensityImage:
    """Hot-rod resolution phantom: six sectors of disks, scaled by `dose`.

    Sector rod radii decrease from 1.8 to 0.55 going around from the top,
    with mirror-paired sectors sharing a radius so the phantom is exactly
    symmetric under x -> -x.  Rod centers are spaced 4 radii apart and the
    whole pattern fits a disk of radius 17 at the origin.  Pixel values are
    area-coverage antialiased in [0, dose].
    """
    if dose <= 0:
        raise ValueError(f"dose must be positive, got {dose}")
    base = np.zeros((geom.ny, geom.nx))
    xs, ys = geom.xs(), geom.ys()
    ss = 8
    off = ((np.arange(ss) + 0.5) / ss - 0.5)
    ox = off * geom.dx
    oy = off * geom.dy
    for cx, cy, r in _derenzo_rods():
        ix0 = max(0, int(np.searchsorted(xs, cx - r - geom.dx)))
        ix1 = min(geom.nx, int(np.searchsorted(xs, cx + r + geom.dx)) + 1)
        iy0 = max(0, int(np.searchsorted(ys, cy - r - geom.dy)))
        iy1 = min(geom.ny, int(np.searchsorted(ys, cy + r + geom.dy)) + 1)
        if ix0 >= ix1 or iy0 >= iy1:
            continue
        sx = xs[ix0:ix1][:, None] + ox[None, :]  # (nxw, ss)
        sy = ys[iy0:iy1][:, None] + oy[None, :]
        dx2 = (sx - cx) ** 2
        dy2 = (sy - cy) ** 2
        # coverage counts over the ss*ss subsample grid
        inside = dy2[:, None, :, None] + dx2[None, :, None, :] <= r * r
        cov = inside.reshape(iy1 - iy0, ix1 - ix0, ss * ss).mean(axis=2)
        base[iy0:iy1, ix0:ix1] += cov
    return DensityImage(geom, base * dose)


# ---------------------------------------------------------------------------
# File formats


def save_image(img: DensityImage | GridFunction, path: str | Path) -> None:
    """Write raw little-endian f32 (row-major, y outer) plus a JSON sidecar."""
    path = Path(path)
    if path.suffix != ".f32":
        path = path.with_suffix(".f32")
    path.write_bytes(img.values.astype("<f4").tobytes(order="C"))
    sidecar = {
        "nx": img.geom.nx,
        "ny": img.geom.ny,
        "extent": list(img.geom.extent),
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1) + "\n")


def load_image(path: str | Path, kind: str = "density") -> DensityImage | GridFunction:
    path = Path(path)
    if path.suffix != ".f32":
        path = path.with_suffix(".f32")
    meta = json.loads(path.with_suffix(".json").read_text())
    geom = GridGeometry(meta["nx"], meta["ny"], tuple(meta["extent"]))
    raw = np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float64)
    values = raw.reshape(geom.ny, geom.nx)
    if kind == "density":
        return DensityImage(geom, values)
    return GridFunction(geom, values)


def save_pgm(img: DensityImage | GridFunction, path: str | Path) -> None:
    """8-bit PGM export, min-max scaled, for quick visual inspection."""
    v = img.values
    lo, hi = float(v.min()), float(v.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    u8 = np.clip((v - lo) * scale, 0, 255).astype(np.uint8)
    header = f"P5\n{img.geom.nx} {img.geom.ny}\n255\n".encode()
    Path(path).write_bytes(header + u8.tobytes(order="C"))
