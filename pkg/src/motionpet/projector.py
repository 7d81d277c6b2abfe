"""2D parallel-strip PET operator: forward projection and its exact adjoint.

Each detector bin i = (angle, tangential) carries a detection profile
a_i in [0,1]: the fraction of a pixel covered by the strip of one bin
width at that angle/offset, restricted to a circular field of view.
Profiles are rasterized once by 4x4 pixel supersampling into a sparse
matrix; forward and adjoint both apply the same matrix, so the adjoint
identity holds to machine precision.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .grid import DensityImage, GridFunction, GridGeometry

__all__ = ["ProjectorConfig", "Sinogram", "StripProjector", "save_sinogram", "load_sinogram", "sinogram_to_csv"]


@dataclass(frozen=True)
class ProjectorConfig:
    """Scanner geometry: uniformly spaced view angles in [0, pi) and
    tangential bins of equal width covering [-fov_radius, fov_radius]."""

    n_angles: int = 45
    n_tangential: int = 64
    fov_radius: float | None = None  # None: half the shorter extent side

    def __post_init__(self):
        if self.n_angles < 1 or self.n_tangential < 1:
            raise ValueError("need at least one angle and one tangential bin")

    @property
    def ndet(self) -> int:
        return self.n_angles * self.n_tangential

    def det_index(self, angle: int, tangential: int) -> int:
        if not (0 <= angle < self.n_angles and 0 <= tangential < self.n_tangential):
            raise IndexError(f"detector ({angle},{tangential}) out of range")
        return angle * self.n_tangential + tangential

    def angle_index(self, i: int) -> int:
        return i // self.n_tangential

    def tangential_index(self, i: int) -> int:
        return i % self.n_tangential

    def resolve_fov(self, geom: GridGeometry) -> float:
        if self.fov_radius is not None:
            return float(self.fov_radius)
        x_min, x_max, y_min, y_max = geom.extent
        return 0.5 * min(x_max - x_min, y_max - y_min)


@dataclass(frozen=True)
class Sinogram:
    """Per-detector values (counts or expected counts), length ndet."""

    config: ProjectorConfig
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.array(np.asarray(self.values, dtype=np.float64).ravel(), copy=True)
        if arr.size != self.config.ndet:
            raise ValueError(f"sinogram length {arr.size} != ndet {self.config.ndet}")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    def as_grid(self) -> np.ndarray:
        return self.values.reshape(self.config.n_angles, self.config.n_tangential)

    @property
    def total(self) -> float:
        return float(self.values.sum())


@lru_cache(maxsize=8)
def _build_matrix(geom: GridGeometry, config: ProjectorConfig, supersample: int) -> sp.csr_matrix:
    fov = config.resolve_fov(geom)
    width = 2.0 * fov / config.n_tangential
    ss = supersample
    off = ((np.arange(ss) + 0.5) / ss - 0.5)
    X, Y = geom.centers()
    # subsample coordinates, shape (ss*ss, npix); x offset varies fastest
    oxx, oyy = np.meshgrid(off * geom.dx, off * geom.dy)
    px = X.ravel()[None, :] + oxx.ravel()[:, None]
    py = Y.ravel()[None, :] + oyy.ravel()[:, None]
    inside = px * px + py * py <= fov * fov
    w = 1.0 / (ss * ss)
    cols_all = np.broadcast_to(np.arange(geom.npix), (ss * ss, geom.npix))
    blocks = []
    nper = config.n_tangential * geom.npix
    for a in range(config.n_angles):
        theta = a * np.pi / config.n_angles
        s = px * np.cos(theta) + py * np.sin(theta)
        bins = np.floor((s + fov) / width).astype(np.int64)
        ok = inside & (bins >= 0) & (bins < config.n_tangential) & (s < fov)
        flat = bins[ok] * geom.npix + cols_all[ok]
        counts = np.bincount(flat, minlength=nper)
        nz = np.nonzero(counts)[0]
        rows = nz // geom.npix + a * config.n_tangential
        cols = nz % geom.npix
        blocks.append((rows, cols, counts[nz] * w))
    rows = np.concatenate([b[0] for b in blocks])
    cols = np.concatenate([b[1] for b in blocks])
    data = np.concatenate([b[2] for b in blocks])
    mat = sp.coo_matrix((data, (rows, cols)), shape=(config.ndet, geom.npix)).tocsr()
    mat.sum_duplicates()
    mat.data.flags.writeable = False
    return mat


class StripProjector:
    """The PET operator A and its adjoint on a fixed grid.

    (A mu)_i = pixel_area * sum_p mu[p] * a_i[p]
    (A* lam)[p] = sum_i lam_i * a_i[p]
    """

    def __init__(self, geom: GridGeometry, config: ProjectorConfig | None = None, supersample: int = 4):
        self.geom = geom
        self.config = config or ProjectorConfig()
        self.supersample = supersample
        self.fov_radius = self.config.resolve_fov(geom)
        self.detector_width = 2.0 * self.fov_radius / self.config.n_tangential
        self.matrix = _build_matrix(geom, self.config, supersample)
        self._matrix_t = self.matrix.T.tocsr()

    @property
    def ndet(self) -> int:
        return self.config.ndet

    def detector_profile(self, i: int) -> GridFunction:
        """The detection probability a_i as a grid function."""
        if not (0 <= i < self.ndet):
            raise IndexError(f"detector index {i} out of range [0,{self.ndet})")
        row = np.asarray(self.matrix.getrow(i).todense()).reshape(self.geom.ny, self.geom.nx)
        return GridFunction(self.geom, row)

    def profile_row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Sparse view of a_i: (pixel indices, values)."""
        start, end = self.matrix.indptr[i], self.matrix.indptr[i + 1]
        return self.matrix.indices[start:end], self.matrix.data[start:end]

    def forward(self, mu: DensityImage) -> Sinogram:
        if mu.geom != self.geom:
            raise ValueError("geometry mismatch between image and projector")
        vals = self.geom.pixel_area * (self.matrix @ mu.values.ravel())
        return Sinogram(self.config, vals)

    def forward_values(self, flat_values: np.ndarray) -> np.ndarray:
        """forward() on a raw flat density array; returns the raw vector."""
        return self.geom.pixel_area * (self.matrix @ flat_values)

    def adjoint(self, lam: Sinogram | np.ndarray) -> GridFunction:
        if isinstance(lam, Sinogram):
            if lam.config != self.config:
                raise ValueError("sinogram config mismatch")
            vec = lam.values
        else:
            vec = np.asarray(lam, dtype=np.float64).ravel()
            if vec.size != self.ndet:
                raise ValueError(f"vector length {vec.size} != ndet {self.ndet}")
        g = self._matrix_t @ vec
        return GridFunction(self.geom, g.reshape(self.geom.ny, self.geom.nx))

    def adjoint_ones(self) -> GridFunction:
        return self.adjoint(np.ones(self.ndet))


def save_sinogram(sino: Sinogram, path: str | Path) -> None:
    """Raw little-endian f32 vector plus a JSON header sidecar."""
    path = Path(path)
    if path.suffix != ".f32":
        path = path.with_suffix(".f32")
    path.write_bytes(sino.values.astype("<f4").tobytes())
    header = {"n_angles": sino.config.n_angles, "n_tangential": sino.config.n_tangential}
    if sino.config.fov_radius is not None:
        header["fov_radius"] = sino.config.fov_radius
    path.with_suffix(".json").write_text(json.dumps(header) + "\n")


def load_sinogram(path: str | Path) -> Sinogram:
    path = Path(path)
    if path.suffix != ".f32":
        path = path.with_suffix(".f32")
    meta = json.loads(path.with_suffix(".json").read_text())
    config = ProjectorConfig(meta["n_angles"], meta["n_tangential"], meta.get("fov_radius"))
    vals = np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float64)
    return Sinogram(config, vals)


def sinogram_to_csv(sino: Sinogram, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["angle", "tangential", "value"])
        grid = sino.as_grid()
        for a in range(sino.config.n_angles):
            for k in range(sino.config.n_tangential):
                writer.writerow([a, k, repr(grid[a, k])])
