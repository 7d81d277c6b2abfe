"""Time-indexed motion operators on images and functions.

A motion model supplies, for every t in [0,1], a linear operator W_t on
measures together with its adjoint on functions.  The adjoint acts by
composition with a point map (pull-back); the measure action moves mass
(push-forward).  Four variants are provided:

* Static: identity at all times.
* Translation: rigid shift along x with a ramp-and-hold time profile.
* MassPreservingDiffeo: flow of a stationary velocity field; functions
  pull back by the forward flow, densities transport by the inverse flow
  weighted with its Jacobian determinant, which conserves total activity.
* PiecewiseConstant: gated motion, one frozen submodel per time gate.

Nonnegative inputs map to nonnegative outputs for every variant (all
interpolation weights are convex).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import DensityImage, GridFunction, GridGeometry, sample_bilinear

__all__ = [
    "MotionModel",
    "StaticMotion",
    "TranslationMotion",
    "MassPreservingDiffeoMotion",
    "PiecewiseConstantMotion",
    "VelocityField",
    "DiffeoMap",
    "integrate_flow",
    "inverse_flow",
    "jacobian_det",
    "model_to_descriptor",
    "model_from_descriptor",
    "save_velocity",
    "load_velocity",
]


@dataclass(frozen=True)
class VelocityField:
    """Stationary velocity field sampled at pixel centers (units/time)."""

    geom: GridGeometry
    vx: np.ndarray = field(repr=False)
    vy: np.ndarray = field(repr=False)

    def __post_init__(self):
        for name in ("vx", "vy"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (self.geom.ny, self.geom.nx):
                raise ValueError(f"{name} shape {arr.shape} does not match grid")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
            arr = np.array(arr, copy=True)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def sup_norm(self) -> float:
        return float(np.sqrt(self.vx ** 2 + self.vy ** 2).max())

    def scaled(self, factor: float) -> "VelocityField":
        return VelocityField(self.geom, self.vx * factor, self.vy * factor)


@dataclass(frozen=True)
class DiffeoMap:
    """Per-pixel coordinates of a deformation map phi(x)."""

    geom: GridGeometry
    map_x: np.ndarray = field(repr=False)
    map_y: np.ndarray = field(repr=False)

    def __post_init__(self):
        for name in ("map_x", "map_y"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (self.geom.ny, self.geom.nx):
                raise ValueError(f"{name} shape {arr.shape} does not match grid")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
            arr = np.array(arr, copy=True)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)


def _gather2_clamped(ax: np.ndarray, ay: np.ndarray, nx: int, ny: int, gx, gy):
    """Bilinear gather of two co-located flat fields, clamped at the lattice."""
    cgx = np.clip(gx, 0.0, nx - 1.0)
    cgy = np.clip(gy, 0.0, ny - 1.0)
    ix = np.minimum(cgx.astype(np.int64), nx - 2) if nx > 1 else np.zeros_like(cgx, dtype=np.int64)
    iy = np.minimum(cgy.astype(np.int64), ny - 2) if ny > 1 else np.zeros_like(cgy, dtype=np.int64)
    fx = cgx - ix
    fy = cgy - iy
    base = iy * nx + ix
    w00 = (1.0 - fx) * (1.0 - fy)
    w10 = fx * (1.0 - fy)
    w01 = (1.0 - fx) * fy
    w11 = fx * fy
    ox = w00 * ax[base] + w10 * ax[base + 1] + w01 * ax[base + nx] + w11 * ax[base + nx + 1]
    oy = w00 * ay[base] + w10 * ay[base + 1] + w01 * ay[base + nx] + w11 * ay[base + nx + 1]
    return ox, oy


def gather_zero(values_flat: np.ndarray, nx: int, ny: int, gx, gy) -> np.ndarray:
    """Bilinear gather of a flat field in grid coordinates, zero outside."""
    ix = np.floor(gx).astype(np.int64)
    iy = np.floor(gy).astype(np.int64)
    fx = gx - ix
    fy = gy - iy
    out = np.zeros(np.broadcast(gx, gy).shape)
    for dy_c, dx_c, w in (
        (0, 0, (1 - fx) * (1 - fy)),
        (0, 1, fx * (1 - fy)),
        (1, 0, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        cx = ix + dx_c
        cy = iy + dy_c
        ok = (cx >= 0) & (cx < nx) & (cy >= 0) & (cy < ny)
        if np.any(ok):
            out[ok] += w[ok] * values_flat[cy[ok] * nx + cx[ok]]
    return out


class _GridFlow:
    """Velocity field rescaled to grid coordinates for fast RK4 stepping."""

    def __init__(self, v: VelocityField):
        geom = v.geom
        if geom.nx < 2 or geom.ny < 2:
            raise ValueError("flow integration needs at least a 2x2 grid")
        self.nx, self.ny = geom.nx, geom.ny
        self.vgx = (v.vx / geom.dx).ravel()
        self.vgy = (v.vy / geom.dy).ravel()

    def rk4(self, gx, gy, h):
        k1x, k1y = _gather2_clamped(self.vgx, self.vgy, self.nx, self.ny, gx, gy)
        k2x, k2y = _gather2_clamped(self.vgx, self.vgy, self.nx, self.ny, gx + 0.5 * h * k1x, gy + 0.5 * h * k1y)
        k3x, k3y = _gather2_clamped(self.vgx, self.vgy, self.nx, self.ny, gx + 0.5 * h * k2x, gy + 0.5 * h * k2y)
        k4x, k4y = _gather2_clamped(self.vgx, self.vgy, self.nx, self.ny, gx + h * k3x, gy + h * k3y)
        sixth = h / 6.0
        return (
            gx + sixth * (k1x + 2.0 * k2x + 2.0 * k3x + k4x),
            gy + sixth * (k1y + 2.0 * k2y + 2.0 * k3y + k4y),
        )


def _grid_identity(geom: GridGeometry) -> tuple[np.ndarray, np.ndarray]:
    gy, gx = np.meshgrid(
        np.arange(geom.ny, dtype=np.float64), np.arange(geom.nx, dtype=np.float64), indexing="ij"
    )
    return gx.ravel(), gy.ravel()


def _grid_to_phys(geom: GridGeometry, gx, gy) -> tuple[np.ndarray, np.ndarray]:
    return geom.extent[0] + (gx + 0.5) * geom.dx, geom.extent[2] + (gy + 0.5) * geom.dy


def integrate_flow(v: VelocityField, t: float, steps: int) -> DiffeoMap:
    """Integrate dphi/dt = v(phi) from the identity with RK4, step t/steps."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"t={t} outside [0,1]")
    flow = _GridFlow(v)
    gx, gy = _grid_identity(v.geom)
    if t > 0.0:
        h = t / steps
        for _ in range(steps):
            gx, gy = flow.rk4(gx, gy, h)
    px, py = _grid_to_phys(v.geom, gx, gy)
    return DiffeoMap(v.geom, px.reshape(v.geom.ny, v.geom.nx), py.reshape(v.geom.ny, v.geom.nx))


def inverse_flow(v: VelocityField, t: float, steps: int) -> DiffeoMap:
    """The inverse map phi_t^{-1}, computed by flowing the negated field."""
    return integrate_flow(v.scaled(-1.0), t, steps)


def jacobian_det(dmap: DiffeoMap) -> GridFunction:
    """Finite-difference Jacobian determinant of a deformation map.

    Central differences in the interior, one-sided at the boundary.
    """
    geom = dmap.geom
    dxx = np.gradient(dmap.map_x, geom.dx, axis=1)
    dxy = np.gradient(dmap.map_x, geom.dy, axis=0)
    dyx = np.gradient(dmap.map_y, geom.dx, axis=1)
    dyy = np.gradient(dmap.map_y, geom.dy, axis=0)
    return GridFunction(geom, dxx * dyy - dxy * dyx)


def _check_time(t: float) -> float:
    t = float(t)
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"time {t} outside [0,1]")
    return t


class MotionModel:
    """Common interface for the W_t family."""

    def adjoint_apply(self, t: float, g: GridFunction) -> GridFunction:
        """Pull-back W_t* g."""
        raise NotImplementedError

    def push_forward(self, t: float, mu: DensityImage) -> DensityImage:
        """Measure action W_t mu."""
        raise NotImplementedError

    def warp_pixels(self, t: float, geom: GridGeometry, idx: np.ndarray | None = None):
        """Coordinates of the pull-back sampling points for pixel centers.

        Returns (px, py) flat arrays such that (W_t* g)(p) = g(px[p], py[p]).
        `idx` restricts to a flat pixel subset.
        """
        gx, gy = self.warp_pixels_grid(t, geom, idx)
        return _grid_to_phys(geom, gx, gy)

    def warp_pixels_grid(self, t: float, geom: GridGeometry, idx: np.ndarray | None = None):
        """Like warp_pixels but in fractional pixel-index coordinates."""
        raise NotImplementedError

    def is_time_constant(self) -> bool:
        return False

    def max_displacement(self, geom: GridGeometry) -> float:
        """Upper bound on |sampling point - pixel center| over t in [0,1]."""
        raise NotImplementedError

    def displacement_bound(self, t: float, geom: GridGeometry) -> float:
        """Upper bound on |sampling point - pixel center| at one time."""
        return self.max_displacement(geom)


class StaticMotion(MotionModel):
    def adjoint_apply(self, t, g):
        _check_time(t)
        return g

    def push_forward(self, t, mu):
        _check_time(t)
        return mu

    def warp_pixels_grid(self, t, geom, idx=None):
        _check_time(t)
        gx, gy = _grid_identity(geom)
        if idx is not None:
            gx, gy = gx[idx], gy[idx]
        return gx, gy

    def is_time_constant(self):
        return True

    def max_displacement(self, geom):
        return 0.0

    def __eq__(self, other):
        return isinstance(other, StaticMotion)

    def __hash__(self):
        return hash("static")


@dataclass(frozen=True)
class TranslationMotion(MotionModel):
    """Horizontal shift c(t) = (a*t + b, 0) for t <= stop, zero after.

    The adjoint samples at x + c(t); mass therefore moves by +c(t)."""

    a: float = 40.0 / 3.0
    b: float = -10.0
    stop: float = 0.75

    def shift(self, t: float) -> float:
        t = _check_time(t)
        return self.a * t + self.b if t <= self.stop else 0.0

    def adjoint_apply(self, t, g):
        c = self.shift(t)
        X, Y = g.geom.centers()
        out = sample_bilinear(g.values, g.geom, X + c, Y, mode="zero")
        return GridFunction(g.geom, out)

    def push_forward(self, t, mu):
        c = self.shift(t)
        X, Y = mu.geom.centers()
        out = sample_bilinear(mu.values, mu.geom, X - c, Y, mode="zero")
        return DensityImage(mu.geom, np.maximum(out, 0.0))

    def warp_pixels_grid(self, t, geom, idx=None):
        gx, gy = _grid_identity(geom)
        if idx is not None:
            gx, gy = gx[idx], gy[idx]
        return gx + self.shift(t) / geom.dx, gy

    def is_time_constant(self):
        return self.a == 0.0 and (self.b == 0.0 or self.stop >= 1.0)

    def max_displacement(self, geom):
        ends = [abs(self.shift(0.0)), abs(self.shift(min(self.stop, 1.0))), abs(self.shift(1.0))]
        return max(ends)

    def displacement_bound(self, t, geom):
        return abs(self.shift(t))


class MassPreservingDiffeoMotion(MotionModel):
    """Flow of a stationary velocity field acting mass-preservingly.

    The pull-back composes with phi_t; the push-forward transports the
    density along the inverse flow weighted by its Jacobian determinant.
    Flow maps at station times j/flow_steps are cached after the first
    query; an arbitrary t is reached from the preceding station with a
    single RK4 step of size t - j/flow_steps, which keeps per-event-time
    evaluation O(1) instead of re-integrating from zero.
    """

    def __init__(self, velocity: VelocityField, flow_steps: int = 32):
        if flow_steps < 1:
            raise ValueError("flow_steps must be >= 1")
        self.velocity = velocity
        self.flow_steps = int(flow_steps)
        self._flow: _GridFlow | None = None
        self._stations: tuple[np.ndarray, np.ndarray] | None = None  # (S+1, npix) each, grid coords
        self._station_disp: np.ndarray | None = None                 # (S+1,), physical units
        self._pixel_disp: np.ndarray | None = None

    @property
    def geom(self) -> GridGeometry:
        return self.velocity.geom

    def _grid_flow(self) -> _GridFlow:
        if self._flow is None:
            self._flow = _GridFlow(self.velocity)
        return self._flow

    def _station_table(self) -> tuple[np.ndarray, np.ndarray]:
        if self._stations is None:
            S = self.flow_steps
            geom = self.geom
            flow = self._grid_flow()
            gx, gy = _grid_identity(geom)
            tx = np.empty((S + 1, geom.npix))
            ty = np.empty((S + 1, geom.npix))
            tx[0], ty[0] = gx, gy
            disp = np.empty(S + 1)
            disp[0] = 0.0
            h = 1.0 / S
            for j in range(S):
                gx, gy = flow.rk4(gx, gy, h)
                tx[j + 1], ty[j + 1] = gx, gy
                disp[j + 1] = float(np.hypot((gx - tx[0]) * geom.dx, (gy - ty[0]) * geom.dy).max())
            tx.flags.writeable = False
            ty.flags.writeable = False
            self._stations = (tx, ty)
            self._station_disp = disp
        return self._stations

    def warp_pixels_grid(self, t, geom, idx=None):
        t = _check_time(t)
        if geom != self.geom:
            raise ValueError("geometry mismatch with velocity field")
        tx, ty = self._station_table()
        S = self.flow_steps
        j = min(int(t * S), S - 1) if t < 1.0 else S
        h = t - j / S
        if idx is None:
            gx, gy = tx[j].copy(), ty[j].copy()
        else:
            gx, gy = tx[j][idx], ty[j][idx]
        if h > 0.0:
            gx, gy = self._grid_flow().rk4(gx, gy, h)
        return gx, gy

    def adjoint_apply(self, t, g):
        if g.geom != self.geom:
            raise ValueError("geometry mismatch with velocity field")
        gx, gy = self.warp_pixels_grid(t, g.geom)
        out = gather_zero(g.values.ravel(), g.geom.nx, g.geom.ny, gx, gy)
        return GridFunction(g.geom, out.reshape(g.geom.ny, g.geom.nx))

    def push_forward(self, t, mu):
        t = _check_time(t)
        if mu.geom != self.geom:
            raise ValueError("geometry mismatch with velocity field")
        inv = inverse_flow(self.velocity, t, self.flow_steps)
        jac = jacobian_det(inv)
        moved = sample_bilinear(mu.values, mu.geom, inv.map_x, inv.map_y, mode="zero")
        return DensityImage(mu.geom, np.maximum(jac.values * moved, 0.0))

    def is_time_constant(self):
        return False

    def max_displacement(self, geom):
        self._station_table()
        slack = self.velocity.sup_norm() / self.flow_steps
        return float(self._station_disp.max()) + 2.0 * slack

    def displacement_bound(self, t, geom):
        t = _check_time(t)
        self._station_table()
        S = self.flow_steps
        j = min(int(t * S), S - 1) if t < 1.0 else S
        hi = min(j + 1, S)
        slack = self.velocity.sup_norm() / self.flow_steps
        return float(max(self._station_disp[j], self._station_disp[hi])) + 2.0 * slack

    def pixel_displacement(self, geom) -> np.ndarray:
        """Per-pixel bound on |phi_t(p) - p| over all t, physical units."""
        if geom != self.geom:
            raise ValueError("geometry mismatch with velocity field")
        if self._pixel_disp is None:
            tx, ty = self._station_table()
            dx, dy = geom.dx, geom.dy
            d = np.zeros(geom.npix)
            for j in range(1, self.flow_steps + 1):
                np.maximum(d, np.hypot((tx[j] - tx[0]) * dx, (ty[j] - ty[0]) * dy), out=d)
            slack = 2.0 * self.velocity.sup_norm() / self.flow_steps
            self._pixel_disp = d + slack
        return self._pixel_disp

    def station_state(self):
        """(station x, station y, grid flow, station count) in grid coords."""
        tx, ty = self._station_table()
        return tx, ty, self._grid_flow(), self.flow_steps


class PiecewiseConstantMotion(MotionModel):
    """Gated motion: gate s covers [t_{s-1}, t_s) (last gate closed)."""

    def __init__(self, gate_times, submodels):
        times = [float(t) for t in gate_times]
        if len(times) < 2 or times[0] != 0.0 or times[-1] != 1.0:
            raise ValueError("gate_times must run from 0 to 1")
        if any(t1 <= t0 for t0, t1 in zip(times, times[1:])):
            raise ValueError("gate_times must be strictly increasing")
        if len(submodels) != len(times) - 1:
            raise ValueError("need one submodel per gate")
        self.gate_times = tuple(times)
        self.submodels = tuple(submodels)

    @property
    def n_gates(self) -> int:
        return len(self.submodels)

    def gate_of(self, t: float) -> int:
        t = _check_time(t)
        idx = int(np.searchsorted(self.gate_times, t, side="right")) - 1
        return min(idx, self.n_gates - 1)

    def gate_durations(self) -> np.ndarray:
        return np.diff(np.asarray(self.gate_times))

    def adjoint_apply(self, t, g):
        return self.submodels[self.gate_of(t)].adjoint_apply(t, g)

    def push_forward(self, t, mu):
        return self.submodels[self.gate_of(t)].push_forward(t, mu)

    def warp_pixels_grid(self, t, geom, idx=None):
        return self.submodels[self.gate_of(t)].warp_pixels_grid(t, geom, idx)

    def is_time_constant(self):
        return self.n_gates == 1 and self.submodels[0].is_time_constant()

    def has_constant_gates(self) -> bool:
        return all(m.is_time_constant() for m in self.submodels)

    def max_displacement(self, geom):
        return max(m.max_displacement(geom) for m in self.submodels)

    def displacement_bound(self, t, geom):
        return self.submodels[self.gate_of(t)].displacement_bound(t, geom)


# ---------------------------------------------------------------------------
# Descriptors and velocity-field files


def model_to_descriptor(model: MotionModel, velocity_file: str | None = None) -> dict:
    if isinstance(model, StaticMotion):
        return {"type": "static"}
    if isinstance(model, TranslationMotion):
        return {"type": "translation", "a": model.a, "b": model.b, "stop": model.stop}
    if isinstance(model, MassPreservingDiffeoMotion):
        if velocity_file is None:
            raise ValueError("diffeo descriptor needs a velocity_file path")
        return {"type": "diffeo", "velocity_file": str(velocity_file), "steps": model.flow_steps}
    if isinstance(model, PiecewiseConstantMotion):
        return {
            "type": "gated",
            "times": list(model.gate_times),
            "models": [model_to_descriptor(m, velocity_file) for m in model.submodels],
        }
    raise TypeError(f"unknown motion model {type(model)!r}")


def model_from_descriptor(desc: dict, base_dir: str | Path | None = None) -> MotionModel:
    kind = desc.get("type")
    if kind == "static":
        return StaticMotion()
    if kind == "translation":
        return TranslationMotion(a=float(desc["a"]), b=float(desc["b"]), stop=float(desc.get("stop", 0.75)))
    if kind == "diffeo":
        path = Path(desc["velocity_file"])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        return MassPreservingDiffeoMotion(load_velocity(path), flow_steps=int(desc.get("steps", 32)))
    if kind == "gated":
        subs = [model_from_descriptor(d, base_dir) for d in desc["models"]]
        return PiecewiseConstantMotion(desc["times"], subs)
    raise ValueError(f"unknown motion descriptor type {kind!r}")


def save_velocity(v: VelocityField, path: str | Path) -> None:
    """Two raw f32 planes (vx then vy) plus a JSON sidecar."""
    path = Path(path)
    if path.suffix != ".f32":
        path = path.with_suffix(".f32")
    blob = v.vx.astype("<f4").tobytes() + v.vy.astype("<f4").tobytes()
    path.write_bytes(blob)
    meta = {"nx": v.geom.nx, "ny": v.geom.ny, "extent": list(v.geom.extent), "planes": ["vx", "vy"]}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1) + "\n")


def load_velocity(path: str | Path) -> VelocityField:
    path = Path(path)
    if path.suffix != ".f32":
        path = path.with_suffix(".f32")
    meta = json.loads(path.with_suffix(".json").read_text())
    geom = GridGeometry(meta["nx"], meta["ny"], tuple(meta["extent"]))
    raw = np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float64)
    if raw.size != 2 * geom.npix:
        raise ValueError(f"velocity file has {raw.size} floats, expected {2 * geom.npix}")
    vx = raw[: geom.npix].reshape(geom.ny, geom.nx)
    vy = raw[geom.npix:].reshape(geom.ny, geom.nx)
    return VelocityField(geom, vx, vy)
