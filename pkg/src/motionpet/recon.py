"""Maximum-likelihood reconstruction from list-mode data under known motion.

The negative log-likelihood of an image mu given event kernels Gamma and
the sensitivity f is

    loss(mu) = <mu, f> - sum_{gamma in Gamma} log <mu, gamma>,

minimized over nonnegative mu by the multiplicative fixed-point iteration

    mu_{k+1} = (mu_k / f) * sum_gamma gamma / <mu_k, gamma>.

The iteration decreases the loss monotonically and keeps <mu_k, f> equal
to the number of retained events; both facts are purely algebraic and are
asserted (with float tolerances) by `mlem_run`.  With static motion the
iteration reduces to classical ML-EM on binned counts, and with gated
motion to the per-gate update of `gated_mlem_step`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ._kernels import KernelBuild, build_kernels, kernel_rows
from .grid import DensityImage, GridFunction, GridGeometry, kl_images, pairing
from .motion import MotionModel, PiecewiseConstantMotion, StaticMotion
from .projector import Sinogram, StripProjector
from .simulate import Event, ListModeData

__all__ = [
    "SensitivityImage",
    "EventKernel",
    "KernelSet",
    "ReconState",
    "DomainViolationError",
    "sensitivity",
    "event_kernels",
    "kernel_set_from_rows",
    "loss",
    "loss_gradient",
    "mlem_step",
    "mlem_run",
    "default_mu0",
    "classical_mlem_step",
    "gated_mlem_step",
    "gated_operators",
    "kkt_residual",
    "surrogate_gap",
    "support_union",
]

logger = logging.getLogger(__name__)

DEFAULT_C_FLOOR_REL = 1e-6
DEFAULT_SUPPORT_EPS_REL = 1e-10
DEFAULT_MEMORY_BUDGET = 2 << 30


class DomainViolationError(ValueError):
    """Some event kernel has zero pairing with the current image."""

    def __init__(self, event: Event, message: str | None = None):
        self.event = event
        super().__init__(
            message
            or f"<mu, gamma> = 0 for event (detector={event.detector}, t={event.time:.6g}); "
            "the image is outside the likelihood domain"
        )


@dataclass(frozen=True)
class SensitivityImage:
    """f(x): expected detections per unit activity at x, with support mask.

    Pixels with f below c_floor are excluded from every division and
    frozen at zero in the iteration; activity there is never observable.
    """

    geom: GridGeometry
    values: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)
    c_floor: float

    def __post_init__(self):
        vals = np.array(np.asarray(self.values, dtype=np.float64), copy=True)
        msk = np.array(np.asarray(self.mask, dtype=bool), copy=True)
        if vals.shape != (self.geom.ny, self.geom.nx) or msk.shape != vals.shape:
            raise ValueError("sensitivity arrays do not match the grid")
        if np.any(vals < 0):
            raise ValueError("sensitivity must be nonnegative")
        if np.any(vals[msk] < self.c_floor):
            raise ValueError("mask inconsistent with c_floor")
        vals.flags.writeable = False
        msk.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "mask", msk)

    def as_function(self) -> GridFunction:
        return GridFunction(self.geom, self.values)


@dataclass(frozen=True)
class EventKernel:
    """One event's kernel gamma = W_t* a_i with an optional cached pairing."""

    event: Event
    gamma: GridFunction
    inner: float | None = None


class KernelSet:
    """The collection Gamma of event kernels, stored as grouped sparse rows.

    Events provably sharing a kernel (same detector within a time-constant
    motion or gate) are collapsed into one row with an integer multiplicity,
    which keeps static and gated runs identical to their classical
    counterparts at the floating-point level.
    """

    def __init__(self, geom: GridGeometry, build: KernelBuild):
        self.geom = geom
        self.rows = build.rows
        self.weights = build.weights
        self.group_det = build.group_det
        self.group_time = build.group_time
        self.event_det = build.event_det
        self.event_time = build.event_time
        self.event_group = build.event_group
        self.dropped_det = build.dropped_det
        self.dropped_time = build.dropped_time
        self._rows_t = self.rows.T.tocsr()

    @property
    def n(self) -> int:
        """Number of retained events (kernel multiplicities included)."""
        return int(round(float(self.weights.sum())))

    @property
    def n_groups(self) -> int:
        return self.rows.shape[0]

    @property
    def n_dropped(self) -> int:
        return int(self.dropped_det.size)

    def __len__(self) -> int:
        return int(self.event_det.size)

    def __getitem__(self, j: int) -> EventKernel:
        g = self.event_group[j]
        row = np.asarray(self.rows.getrow(int(g)).todense()).reshape(self.geom.ny, self.geom.nx)
        return EventKernel(
            Event(int(self.event_det[j]), float(self.event_time[j])),
            GridFunction(self.geom, row),
        )

    def __iter__(self):
        return (self[j] for j in range(len(self)))

    def inners(self, mu: DensityImage) -> np.ndarray:
        """<mu, gamma> per kernel group."""
        if mu.geom != self.geom:
            raise ValueError("geometry mismatch")
        return self.geom.pixel_area * (self.rows @ mu.values.ravel())

    def backproject(self, coeffs: np.ndarray) -> np.ndarray:
        """sum_g coeffs[g] * gamma_g as a flat array of function values."""
        return self._rows_t @ coeffs

    def first_zero_event(self, inners: np.ndarray) -> Event:
        bad_group = int(np.argmax(inners <= 0.0))
        j = int(np.argmax(self.event_group == bad_group))
        return Event(int(self.event_det[j]), float(self.event_time[j]))

    def storage_bytes(self) -> int:
        return int(self.rows.data.nbytes + self.rows.indices.nbytes + self.rows.indptr.nbytes) * 2


def sensitivity(
    model: MotionModel,
    proj: StripProjector,
    n_time_samples: int = 64,
    c_floor_rel: float = DEFAULT_C_FLOOR_REL,
) -> SensitivityImage:
    """f = integral over [0,1] of W_t* A* 1 dt on the grid.

    Static motion gives exactly A*1.  Piecewise-constant motion uses exact
    gate weighting, f = sum_s dt_s W_s* A* 1.  Anything else is composite
    midpoint quadrature with n_time_samples nodes, which avoids evaluating
    possibly discontinuous gated motion at gate edges.
    """
    if n_time_samples < 1:
        raise ValueError("n_time_samples must be >= 1")
    aones = proj.adjoint_ones()
    if isinstance(model, StaticMotion):
        values = aones.values.copy()
    elif isinstance(model, PiecewiseConstantMotion):
        values = np.zeros_like(aones.values)
        times = model.gate_times
        for s, sub in enumerate(model.submodels):
            rep = 0.5 * (times[s] + times[s + 1])
            dt = times[s + 1] - times[s]
            values += dt * model.adjoint_apply(rep, aones).values
    else:
        values = np.zeros_like(aones.values)
        for j in range(n_time_samples):
            t = (j + 0.5) / n_time_samples
            values += model.adjoint_apply(t, aones).values
        values /= n_time_samples
    vmax = float(values.max())
    if vmax <= 0.0:
        raise ValueError("sensitivity is identically zero; nothing is ever measurable")
    c_floor = c_floor_rel * vmax
    mask = values >= c_floor
    return SensitivityImage(proj.geom, values, mask, c_floor)


def event_kernels(
    data: ListModeData,
    model: MotionModel,
    proj: StripProjector,
    memory_budget_bytes: int = DEFAULT_MEMORY_BUDGET,
) -> KernelSet:
    """One kernel gamma = W_t* a_i per event, grouped where provably equal.

    Kernels that vanish identically on the grid (an event warped entirely
    out of the field of view) are dropped with a warning; the retained
    count is the `n` that the mass-conservation identity refers to.
    """
    build = build_kernels(model, proj, data.detectors, data.times)
    ks = KernelSet(proj.geom, build)
    if ks.n_dropped:
        logger.warning(
            "dropped %d event(s) whose kernel vanishes on the grid (first: detector=%d, t=%.6g)",
            ks.n_dropped,
            int(ks.dropped_det[0]),
            float(ks.dropped_time[0]),
        )
    if ks.storage_bytes() > memory_budget_bytes:
        logger.warning(
            "kernel storage %.1f MiB exceeds the budget %.1f MiB; "
            "consider a coarser grid or a larger budget",
            ks.storage_bytes() / 2**20,
            memory_budget_bytes / 2**20,
        )
    return ks


def kernel_set_from_rows(geom: GridGeometry, det, times, rows: sp.spmatrix) -> KernelSet:
    """Assemble a KernelSet from explicit kernel rows (one per event)."""
    det = np.asarray(det, dtype=np.int64)
    times = np.asarray(times, dtype=np.float64)
    rows = sp.csr_matrix(rows, copy=True)
    alive = np.diff(rows.indptr) > 0
    keep = np.nonzero(alive)[0]
    build = KernelBuild(
        rows=rows[keep],
        weights=np.ones(keep.size),
        group_det=det[keep],
        group_time=times[keep],
        event_det=det[keep],
        event_time=times[keep],
        event_group=np.arange(keep.size, dtype=np.int64),
        dropped_det=det[~alive],
        dropped_time=times[~alive],
    )
    return KernelSet(geom, build)


def loss(mu: DensityImage, f: SensitivityImage, kernels: KernelSet) -> float:
    """<mu, f> - sum log <mu, gamma>; +inf outside the likelihood domain."""
    lin = pairing(mu, f.as_function())
    if len(kernels) == 0:
        return lin
    inners = kernels.inners(mu)
    if np.any(inners <= 0.0):
        return math.inf
    return lin - float(np.dot(kernels.weights, np.log(inners)))


def loss_gradient(mu: DensityImage, f: SensitivityImage, kernels: KernelSet) -> GridFunction:
    """grad loss = f - sum_gamma gamma / <mu, gamma>."""
    if len(kernels) == 0:
        return f.as_function()
    inners = kernels.inners(mu)
    if np.any(inners <= 0.0):
        raise DomainViolationError(kernels.first_zero_event(inners))
    acc = kernels.backproject(kernels.weights / inners)
    return GridFunction(mu.geom, f.values - acc.reshape(mu.geom.ny, mu.geom.nx))


def mlem_step(mu: DensityImage, f: SensitivityImage, kernels: KernelSet) -> DensityImage:
    """One multiplicative update mu * (sum_gamma gamma/<mu,gamma>) / f.

    The division is restricted to the sensitivity mask; outside it the
    iterate is zero.  Raises DomainViolationError when some kernel has
    zero pairing with mu, naming the offending event.
    """
    if mu.geom != f.geom:
        raise ValueError("geometry mismatch")
    if len(kernels) == 0:
        return DensityImage(mu.geom, np.zeros_like(mu.values))
    inners = kernels.inners(mu)
    if np.any(inners <= 0.0):
        raise DomainViolationError(kernels.first_zero_event(inners))
    acc = kernels.backproject(kernels.weights / inners).reshape(mu.geom.ny, mu.geom.nx)
    out = np.zeros_like(mu.values)
    m = f.mask
    out[m] = mu.values[m] * acc[m] / f.values[m]
    return DensityImage(mu.geom, out)


def default_mu0(f: SensitivityImage, n: int) -> DensityImage:
    """Uniform positive start on the mask, scaled so <mu0, f> = n."""
    vals = np.zeros((f.geom.ny, f.geom.nx))
    mass_f = f.geom.pixel_area * float(f.values[f.mask].sum())
    if mass_f <= 0.0:
        raise ValueError("sensitivity mask is empty")
    vals[f.mask] = n / mass_f if n > 0 else 1.0
    return DensityImage(f.geom, vals)


@dataclass
class ReconState:
    """Iterate plus the running loss/mass diagnostics of an ML-EM run."""

    mu: DensityImage
    k: int
    loss_history: list[float]
    mass_history: list[float]
    gap_history: list[float] = field(default_factory=list)
    kkt_history: list[tuple[float, float]] = field(default_factory=list)


def mlem_run(
    mu0: DensityImage | None,
    f: SensitivityImage,
    kernels: KernelSet,
    k_star: int,
    diagnostics: bool = False,
    monotone_tol_rel: float = 1e-9,
    mass_tol_rel: float = 1e-9,
) -> ReconState:
    """Run k_star ML-EM iterations, recording and checking the invariants.

    Raises RuntimeError if the loss increases beyond a float tolerance or
    the event mass <mu_k, f> drifts from the retained event count.
    """
    if k_star < 0:
        raise ValueError("k_star must be >= 0")
    n = kernels.n
    mu = mu0 if mu0 is not None else default_mu0(f, n)
    state = ReconState(
        mu=mu,
        k=0,
        loss_history=[loss(mu, f, kernels)],
        mass_history=[pairing(mu, f.as_function())],
    )
    loss_scale = abs(state.loss_history[0]) if math.isfinite(state.loss_history[0]) else 1.0
    for k in range(1, k_star + 1):
        prev = state.mu
        mu = mlem_step(prev, f, kernels)
        lk = loss(mu, f, kernels)
        mk = pairing(mu, f.as_function())
        state.mu = mu
        state.k = k
        state.loss_history.append(lk)
        state.mass_history.append(mk)
        if lk > state.loss_history[-2] + monotone_tol_rel * loss_scale:
            raise RuntimeError(
                f"loss increased at iteration {k}: {state.loss_history[-2]!r} -> {lk!r}"
            )
        if n > 0 and abs(mk - n) > mass_tol_rel * n:
            raise RuntimeError(f"event mass drifted at iteration {k}: <mu,f>={mk!r}, n={n}")
        if diagnostics:
            state.gap_history.append(surrogate_gap(prev, mu, f))
            state.kkt_history.append(kkt_residual(mu, f, kernels))
    return state


def classical_mlem_step(
    mu: DensityImage,
    y: Sinogram,
    proj: StripProjector,
    c_floor_rel: float = DEFAULT_C_FLOOR_REL,
) -> DensityImage:
    """Standard ML-EM update mu * A*(y / A mu) / A*1 on the sensitivity mask.

    Bins with y_i = 0 contribute nothing; a bin with y_i > 0 but
    (A mu)_i = 0 puts mu outside the likelihood domain.
    """
    if mu.geom != proj.geom:
        raise ValueError("geometry mismatch")
    proj_mu = proj.forward(mu).values
    yv = y.values
    bad = (yv > 0) & (proj_mu <= 0.0)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise DomainViolationError(
            Event(i, 0.0), f"(A mu)_{i} = 0 but y_{i} = {yv[i]:g}; outside the likelihood domain"
        )
    ratio = np.zeros_like(yv)
    pos = yv > 0
    ratio[pos] = yv[pos] / proj_mu[pos]
    upd = proj.adjoint(ratio).values
    denom = proj.adjoint_ones().values
    mask = denom >= c_floor_rel * float(denom.max())
    out = np.zeros_like(mu.values)
    out[mask] = mu.values[mask] * upd[mask] / denom[mask]
    return DensityImage(mu.geom, out)


def gated_operators(model: PiecewiseConstantMotion, proj: StripProjector) -> list[sp.csr_matrix]:
    """Per-gate warped system matrices: row i of gate s is W_s* a_i."""
    ops = []
    all_det = np.arange(proj.ndet)
    times = model.gate_times
    for s in range(model.n_gates):
        rep = 0.5 * (times[s] + times[s + 1])
        ops.append(kernel_rows(model.submodels[s], proj, all_det, np.full(proj.ndet, rep)))
    return ops


def gated_mlem_step(
    mu: DensityImage,
    gated_counts: list[Sinogram] | list[np.ndarray],
    model: PiecewiseConstantMotion,
    proj: StripProjector,
    operators: list[sp.csr_matrix] | None = None,
    c_floor_rel: float = DEFAULT_C_FLOOR_REL,
) -> DensityImage:
    """ML-EM for gated data:

        mu * sum_s A_s*(n^s / A_s mu) / sum_s dt_s A_s* 1,  A_s = A W_s.

    Algebraically identical to `mlem_step` run on the same events grouped
    by gate.
    """
    if len(gated_counts) != model.n_gates:
        raise ValueError("need one count vector per gate")
    if operators is None:
        operators = gated_operators(model, proj)
    area = mu.geom.pixel_area
    flat = mu.values.ravel()
    dts = model.gate_durations()
    num = np.zeros(mu.geom.npix)
    den = np.zeros(mu.geom.npix)
    for s, (mat, counts) in enumerate(zip(operators, gated_counts)):
        yv = counts.values if isinstance(counts, Sinogram) else np.asarray(counts, dtype=np.float64)
        proj_s = area * (mat @ flat)
        bad = (yv > 0) & (proj_s <= 0.0)
        if np.any(bad):
            i = int(np.argmax(bad))
            raise DomainViolationError(
                Event(i, 0.0),
                f"gate {s}: (A_s mu)_{i} = 0 but n^{s}_{i} = {yv[i]:g}",
            )
        ratio = np.zeros_like(yv)
        pos = yv > 0
        ratio[pos] = yv[pos] / proj_s[pos]
        num += mat.T @ ratio
        den += dts[s] * (mat.T @ np.ones(proj.ndet))
    mask = (den >= c_floor_rel * float(den.max())).reshape(mu.geom.ny, mu.geom.nx)
    num2 = num.reshape(mu.geom.ny, mu.geom.nx)
    den2 = den.reshape(mu.geom.ny, mu.geom.nx)
    out = np.zeros_like(mu.values)
    out[mask] = mu.values[mask] * num2[mask] / den2[mask]
    return DensityImage(mu.geom, out)


def kkt_residual(
    mu: DensityImage,
    f: SensitivityImage,
    kernels: KernelSet,
    support_eps_rel: float = DEFAULT_SUPPORT_EPS_REL,
) -> tuple[float, float]:
    """First-order optimality residuals at mu.

    Returns (min over the mask of grad loss, max over supp(mu) of
    |grad loss|); at a minimizer the first is >= 0 and the second is 0.
    """
    grad = loss_gradient(mu, f, kernels).values
    min_grad = float(grad[f.mask].min()) if np.any(f.mask) else 0.0
    eps = support_eps_rel * float(mu.values.max()) if mu.values.max() > 0 else 0.0
    supp = mu.values > eps
    supp_grad_max = float(np.abs(grad[supp]).max()) if np.any(supp) else 0.0
    return min_grad, supp_grad_max


def surrogate_gap(mu_k: DensityImage, mu_k1: DensityImage, f: SensitivityImage) -> float:
    """D(f mu_{k+1} || f mu_k): the exact per-step decrease of the EM
    surrogate, sandwiched between 0 and the loss decrease."""
    p = DensityImage(mu_k1.geom, f.values * mu_k1.values)
    q = DensityImage(mu_k.geom, f.values * mu_k.values)
    return kl_images(p, q)


def support_union(kernels: KernelSet, eps: float = 0.0) -> np.ndarray:
    """Boolean mask of pixels where some kernel exceeds eps."""
    geom = kernels.geom
    mask = np.zeros(geom.npix, dtype=bool)
    rows = kernels.rows
    keep = rows.data > eps
    mask[rows.indices[keep]] = True
    return mask.reshape(geom.ny, geom.nx)
