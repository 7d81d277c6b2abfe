"""Sparse event-kernel construction.

An event kernel is the detector profile pulled back through the motion at
the event time, gamma = W_t* a_i, sampled at pixel centers.  Kernels are
stored as sparse rows; values agree exactly with the dense pull-back
`model.adjoint_apply(t, profile(i))` because both paths share the same
warp and interpolation arithmetic, restricted here to the pixels that can
possibly receive mass (a tangential slice of the grid widened by the
motion's maximum displacement).

For time-constant motion (static, frozen translations, constant gates)
events sharing a detector and gate share one kernel; the builder groups
them and returns per-group multiplicities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .grid import DensityImage, GridGeometry
from .motion import (
    MassPreservingDiffeoMotion,
    MotionModel,
    PiecewiseConstantMotion,
    StaticMotion,
    TranslationMotion,
)
from .projector import StripProjector

_CHUNK = 1024


def _angle_planes(proj: StripProjector):
    """Dense per-angle encoding of all detector profiles.

    For angle a and pixel p the profile values a_(a,k)[p] are nonzero only
    for a short contiguous run of tangential bins k; K0 stores the first
    such bin and V[slot] the values, so a_(a,k)[p] = V[k-K0] with zero
    outside the run.  This lets a batch of events with mixed detectors
    sample their profiles with plain gathers.
    """
    cache = getattr(proj, "_angle_plane_cache", None)
    if cache is None:
        geom = proj.geom
        ntang = proj.config.n_tangential
        npix = geom.npix
        coo = proj.matrix.tocoo()
        a_idx = coo.row // ntang
        k_idx = coo.row % ntang
        off = a_idx * npix + coo.col
        K0 = np.full(proj.config.n_angles * npix, ntang + 1, dtype=np.int64)
        np.minimum.at(K0, off, k_idx)
        slots = k_idx - K0[off]
        n_slots = int(slots.max()) + 1 if slots.size else 1
        V = np.zeros((n_slots, proj.config.n_angles * npix))
        V[slots, off] = coo.data
        cache = (K0, V, n_slots)
        proj._angle_plane_cache = cache
    return cache


def _plane_gather(planes, npix: int, nx: int, ny: int, a_pt, k_pt, gx, gy):
    """gamma values a_(a,k)(gx, gy) by bilinear gather, zero off-lattice.

    Bit-identical to scattering the profile into a dense image and calling
    gather_zero, because the corner weights and accumulation order match.
    """
    K0, V, n_slots = planes
    ix = np.floor(gx).astype(np.int64)
    iy = np.floor(gy).astype(np.int64)
    fx = gx - ix
    fy = gy - iy
    acc = np.zeros(gx.shape)
    base_a = a_pt * npix
    for dy_c, dx_c, w in (
        (0, 0, (1 - fx) * (1 - fy)),
        (0, 1, fx * (1 - fy)),
        (1, 0, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        cx = ix + dx_c
        cy = iy + dy_c
        ok = (cx >= 0) & (cx < nx) & (cy >= 0) & (cy < ny)
        if not np.any(ok):
            continue
        off = base_a[ok] + cy[ok] * nx + cx[ok]
        slot = k_pt[ok] - K0[off]
        val = np.zeros(off.size)
        for s in range(n_slots):
            sel = slot == s
            if np.any(sel):
                val[sel] = V[s, off[sel]]
        acc[ok] += w[ok] * val
    return acc


class _SliceIndex:
    """Per (angle, displacement bucket) pixel lists sorted tangentially.

    The candidate pixels of an event are those whose tangential coordinate
    falls within the detector bin widened by a displacement bound; using
    per-pixel bounds bucketed into bands keeps the candidate count close
    to the true warped-strip support.
    """

    def __init__(self, proj: StripProjector, d_pix: np.ndarray, subset: np.ndarray | None = None, n_buckets: int = 4):
        geom = proj.geom
        if subset is None:
            subset = np.arange(geom.npix)
        pts = geom.flat_centers()[subset]
        d = d_pix[subset]
        dmax = float(d.max()) if d.size else 0.0
        if dmax <= 0.0:
            n_buckets = 1
        fracs = [2.0 ** (b + 1 - n_buckets) for b in range(n_buckets)]
        self.bucket_dmax = [dmax * f for f in fracs]
        edges = np.asarray(self.bucket_dmax[:-1])
        bucket_of = np.searchsorted(edges, d, side="left")
        self.n_buckets = n_buckets
        self.angles = []
        for a in range(proj.config.n_angles):
            theta = a * math.pi / proj.config.n_angles
            s = pts[:, 0] * math.cos(theta) + pts[:, 1] * math.sin(theta)
            per_bucket = []
            for b in range(n_buckets):
                in_b = np.nonzero(bucket_of == b)[0]
                order = in_b[np.argsort(s[in_b], kind="stable")]
                per_bucket.append((subset[order], s[order]))
            self.angles.append(per_bucket)

    def candidates(self, angle: int, lo: float, hi: float, t_bound: float, ramp: float):
        """Concatenated candidate pixel indices for one event."""
        pieces = []
        for b, (idx, s) in enumerate(self.angles[angle]):
            widen = min(self.bucket_dmax[b], t_bound) + ramp
            i0, i1 = np.searchsorted(s, (lo - widen, hi + widen))
            if i1 > i0:
                pieces.append(idx[i0:i1])
        if not pieces:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(pieces) if len(pieces) > 1 else pieces[0]


def _translation_rows(model: TranslationMotion, proj: StripProjector, det, times) -> sp.csr_matrix:
    """Kernels for rigid x-shifts: bilinear resampling of the sparse profile.

    Sampling a_i at x + c mixes at most two x-neighbours, so each source
    nonzero scatters to two target pixels with weights (1-f, f).
    """
    geom = proj.geom
    nx = geom.nx
    mat = proj.matrix
    nev = len(det)
    starts = mat.indptr[det]
    counts = mat.indptr[det + 1] - starts
    total = int(counts.sum())
    if total == 0:
        return sp.csr_matrix((nev, geom.npix))
    cum0 = np.concatenate([[0], np.cumsum(counts)[:-1]])
    pos = np.arange(total) + np.repeat(starts - cum0, counts)
    src = mat.indices[pos]
    vals = mat.data[pos]
    event_id = np.repeat(np.arange(nev, dtype=np.int64), counts)
    shifts = np.where(times <= model.stop, model.a * times + model.b, 0.0)
    sigma = shifts / geom.dx
    m = np.floor(sigma)
    frac = sigma - m
    m = m.astype(np.int64)
    src_ix = src % nx
    src_rest = src - src_ix
    rows_out, cols_out, data_out = [], [], []
    for dm, w in ((m, 1.0 - frac), (m + 1, frac)):
        tgt_ix = src_ix - np.repeat(dm, counts)
        wv = np.repeat(w, counts) * vals
        ok = (tgt_ix >= 0) & (tgt_ix < nx) & (wv != 0.0)
        rows_out.append(event_id[ok])
        cols_out.append(src_rest[ok] + tgt_ix[ok])
        data_out.append(wv[ok])
    out = sp.coo_matrix(
        (np.concatenate(data_out), (np.concatenate(rows_out), np.concatenate(cols_out))),
        shape=(nev, geom.npix),
    ).tocsr()
    out.sum_duplicates()
    return out


def _full_slice_index(model: MassPreservingDiffeoMotion, proj: StripProjector) -> _SliceIndex:
    cache = getattr(model, "_slice_cache", None)
    if cache is None:
        cache = {}
        model._slice_cache = cache
    key = (proj.geom, proj.config)
    if key not in cache:
        cache[key] = _SliceIndex(proj, model.pixel_displacement(proj.geom))
    return cache[key]


def _diffeo_chunks(
    model: MassPreservingDiffeoMotion,
    proj: StripProjector,
    det: np.ndarray,
    times: np.ndarray,
    slice_index: _SliceIndex,
    target_pts: int = 1_200_000,
):
    """Yield (event ordinal, pixel index, kernel value) for batches of events.

    Values match the dense pull-back `adjoint_apply(t, profile(i))` exactly:
    the station gather, partial RK4 step, and bilinear profile gather use
    the same arithmetic, merely restricted to the candidate pixels.
    """
    geom = proj.geom
    npix = geom.npix
    planes = _angle_planes(proj)
    tx, ty, flow, S = model.station_state()
    txf, tyf = tx.reshape(-1), ty.reshape(-1)
    ntang = proj.config.n_tangential
    fov = proj.fov_radius
    width = proj.detector_width
    ramp = 3.0 * math.hypot(geom.dx, geom.dy)
    pieces: list[np.ndarray] = []
    meta: list[tuple[int, int, float, int, int]] = []  # (event, station, h, angle, bin)
    buffered = 0

    def flush():
        nonlocal pieces, meta, buffered
        if not pieces:
            return None
        lens = np.array([p.size for p in pieces], dtype=np.int64)
        idx_pt = np.concatenate(pieces)
        rep = np.repeat(np.arange(len(pieces)), lens)
        marr = np.array(meta, dtype=np.float64)
        ev_pt = marr[rep, 0].astype(np.int64)
        j_pt = marr[rep, 1].astype(np.int64)
        h_pt = marr[rep, 2]
        a_pt = marr[rep, 3].astype(np.int64)
        k_pt = marr[rep, 4].astype(np.int64)
        gx = txf[j_pt * npix + idx_pt]
        gy = tyf[j_pt * npix + idx_pt]
        gx, gy = flow.rk4(gx, gy, h_pt)
        val = _plane_gather(planes, npix, geom.nx, geom.ny, a_pt, k_pt, gx, gy)
        pieces, meta, buffered = [], [], 0
        return ev_pt, idx_pt, val

    for e in range(det.size):
        i = int(det[e])
        t = float(times[e])
        a, k = i // ntang, i % ntang
        j = min(int(t * S), S - 1) if t < 1.0 else S
        h = t - j / S
        lo = -fov + k * width
        hi = lo + width
        cand = slice_index.candidates(a, lo, hi, model.displacement_bound(t, geom), ramp)
        if cand.size == 0:
            continue
        pieces.append(cand)
        meta.append((e, j, h, a, k))
        buffered += cand.size
        if buffered >= target_pts:
            out = flush()
            if out is not None:
                yield out
    out = flush()
    if out is not None:
        yield out


def _warped_rows(model: MotionModel, proj: StripProjector, det, times) -> sp.csr_matrix:
    """Kernels under a diffeomorphic flow, via batched candidate warping."""
    if not isinstance(model, MassPreservingDiffeoMotion):
        raise TypeError(f"no kernel builder for motion model {type(model)!r}")
    geom = proj.geom
    slice_index = _full_slice_index(model, proj)
    rows_out, cols_out, data_out = [], [], []
    for ev_pt, idx_pt, val in _diffeo_chunks(model, proj, det, times, slice_index):
        nz = val != 0.0
        if np.any(nz):
            rows_out.append(ev_pt[nz])
            cols_out.append(idx_pt[nz])
            data_out.append(val[nz])
    if rows_out:
        return sp.coo_matrix(
            (np.concatenate(data_out), (np.concatenate(rows_out), np.concatenate(cols_out))),
            shape=(len(det), geom.npix),
        ).tocsr()
    return sp.csr_matrix((len(det), geom.npix))


def kernel_rows(model: MotionModel, proj: StripProjector, det, times) -> sp.csr_matrix:
    """Sparse kernel rows gamma_j for events (det[j], times[j]), input order."""
    det = np.asarray(det, dtype=np.int64)
    times = np.asarray(times, dtype=np.float64)
    if isinstance(model, StaticMotion):
        return proj.matrix[det]
    if isinstance(model, TranslationMotion):
        return _translation_rows(model, proj, det, times)
    if isinstance(model, PiecewiseConstantMotion):
        gates = np.array([model.gate_of(t) for t in times], dtype=np.int64)
        parts = []
        index_parts = []
        for s in range(model.n_gates):
            in_gate = np.nonzero(gates == s)[0]
            if in_gate.size == 0:
                continue
            parts.append(kernel_rows(model.submodels[s], proj, det[in_gate], times[in_gate]))
            index_parts.append(in_gate)
        if not parts:
            return sp.csr_matrix((len(det), proj.geom.npix))
        stacked = sp.vstack(parts, format="csr")
        perm = np.concatenate(index_parts)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        return stacked[inv]
    return _warped_rows(model, proj, det, times)


def _warped_intensities(mu: DensityImage, model: MotionModel, proj: StripProjector, det, times) -> np.ndarray:
    """Pairings <mu, gamma> evaluated on supp(mu) intersected with the
    kernel's candidate slice; exact because gamma vanishes off the slice."""
    if not isinstance(model, MassPreservingDiffeoMotion):
        raise TypeError(f"no intensity evaluator for motion model {type(model)!r}")
    geom = proj.geom
    flat = mu.values.ravel()
    supp = np.nonzero(flat > 0)[0]
    if supp.size == 0:
        return np.zeros(det.size)
    slice_index = _SliceIndex(proj, model.pixel_displacement(geom), subset=supp)
    out = np.zeros(det.size)
    for ev_pt, idx_pt, val in _diffeo_chunks(model, proj, det, times, slice_index):
        out += np.bincount(ev_pt, weights=flat[idx_pt] * val, minlength=det.size)
    return geom.pixel_area * out


def warp_splat(model: MotionModel, t: float, mu: DensityImage) -> np.ndarray:
    """Exact transpose of the zero-padded bilinear pull-back (scatter).

    Forward-projecting the result reproduces <mu, W_t* a_i> for every
    detector at once, which makes it the right tool for evaluating all
    intensities on a time grid.
    """
    geom = mu.geom
    gx, gy = model.warp_pixels_grid(t, geom)
    flat = mu.values.ravel()
    ix = np.floor(gx).astype(np.int64)
    iy = np.floor(gy).astype(np.int64)
    fx = gx - ix
    fy = gy - iy
    out = np.zeros(geom.npix)
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
            out += np.bincount(cy[ok] * geom.nx + cx[ok], weights=(w * flat)[ok], minlength=geom.npix)
    return out


def candidate_intensities(mu: DensityImage, model: MotionModel, proj: StripProjector, det, times) -> np.ndarray:
    """beta_i(t) = <mu, W_t* a_i> for a batch of (detector, time) pairs."""
    det = np.asarray(det, dtype=np.int64)
    times = np.asarray(times, dtype=np.float64)
    if isinstance(model, StaticMotion):
        fwd = proj.forward(mu).values
        return fwd[det]
    if isinstance(model, PiecewiseConstantMotion):
        gates = np.array([model.gate_of(t) for t in times], dtype=np.int64)
        out = np.zeros(det.size)
        for s in range(model.n_gates):
            in_gate = np.nonzero(gates == s)[0]
            if in_gate.size:
                out[in_gate] = candidate_intensities(
                    mu, model.submodels[s], proj, det[in_gate], times[in_gate]
                )
        return out
    if isinstance(model, TranslationMotion):
        flat = mu.values.ravel()
        area = mu.geom.pixel_area
        out = np.empty(det.size)
        for start in range(0, det.size, _CHUNK):
            sl = slice(start, min(start + _CHUNK, det.size))
            rows = kernel_rows(model, proj, det[sl], times[sl])
            out[sl] = area * (rows @ flat)
        return out
    return _warped_intensities(mu, model, proj, det, times)


@dataclass
class KernelBuild:
    """Grouped kernel matrix plus the event bookkeeping behind it."""

    rows: sp.csr_matrix          # (n_groups, npix)
    weights: np.ndarray          # event multiplicity per group
    group_det: np.ndarray        # representative detector per group
    group_time: np.ndarray       # representative time per group
    event_det: np.ndarray        # retained events, original order
    event_time: np.ndarray
    event_group: np.ndarray      # retained event -> group row
    dropped_det: np.ndarray      # events whose kernel vanished on the grid
    dropped_time: np.ndarray


def _group_events(model: MotionModel, det: np.ndarray, times: np.ndarray):
    """Group events that provably share a kernel; None means no grouping."""
    if isinstance(model, StaticMotion) or (
        isinstance(model, TranslationMotion) and model.is_time_constant()
    ):
        return det.astype(np.int64)
    if isinstance(model, PiecewiseConstantMotion) and model.has_constant_gates():
        gates = np.array([model.gate_of(t) for t in times], dtype=np.int64)
        return gates * np.int64(det.max() + 1) + det
    return None


def build_kernels(model: MotionModel, proj: StripProjector, det, times) -> KernelBuild:
    det = np.asarray(det, dtype=np.int64)
    times = np.asarray(times, dtype=np.float64)
    if det.size == 0:
        empty_i = np.zeros(0, dtype=np.int64)
        empty_f = np.zeros(0)
        return KernelBuild(
            sp.csr_matrix((0, proj.geom.npix)), empty_f, empty_i, empty_f,
            empty_i, empty_f, empty_i, empty_i, empty_f,
        )
    keys = _group_events(model, det, times)
    if keys is None:
        group_det, group_time = det, times
        weights = np.ones(det.size)
        event_group = np.arange(det.size, dtype=np.int64)
    else:
        _, first, event_group, counts = np.unique(keys, return_index=True, return_inverse=True, return_counts=True)
        group_det = det[first]
        group_time = times[first]
        weights = counts.astype(np.float64)
    rows = sp.csr_matrix((0, proj.geom.npix))
    parts = []
    for start in range(0, group_det.size, _CHUNK):
        sl = slice(start, min(start + _CHUNK, group_det.size))
        parts.append(kernel_rows(model, proj, group_det[sl], group_time[sl]))
    rows = sp.vstack(parts, format="csr") if len(parts) > 1 else parts[0]
    nnz_per_row = np.diff(rows.indptr)
    alive = nnz_per_row > 0
    if np.all(alive):
        keep_events = np.ones(det.size, dtype=bool)
    else:
        keep_group = np.nonzero(alive)[0]
        remap = -np.ones(group_det.size, dtype=np.int64)
        remap[keep_group] = np.arange(keep_group.size)
        keep_events = remap[event_group] >= 0
        rows = rows[keep_group]
        weights = weights[keep_group]
        group_det = group_det[keep_group]
        group_time = group_time[keep_group]
        event_group = remap[event_group]
    return KernelBuild(
        rows=rows,
        weights=weights,
        group_det=group_det,
        group_time=group_time,
        event_det=det[keep_events],
        event_time=times[keep_events],
        event_group=event_group[keep_events],
        dropped_det=det[~keep_events],
        dropped_time=times[~keep_events],
    )
