"""Computation grids, tabulated basis functions, and linear interpolation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.integrate import cumulative_trapezoid

from .errors import ConfigurationError


@dataclass
class GridSpec:
    """Grids used by the accelerated likelihood.

    ``u_t`` is the uniform grid on ``[0, span]`` (``span = tau_max`` for the
    displacement kernel) where the right temporal networks are tabulated. For
    the absolute-time variant ``span = t_max`` and ``n_t`` is scaled up so the
    node spacing equals that of an ``n_t``-point grid on ``[0, tau_max]``.
    ``u_s`` holds cell centres of a uniform grid over the bounding box of the
    ball ``B(0, a_max)``, restricted to the ball; each carries measure ``da``.
    The barrier grid of a sequence is ``n_bar_t`` equispaced times on
    ``[0, T]`` times ``n_bar_s`` equispaced points per spatial axis of ``S``.
    """

    n_t: int
    n_s: int
    n_bar_t: int
    n_bar_s: int
    span: float
    u_t: np.ndarray
    dt: float
    u_s: np.ndarray
    da: float

    @classmethod
    def for_model(cls, model, n_t=50, n_s=1500, n_bar_t=50, n_bar_s=15):
        if n_t < 2:
            raise ConfigurationError("temporal grid needs at least 2 points")
        if n_bar_t < 1 or n_bar_s < 1 or n_s < 1:
            raise ConfigurationError("grid sizes must be positive")
        span = model.temporal_span
        if span > model.tau_max:
            # absolute-time networks live on [0, t_max]; keep the node spacing of a tau_max grid
            n_t = int(np.ceil(span / model.tau_max * (n_t - 1))) + 1
        u_t = np.linspace(0.0, span, n_t)
        u_s, da = spatial_grid(model.spatial_dim, model.a_max, n_s)
        return cls(int(n_t), int(n_s), int(n_bar_t), int(n_bar_s), span, u_t, span / (n_t - 1), u_s, da)

    @property
    def n_spatial(self):
        return self.u_s.shape[0]

    def barrier_points(self, seq):
        """``(times, locations)`` of the barrier grid for one sequence."""
        times = np.linspace(0.0, seq.T, self.n_bar_t)
        return times, box_points(seq.bounds, self.n_bar_s)


def spatial_grid(spatial_dim, a_max, n_s):
    """Cell-centred grid over ``B(0, a_max)`` with about ``n_s`` points.

    In 2-D the per-axis resolution ``m`` is chosen so that the ball keeps
    about ``n_s`` of the ``m*m`` bounding-box cells.
    """
    if spatial_dim == 0:
        return np.zeros((1, 0)), 1.0
    if not np.isfinite(a_max):
        raise ConfigurationError("spatial models need a finite a_max")
    if spatial_dim == 1:
        h = 2.0 * a_max / n_s
        pts = -a_max + (np.arange(n_s) + 0.5) * h
        return pts[:, None], h
    m = max(2, int(round(np.sqrt(4.0 * n_s / np.pi))))
    h = 2.0 * a_max / m
    axis = -a_max + (np.arange(m) + 0.5) * h
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    pts = pts[np.linalg.norm(pts, axis=1) <= a_max]
    return pts, h * h


def box_points(bounds, per_axis):
    d = bounds.shape[0]
    if d == 0:
        return np.zeros((1, 0))
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in bounds]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def box_cells(bounds, per_axis):
    """Cell centres and cell measure of a uniform partition of ``S``."""
    d = bounds.shape[0]
    if d == 0:
        return np.zeros((1, 0)), 1.0
    axes, vol = [], 1.0
    for lo, hi in bounds:
        h = (hi - lo) / per_axis
        axes.append(lo + (np.arange(per_axis) + 0.5) * h)
        vol *= h
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh]), vol


def interp_matrix(x, span, n):
    """Sparse ``(len(x), n)`` matrix of linear-interpolation weights on ``linspace(0, span, n)``.

    Abscissae are clipped into ``[0, span]``; at ``x == span`` the last node's
    value is returned.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    dt = span / (n - 1)
    u = np.clip(x, 0.0, span) / dt
    idx = np.minimum(np.floor(u).astype(np.int64), n - 2)
    w = u - idx
    rows = np.arange(x.size)
    return sparse.csr_matrix(
        (np.concatenate([1.0 - w, w]), (np.concatenate([rows, rows]), np.concatenate([idx, idx + 1]))),
        shape=(x.size, n))


def cumtrapz_matrix(n, dt):
    """Dense ``(n, n)`` matrix ``C`` with ``C @ f`` the cumulative trapezoid of ``f``."""
    C = np.tril(np.full((n, n), dt))
    C[:, 0] = dt / 2.0
    C[np.arange(n), np.arange(n)] = dt / 2.0
    C[0, 0] = 0.0
    return C


@dataclass
class PhiTable:
    """Right temporal networks tabulated on ``u_t`` and their running integrals.

    ``phi[:, l]`` holds ``phi_l`` on the grid and ``F[:, l]`` the trapezoidal
    cumulative integral (``F[0] = 0``). ``v_grid[:, r]`` holds ``v_r`` on
    ``u_s`` (``None`` for temporal models).
    """

    phi: np.ndarray
    F: np.ndarray
    dt: float
    span: float
    v_grid: np.ndarray | None = None


def build_tables(model, grids):
    """Evaluate ``phi_l`` on ``u_t`` and ``v_r`` on ``u_s`` once each."""
    _check_grids(model, grids)
    phi = np.stack([net.forward(grids.u_t) for net in model.nets["phi"]], axis=1)
    F = cumulative_trapezoid(phi, dx=grids.dt, axis=0, initial=0.0)
    v_grid = None
    if model.spatial_dim:
        v_grid = np.stack([net.forward(grids.u_s) for net in model.nets["v"]], axis=1)
    return PhiTable(phi, F, grids.dt, grids.span, v_grid)


def _check_grids(model, grids):
    if not np.isclose(grids.span, model.temporal_span):
        raise ConfigurationError(f"grid span {grids.span} does not match model span {model.temporal_span}")
    if grids.u_s.shape[1] != model.spatial_dim:
        raise ConfigurationError("spatial grid dimension does not match the model")


def interp_phi(table, l, tau):
    """``phi_l(tau)`` by linear interpolation on the table; 0 beyond the grid."""
    tau = np.asarray(tau, dtype=np.float64)
    flat = tau.reshape(-1)
    W = interp_matrix(flat, table.span, table.phi.shape[0])
    out = W @ table.phi[:, l]
    out[(flat > table.span) | (flat < 0)] = 0.0
    return float(out[0]) if tau.ndim == 0 else out.reshape(tau.shape)


def interp_F(table, l, tau):
    """Running integral ``F_l(tau)``; constant beyond the grid."""
    tau = np.asarray(tau, dtype=np.float64)
    W = interp_matrix(tau.reshape(-1), table.span, table.F.shape[0])
    out = W @ table.F[:, l]
    return float(out[0]) if tau.ndim == 0 else out.reshape(tau.shape)
