"""Metrics, next-event prediction and kernel rank analysis."""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid

from .errors import ConfigurationError, DomainError
from .grids import GridSpec, box_cells
from .likelihood import intensity_at, log_likelihoods
from .model import KernelModel, kernel_eval
from .simulate import TrueModel

log = logging.getLogger(__name__)

PARAMETERIZATIONS = ("history-time", "history-displacement")
PREDICTION_TASKS = ("time-RMSE", "time-MAE", "location-MAE", "type-accuracy")


# ----------------------------------------------------------------------------
# Log-likelihood and MRE
# ----------------------------------------------------------------------------

def sequence_logliks(model, seqs, grids=None):
    """Per-sequence log-likelihoods for a fitted or a ground-truth model."""
    if isinstance(model, TrueModel):
        return np.array([model.log_likelihood(s) for s in seqs])
    grids = grids or GridSpec.for_model(model)
    return np.asarray(log_likelihoods(model, list(seqs), grids)) if seqs else np.zeros(0)


def test_loglik_per_event(model, seqs, grids=None):
    """``sum of sequence log-likelihoods / total number of events``."""
    n = sum(len(s) for s in seqs)
    if n == 0:
        raise ConfigurationError("test set has no events")
    return float(np.sum(sequence_logliks(model, seqs, grids)) / n)


def eval_grid(seq, n_t=200, n_s=20):
    """Equispaced times on ``[0, T]`` and cell centres of ``S`` used for MRE."""
    times = np.linspace(0.0, seq.T, n_t)
    locs = box_cells(seq.bounds, n_s)[0] if seq.spatial_dim else None
    return times, locs


def grid_intensity(model, seq, times, locs=None, grids=None):
    """Intensity on ``times x locs`` (summed over marks); shape ``(len(times), n_locs)``."""
    if isinstance(model, TrueModel):
        return model.intensity_at(seq, times, locs)
    grids = grids or GridSpec.for_model(model)
    lam = intensity_at(model, seq, times, locs, grids)
    return lam.sum(axis=-1) if model.Q else lam


def relative_error(lam_true, lam_fit):
    """Grid mean of ``|lam_true - lam_fit| / lam_true``; points with ``lam_true <= 0`` are skipped.

    Returns ``(value, n_excluded)``.
    """
    lam_true = np.asarray(lam_true, dtype=np.float64)
    lam_fit = np.asarray(lam_fit, dtype=np.float64)
    ok = lam_true > 0
    n_bad = int(np.size(ok) - np.count_nonzero(ok))
    if not np.any(ok):
        raise DomainError("true intensity is non-positive on the whole evaluation grid")
    return float(np.mean(np.abs(lam_true[ok] - lam_fit[ok]) / lam_true[ok])), n_bad


def mre(true_model, fitted_model, seq, n_t=200, n_s=20, grids=None):
    """Mean relative error of the fitted intensity on one sequence's window.

    The integral of ``|lam* - lam_hat| / lam*`` over ``[0, T] x S`` is divided
    by ``T |S|``, i.e. it is the average over a uniform evaluation grid.
    Returns ``(value, n_excluded)``.
    """
    times, locs = eval_grid(seq, n_t, n_s)
    lt = grid_intensity(true_model, seq, times, locs)
    lf = grid_intensity(fitted_model, seq, times, locs, grids)
    value, bad = relative_error(lt, lf)
    if bad:
        log.warning("mre: %d grid points with non-positive true intensity excluded", bad)
    return value, bad


# ----------------------------------------------------------------------------
# Next-event prediction
# ----------------------------------------------------------------------------

@dataclass
class _NextEventParts:
    t_n: float
    area: float
    centroid: np.ndarray
    K: int
    mu: float
    psi: np.ndarray       # (J, L)
    mass: np.ndarray      # (J, L)  spatial mass x mark mass per history event
    moment: np.ndarray    # (J, L, d)
    per_mark: np.ndarray  # (J, L, K)
    hist_t: np.ndarray
    model: KernelModel


def _history_parts(model, history, n_cells):
    """Per-event factors of the separable intensity, integrated over ``S``."""
    d = model.spatial_dim
    t_n = float(history.times[-1]) if len(history) else 0.0
    keep = history.times >= t_n - model.tau_max
    ht = history.times[keep]
    J = ht.size
    K = model.n_marks if model.Q else 1
    if d:
        cells, vol = box_cells(history.bounds, n_cells)
        area = history.area
        centroid = history.bounds.mean(axis=1)
    else:
        cells, vol, area, centroid = None, 1.0, 1.0, np.zeros(0)
    psi = np.stack([n.forward(ht) for n in model.nets["psi"]], axis=1) if J else np.zeros((0, model.L))
    if d and J:
        hs = history.locs[keep]
        U = np.stack([n.forward(hs) for n in model.nets["u"]], axis=1)
        nu = cells[None, :, :] - hs[:, None, :]
        inside = (np.linalg.norm(nu, axis=2) <= model.a_max).astype(np.float64)
        flat = nu.reshape(-1, d)
        V = np.stack([n.forward(flat).reshape(J, -1) for n in model.nets["v"]], axis=2) * inside[:, :, None]
        smass = U * V.sum(axis=1) * vol                                  # (J, R)
        smom = U[:, :, None] * np.einsum("jcr,cd->jrd", V, cells) * vol   # (J, R, d)
    else:
        smass = np.ones((J, model.R))
        smom = np.zeros((J, model.R, d))
    if model.Q:
        eye = np.eye(K)
        Gk = np.stack([n.forward(eye) for n in model.nets["g"]], axis=1)
        Hk = np.stack([n.forward(eye) for n in model.nets["h"]], axis=1)
        Gj = Gk[history.marks[keep]] if J else np.zeros((0, model.Q))
        alpha = model.alpha
    else:
        Gj, Hk, alpha = np.ones((J, 1)), np.ones((1, 1)), model.alpha[:, :, None]
    hsum = Hk.sum(axis=0)
    mass = np.einsum("lrq,jr,jq,q->jl", alpha, smass, Gj, hsum)
    moment = np.einsum("lrq,jrd,jq,q->jld", alpha, smom, Gj, hsum)
    per_mark = np.einsum("lrq,jr,jq,kq->jlk", alpha, smass, Gj, Hk)
    return _NextEventParts(t_n, area, centroid, K, float(model.mu), psi, mass, moment, per_mark, ht, model)


def _time_factors(parts, tq):
    """``psi_l(t_j) phi_l(.)`` for every query time and history event; shape ``(M, J, L)``."""
    model = parts.model
    tq = np.asarray(tq, dtype=np.float64)
    J = parts.hist_t.size
    if J == 0:
        return np.zeros((tq.size, 0, model.L))
    lag = tq[:, None] - parts.hist_t[None, :]
    # right limit at lag 0: these grids are integrated from t_n onwards
    live = (lag >= 0) & (lag <= model.tau_max)
    x = np.broadcast_to(tq[:, None], lag.shape) if model.temporal_param == "absolute" else lag
    phi = np.stack([n.forward(x.reshape(-1)).reshape(lag.shape) for n in model.nets["phi"]], axis=2)
    return parts.psi[None, :, :] * phi * live[:, :, None]


def _rates(parts, tq):
    """Total rate, location moment and per-mark rate at query times (all integrated over S)."""
    A = _time_factors(parts, tq)
    base = parts.mu * parts.area
    total = base * parts.K + np.einsum("mjl,jl->m", A, parts.mass)
    moment = base * parts.K * parts.centroid[None, :] + np.einsum("mjl,jld->md", A, parts.moment)
    per_mark = base + np.einsum("mjl,jlk->mk", A, parts.per_mark)
    return total, moment, per_mark


@dataclass
class Prediction:
    time: float
    location: np.ndarray | None
    mark_probs: np.ndarray | None
    truncated: bool = False

    @property
    def mark(self):
        return None if self.mark_probs is None else int(np.argmax(self.mark_probs))


def predict_next_event(model, history, n_time=2001, n_cells=40):
    """Expected time, location and mark distribution of the next event.

    The survival function ``S(t) = exp(-int_{t_n}^t int_S lambda)`` is
    integrated numerically up to ``t_n + tau_max``. Past that point no history
    event contributes any more, so the rest of the integral is the exact
    exponential tail of the base rate. With ``mu = 0`` and non-negligible
    survival mass at ``t_n + tau_max`` a warning is issued and the estimate
    is conditioned on an event occurring before that point.
    """
    if not isinstance(model, KernelModel):
        raise ConfigurationError("prediction needs a fitted KernelModel")
    parts = _history_parts(model, history, n_cells)
    tg = parts.t_n + np.linspace(0.0, model.tau_max, n_time)
    total, moment, per_mark = _rates(parts, tg)
    if np.any(total < 0):
        log.warning("negative total intensity in the prediction window; clipping at 0")
        total = np.maximum(total, 0.0)
    surv = np.exp(-cumulative_trapezoid(total, tg, initial=0.0))
    s_end = float(surv[-1])
    base_total = parts.mu * parts.area * parts.K
    truncated = False
    if base_total > 0:
        tail_t = s_end / base_total
        tail_s = s_end * parts.centroid
        tail_k = np.full(parts.K, s_end / parts.K)
        norm = 1.0
    else:
        # E[t | t <= t_n + tau_max] = t_n + (int S - tau_max S_end) / (1 - S_end)
        tail_t = -s_end * model.tau_max
        tail_s, tail_k = 0.0 * parts.centroid, np.zeros(parts.K)
        norm = 1.0 - s_end
        if s_end > 1e-6:
            truncated = True
            warnings.warn(f"survival {s_end:.3g} left at the prediction horizon with zero base rate; "
                          "returning the estimate conditioned on an event within the horizon", RuntimeWarning)
        if norm <= 0:
            raise DomainError("no event mass within the prediction horizon")
    t_hat = parts.t_n + (trapezoid(surv, tg) + tail_t) / norm
    loc = None
    if model.spatial_dim:
        # normalise by the quadrature's own event mass so a constant location density maps to itself
        mass = trapezoid(surv * total, tg) + (s_end if base_total > 0 else 0.0)
        loc = (trapezoid(surv[:, None] * moment, tg, axis=0) + tail_s) / mass
    probs = None
    if model.Q:
        probs = trapezoid(surv[:, None] * per_mark, tg, axis=0) + tail_k
        probs = probs / probs.sum()
    return Prediction(float(t_hat), loc, probs, truncated)


def predictive_density(model, history, t, s=None, m=None, n_time=2001, n_cells=40):
    """Density of the next event at ``(t, s[, m])`` given ``history``.

    ``lambda(t, s) * exp(-int_{t_n}^t int_S lambda)``. For marked models with
    ``m=None`` the marks are summed out.
    """
    parts = _history_parts(model, history, n_cells)
    t = float(t)
    if t <= parts.t_n:
        raise DomainError(f"t={t} must be after the last history event {parts.t_n}")
    tg = np.linspace(parts.t_n, min(t, parts.t_n + model.tau_max), n_time)
    total = _rates(parts, tg)[0]
    cum = trapezoid(total, tg) + max(t - parts.t_n - model.tau_max, 0.0) * parts.mu * parts.area * parts.K
    lam = _point_intensity(model, history, t, s, m)
    return float(lam * np.exp(-cum))


def _point_intensity(model, history, t, s, m):
    d = model.spatial_dim
    tp = history.times
    keep = (tp < t) & (t - tp <= model.tau_max)
    if d:
        if s is None:
            raise DomainError("spatial model needs a location")
        s = np.asarray(s, dtype=np.float64).reshape(d)
    lam_k = []
    marks = [m] if (model.Q and m is not None) else (range(model.n_marks) if model.Q else [None])
    for k in marks:
        if not np.any(keep):
            lam_k.append(float(model.mu))
            continue
        sp = history.locs[keep] if d else None
        vals = kernel_eval(model, tp[keep], np.full(keep.sum(), t), sp,
                           np.broadcast_to(s, sp.shape) if d else None,
                           history.marks[keep] if model.Q else None,
                           None if k is None else np.full(keep.sum(), k))
        lam_k.append(float(model.mu) + float(np.sum(vals)))
    return sum(lam_k)


def prediction_errors(model, seqs, n_time=2001, n_cells=40):
    """All prediction metrics at once: the last event of each sequence is predicted from the rest.

    Sequences without events are skipped. Location error is the mean
    Euclidean distance; type accuracy uses the most probable mark.
    """
    dt, dloc, hits = [], [], []
    for seq in seqs:
        n = len(seq)
        if n == 0:
            continue
        prefix = seq.head(n - 1, T=float(seq.times[-1]))
        pred = predict_next_event(model, prefix, n_time=n_time, n_cells=n_cells)
        dt.append(pred.time - seq.times[-1])
        if pred.location is not None:
            dloc.append(float(np.linalg.norm(pred.location - seq.locs[-1])))
        if pred.mark_probs is not None:
            hits.append(pred.mark == int(seq.marks[-1]))
    dt = np.asarray(dt)
    out = {"time-RMSE": float(np.sqrt(np.mean(dt ** 2))) if dt.size else float("nan"),
           "time-MAE": float(np.mean(np.abs(dt))) if dt.size else float("nan"),
           "n": int(dt.size)}
    if dloc:
        out["location-MAE"] = float(np.mean(dloc))
    if hits:
        out["type-accuracy"] = float(np.mean(hits))
    return out


def prediction_error(model, seqs, task="time-MAE", **kwargs):
    if task not in PREDICTION_TASKS:
        raise ConfigurationError(f"unknown task {task!r}; choose from {PREDICTION_TASKS}")
    errs = prediction_errors(model, seqs, **kwargs)
    if task not in errs:
        raise ConfigurationError(f"task {task} not available for this model")
    return errs[task]


# ----------------------------------------------------------------------------
# Rank analysis
# ----------------------------------------------------------------------------

def kernel_matrix(kernel, parameterization, n_grid=300, extent=100.0):
    """Kernel values on an ``n_grid x n_grid`` uniform grid over ``[0, extent]^2``.

    Rows index ``t'``; columns index ``t`` (``"history-time"``) or the lag
    ``t - t'`` (``"history-displacement"``).
    """
    if parameterization not in PARAMETERIZATIONS:
        raise ConfigurationError(f"parameterization must be one of {PARAMETERIZATIONS}")
    if n_grid < 2:
        raise ConfigurationError("n_grid must be at least 2")
    g = np.linspace(0.0, extent, n_grid)
    tp = np.broadcast_to(g[:, None], (n_grid, n_grid))
    second = np.broadcast_to(g[None, :], (n_grid, n_grid))
    t = second if parameterization == "history-time" else tp + second
    return np.asarray(kernel(tp, t), dtype=np.float64) * np.ones((n_grid, n_grid))


def kernel_matrix_rank(kernel, parameterization, n_grid=300, tolerance=1e-10, extent=100.0):
    """Number of singular values above ``tolerance * sigma_max`` (0 for a zero matrix)."""
    sv = np.linalg.svd(kernel_matrix(kernel, parameterization, n_grid, extent), compute_uv=False)
    if sv[0] == 0:
        return 0
    return int(np.count_nonzero(sv > tolerance * sv[0]))


# ----------------------------------------------------------------------------
# Reports and plotting data
# ----------------------------------------------------------------------------

@dataclass
class EvalReport:
    """Aggregates are event-weighted (log-likelihood) or sequence means (MRE)."""

    loglik_per_event: float
    n_sequences: int
    n_events: int
    true_loglik_per_event: float | None = None
    mre: float | None = None
    mre_excluded: int = 0
    prediction: dict = field(default_factory=dict)
    rank: dict = field(default_factory=dict)
    per_sequence: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def evaluate(model, seqs, truth=None, grids=None, predict=False, mre_grid=(200, 20)):
    """Evaluate a fitted model on ``seqs``; ``truth`` (a :class:`TrueModel`) enables MRE."""
    seqs = list(seqs)
    lls = sequence_logliks(model, seqs, grids)
    n_ev = np.array([len(s) for s in seqs])
    report = EvalReport(float(lls.sum() / max(n_ev.sum(), 1)), len(seqs), int(n_ev.sum()))
    report.per_sequence = {"loglik": lls.tolist(), "n_events": n_ev.tolist()}
    if truth is not None:
        tl = sequence_logliks(truth, seqs)
        report.true_loglik_per_event = float(tl.sum() / max(n_ev.sum(), 1))
        errs = [mre(truth, model, s, *mre_grid, grids=grids) for s in seqs]
        report.per_sequence["true_loglik"] = tl.tolist()
        report.per_sequence["mre"] = [e for e, _ in errs]
        report.mre = float(np.mean([e for e, _ in errs]))
        report.mre_excluded = int(sum(b for _, b in errs))
    if predict and isinstance(model, KernelModel):
        report.prediction = prediction_errors(model, seqs)
    return report


def fitted_kernel_fn(model, s_prev=None, nu=None):
    """``k(t', t)`` of a fitted model as a callable, at a fixed spatial pair and mark 0."""

    def k(tp, t):
        tp, t = np.broadcast_arrays(np.asarray(tp, float), np.asarray(t, float))
        flat_tp, flat_t = tp.reshape(-1), t.reshape(-1)
        n = flat_tp.size
        sp = s = None
        if model.spatial_dim:
            sp = np.broadcast_to(np.asarray(s_prev, float), (n, model.spatial_dim))
            s = sp + np.asarray(nu, float)
        m = np.zeros(n, np.int64) if model.Q else None
        out = np.where(flat_t >= flat_tp, kernel_eval(model, flat_tp, np.maximum(flat_t, flat_tp), sp, s, m, m), 0.0)
        return out.reshape(tp.shape)

    return k


def true_kernel_fn(truth, s_prev=None, nu=None):
    def k(tp, t):
        tp, t = np.broadcast_arrays(np.asarray(tp, float), np.asarray(t, float))
        if truth.spatial_dim:
            sp = np.broadcast_to(np.asarray(s_prev, float), tp.shape + (truth.spatial_dim,))
            return truth.kernel(tp, np.maximum(t, tp), sp, sp + np.asarray(nu, float)) * (t >= tp)
        return truth.kernel(tp, np.maximum(t, tp)) * (t >= tp)
    return k


def kernel_heatmap(kernel, t_extent, tau_extent, n=100):
    """``k(t', t' + tau)`` on an ``n x n`` grid; returns ``(t_prev_axis, tau_axis, values)``."""
    tp = np.linspace(0.0, t_extent, n)
    tau = np.linspace(0.0, tau_extent, n)
    return tp, tau, kernel(tp[:, None], tp[:, None] + tau[None, :])


def spatial_heatmap(model_or_truth, t_prev, tau, s_prev, a_extent, n=60):
    """Kernel over a 2-D displacement grid ``nu`` at fixed ``t'``, lag and ``s'``."""
    axis = np.linspace(-a_extent, a_extent, n)
    nu = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1).reshape(-1, 2)
    sp = np.broadcast_to(np.asarray(s_prev, float), nu.shape)
    tp = np.full(nu.shape[0], float(t_prev))
    if isinstance(model_or_truth, TrueModel):
        vals = model_or_truth.kernel(tp, tp + tau, sp, sp + nu)
    else:
        m = np.zeros(nu.shape[0], np.int64) if model_or_truth.Q else None
        vals = kernel_eval(model_or_truth, tp, tp + tau, sp, sp + nu, m, m)
    return axis, axis, np.asarray(vals).reshape(n, n)


def intensity_curve(model, seq, n_t=500, grids=None):
    """Spatially integrated intensity over ``[0, T]`` (the intensity itself for temporal data)."""
    times = np.linspace(0.0, seq.T, n_t)
    if seq.spatial_dim:
        cells, vol = box_cells(seq.bounds, 20)
        lam = grid_intensity(model, seq, times, cells, grids).sum(axis=1) * vol
    else:
        lam = grid_intensity(model, seq, times, None, grids)[:, 0]
    return times, lam
