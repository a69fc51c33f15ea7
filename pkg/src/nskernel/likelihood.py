"""Grid-accelerated log-likelihood, log-barrier and training objective.

Network evaluation budget per objective call: each ``psi_l`` and ``u_r`` once
per event, each ``phi_l`` once per node of ``u_t``, each ``v_r`` once per node
of ``u_s`` plus once per truncated event pair and barrier pair, and each mark
network once per mark class. Everything else is interpolation, sums and
sparse products, so the cost is linear in the number of events.

Gradients are obtained by a hand-written reverse pass over the same
computation (:func:`grad_objective`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .errors import ConfigurationError, InfeasibleError, NumericalError
from .grids import _check_grids, cumtrapz_matrix, interp_matrix


# ----------------------------------------------------------------------------
# Parameter-independent structure
# ----------------------------------------------------------------------------

def _history_pairs(times, query_t, tau_max):
    """Pairs ``(q, j)`` with ``query_t[q] - tau_max <= times[j] < query_t[q]``."""
    lo = np.searchsorted(times, query_t - tau_max, side="left")
    hi = np.searchsorted(times, query_t, side="left")
    counts = np.maximum(hi - lo, 0)
    q = np.repeat(np.arange(query_t.size), counts)
    start = np.repeat(lo - (np.cumsum(counts) - counts), counts)
    j = start + np.arange(q.size)
    return q, j


@dataclass
class Prepared:
    """Index structure of one sequence for a given kernel geometry and grid."""

    seq: object
    pair_q: np.ndarray
    pair_j: np.ndarray
    pair_x: np.ndarray
    pair_nu: np.ndarray
    int_hi: np.ndarray
    int_lo: np.ndarray
    int_mask: np.ndarray | None
    n_points: int = 0
    pt_q: np.ndarray | None = None
    pt_j: np.ndarray | None = None
    pt_x: np.ndarray | None = None
    pt_nu: np.ndarray | None = None
    pt_shape: tuple = (0, 0)


def prepare(seq, model, grids, points="barrier"):
    """Precompute truncated pair sets, interpolation abscissae and masks.

    ``points`` is ``"barrier"`` (the sequence's barrier grid), ``None``, or a
    ``(times, locations)`` tuple of query points whose product grid is used.
    """
    if model.spatial_dim != seq.spatial_dim:
        raise ConfigurationError(f"model is {model.spatial_dim}-D in space, sequence is {seq.spatial_dim}-D")
    absolute = model.temporal_param == "absolute"
    if absolute and seq.T > model.t_max + 1e-12:
        raise ConfigurationError(f"sequence horizon {seq.T} exceeds model t_max {model.t_max}")
    times, locs, d = seq.times, seq.locs, model.spatial_dim

    q, j = _history_pairs(times, times, model.tau_max)
    nu = locs[q] - locs[j]
    if d:
        keep = np.linalg.norm(nu, axis=1) <= model.a_max
        q, j, nu = q[keep], j[keep], nu[keep]
    x = times[q] if absolute else times[q] - times[j]

    if absolute:
        hi = np.minimum(seq.T, times + model.tau_max)
        lo = times.copy()
    else:
        hi = np.minimum(seq.T - times, model.tau_max)
        lo = np.zeros_like(times)
    mask = None
    if d:
        shifted = locs[:, None, :] + grids.u_s[None, :, :]
        lo_b, hi_b = seq.bounds[:, 0], seq.bounds[:, 1]
        mask = np.all((shifted >= lo_b) & (shifted <= hi_b), axis=2)

    prep = Prepared(seq, q, j, x, nu, hi, lo, mask)
    if points is None:
        return prep
    pt_t, pt_s = grids.barrier_points(seq) if isinstance(points, str) else points
    pt_t = np.asarray(pt_t, dtype=np.float64).reshape(-1)
    pt_s = np.asarray(pt_s, dtype=np.float64).reshape(-1, d) if d else np.zeros((1, 0))
    n_s = pt_s.shape[0]
    cq, cj = _history_pairs(times, pt_t, model.tau_max)
    if d:
        cs = np.tile(np.arange(n_s), cq.size)
        cq, cj = np.repeat(cq, n_s), np.repeat(cj, n_s)
        cnu = pt_s[cs] - locs[cj]
        keep = np.linalg.norm(cnu, axis=1) <= model.a_max
        cq, cj, cs, cnu = cq[keep], cj[keep], cs[keep], cnu[keep]
        flat = cq * n_s + cs
    else:
        cnu = np.zeros((cq.size, 0))
        flat = cq
    cx = pt_t[cq] if absolute else pt_t[cq] - times[cj]
    prep.n_points = pt_t.size * n_s
    prep.pt_q, prep.pt_j, prep.pt_x, prep.pt_nu = flat, cj, cx, cnu
    prep.pt_shape = (pt_t.size, n_s)
    return prep


class Batch:
    """Concatenation of prepared sequences with global indices."""

    def __init__(self, preps, model, grids):
        self.preps = list(preps)
        self.n_seq = len(self.preps)
        seqs = [p.seq for p in self.preps]
        sizes = np.array([len(s) for s in seqs], dtype=np.int64)
        ev_off = np.concatenate([[0], np.cumsum(sizes)])
        self.ev_off = ev_off
        self.N = int(ev_off[-1])
        d = model.spatial_dim
        self.times = np.concatenate([s.times for s in seqs]) if seqs else np.zeros(0)
        self.locs = np.concatenate([s.locs for s in seqs]) if seqs else np.zeros((0, d))
        self.seq_id = np.repeat(np.arange(self.n_seq), sizes)
        self.base_measure = np.array([s.area * s.T for s in seqs], dtype=np.float64)
        if model.Q:
            for s in seqs:
                if s.marks is None:
                    raise ConfigurationError("marked model requires marked sequences")
            self.marks = np.concatenate([s.marks for s in seqs]).astype(np.int64) if seqs else np.zeros(0, np.int64)
        else:
            self.marks = None

        G = grids.n_t
        span = grids.span
        self.pi = np.concatenate([p.pair_q + o for p, o in zip(self.preps, ev_off)]).astype(np.int64) if seqs else np.zeros(0, np.int64)
        self.pj = np.concatenate([p.pair_j + o for p, o in zip(self.preps, ev_off)]).astype(np.int64) if seqs else np.zeros(0, np.int64)
        px = np.concatenate([p.pair_x for p in self.preps]) if seqs else np.zeros(0)
        self.pnu = np.concatenate([p.pair_nu for p in self.preps]) if seqs else np.zeros((0, d))
        self.Wp = interp_matrix(px, span, G)
        hi = np.concatenate([p.int_hi for p in self.preps]) if seqs else np.zeros(0)
        lo = np.concatenate([p.int_lo for p in self.preps]) if seqs else np.zeros(0)
        self.Wint = interp_matrix(hi, span, G) - interp_matrix(lo, span, G)
        self.mask = None
        if d:
            self.mask = (np.concatenate([p.int_mask for p in self.preps]) if seqs
                         else np.zeros((0, grids.n_spatial), bool)).astype(np.float64)

        self.has_points = bool(seqs) and all(p.pt_q is not None for p in self.preps)
        if self.has_points:
            npts = np.array([p.n_points for p in self.preps], dtype=np.int64)
            pt_off = np.concatenate([[0], np.cumsum(npts)])
            self.pt_off = pt_off
            self.Nc = int(pt_off[-1])
            self.cc = np.concatenate([p.pt_q + o for p, o in zip(self.preps, pt_off)]).astype(np.int64)
            self.cj = np.concatenate([p.pt_j + o for p, o in zip(self.preps, ev_off)]).astype(np.int64)
            self.cnu = np.concatenate([p.pt_nu for p in self.preps])
            self.Wc = interp_matrix(np.concatenate([p.pt_x for p in self.preps]), span, G)
        self.Ctrap = cumtrapz_matrix(G, grids.dt)


def make_batch(model, seqs, grids, points="barrier"):
    _check_grids(model, grids)
    preps = [s if isinstance(s, Prepared) else prepare(s, model, grids, points) for s in seqs]
    return Batch(preps, model, grids)


# ----------------------------------------------------------------------------
# Forward / reverse passes
# ----------------------------------------------------------------------------

def _scatter(idx, vals, n):
    out = np.empty((n, vals.shape[1]))
    for c in range(vals.shape[1]):
        out[:, c] = np.bincount(idx, vals[:, c], minlength=n)
    return out


def _tri(A, B, C, alpha3):
    """``y[p, q] = C[p, q] * sum_{l,r} alpha3[l, r, q] A[p, l] B[p, r]``; also returns the unscaled sum."""
    M = np.einsum("pl,lrq,pr->pq", A, alpha3, B, optimize=True)
    return C * M, M


def _tri_back(A, B, C, M, alpha3, g):
    D = g * C
    dalpha = np.einsum("pq,pl,pr->lrq", D, A, B, optimize=True)
    dA = np.einsum("pq,lrq,pr->pl", D, alpha3, B, optimize=True)
    dB = np.einsum("pq,lrq,pl->pr", D, alpha3, A, optimize=True)
    dC = g * M
    return dalpha, dA, dB, dC


def _eval_group(nets, x, keep):
    vals, caches = [], []
    for net in nets:
        if keep:
            y, c = net.forward(x, keep_cache=True)
            caches.append(c)
        else:
            y = net.forward(x)
        vals.append(y)
    return np.stack(vals, axis=1), caches


class _Forward:
    pass


def _forward(model, batch, grids, tables=None, keep=False, points=True):
    f = _Forward()
    f.keep = keep
    N, d = batch.N, model.spatial_dim
    Qe = max(model.Q, 1)
    f.alpha3 = model.alpha if model.Q else model.alpha[:, :, None]
    mu = float(model.mu)

    f.Psi, f.c_psi = _eval_group(model.nets["psi"], batch.times, keep)
    if tables is not None and not keep:
        f.Phi, f.F = tables.phi, tables.F
        f.c_phi = []
    else:
        f.Phi, f.c_phi = _eval_group(model.nets["phi"], grids.u_t, keep)
        f.F = cumulative_trapezoid(f.Phi, dx=grids.dt, axis=0, initial=0.0)

    use_points = points and batch.has_points
    P = batch.pi.size
    Pc = batch.cj.size if use_points else 0
    if d:
        f.U, f.c_u = _eval_group(model.nets["u"], batch.locs, keep)
        if tables is not None and not keep and tables.v_grid is not None:
            stacked = np.concatenate([batch.pnu, batch.cnu]) if use_points else batch.pnu
            Vpc, f.c_v = _eval_group(model.nets["v"], stacked, keep) if stacked.shape[0] else (np.zeros((0, model.R)), [])
            f.Vg = tables.v_grid
        else:
            parts = [batch.pnu] + ([batch.cnu] if use_points else []) + [grids.u_s]
            Vall, f.c_v = _eval_group(model.nets["v"], np.concatenate(parts), keep)
            f.Vg = Vall[P + Pc:]
            Vpc = Vall[:P + Pc]
        f.Vp, f.Vc = Vpc[:P], Vpc[P:P + Pc]
    else:
        f.U = np.ones((N, 1))
        f.Vp, f.Vc, f.Vg = np.ones((P, 1)), np.ones((Pc, 1)), None
        f.c_u, f.c_v = [], []

    K = model.n_marks if model.Q else 1
    f.K = K
    if model.Q:
        eye = np.eye(K)
        f.Gk, f.c_g = _eval_group(model.nets["g"], eye, keep)
        f.Hk, f.c_h = _eval_group(model.nets["h"], eye, keep)
        f.Gev, f.Hev = f.Gk[batch.marks], f.Hk[batch.marks]
        f.Hsum = f.Hk.sum(axis=0)
    else:
        f.Gev = np.ones((N, 1))
        f.Hev = np.ones((N, 1))
        f.Hsum = np.ones(1)
        f.c_g, f.c_h = [], []

    # events
    pi, pj = batch.pi, batch.pj
    f.phip = batch.Wp @ f.Phi
    f.A = f.Psi[pj] * f.phip
    f.B = f.U[pj] * f.Vp
    f.C = f.Gev[pj] * f.Hev[pi]
    y, f.M = _tri(f.A, f.B, f.C, f.alpha3)
    f.lam = mu + np.bincount(pi, y.sum(axis=1), minlength=N)

    # integral
    f.Fint = batch.Wint @ f.F
    f.Vint = (batch.mask @ f.Vg) * grids.da if d else np.ones((N, 1))
    f.AI = f.Psi * f.Fint
    f.BI = f.U * f.Vint
    f.CI = f.Gev * f.Hsum[None, :]
    z, f.MI = _tri(f.AI, f.BI, f.CI, f.alpha3)
    f.integral = mu * batch.base_measure * K + np.bincount(batch.seq_id, z.sum(axis=1), minlength=batch.n_seq)

    # query / barrier points
    f.has_points = use_points
    if use_points:
        cj, cc = batch.cj, batch.cc
        f.phic = batch.Wc @ f.Phi
        f.Ac = f.Psi[cj] * f.phic
        f.Bc = f.U[cj] * f.Vc
        f.Cc = f.Gev[cj] if model.Q else np.ones((Pc, 1))
        yc, f.Mc = _tri(f.Ac, f.Bc, f.Cc, f.alpha3)
        if model.Q:
            f.Fhat = _scatter(cc, yc, batch.Nc)
        else:
            f.lam_pts = mu + np.bincount(cc, yc[:, 0], minlength=batch.Nc)
    return f


def _backward(model, batch, grids, f, dlam, dint, dpts=None):
    """Parameter gradients given adjoints of event intensities, per-sequence
    integrals and point values (``lam_pts`` or ``Fhat``)."""
    N, d = batch.N, model.spatial_dim
    Qe = f.alpha3.shape[2]
    L, R = model.L, model.R
    G = grids.n_t

    dmu = dlam.sum() + np.sum(dint * batch.base_measure) * f.K
    dalpha = np.zeros_like(f.alpha3)
    dPsi = np.zeros((N, L))
    dU = np.zeros((N, R))
    dGev = np.zeros((N, Qe))
    dHev = np.zeros((N, Qe))
    dHsum = np.zeros(Qe)
    dPhi = np.zeros((G, L))

    pi, pj = batch.pi, batch.pj
    g = np.repeat(dlam[pi][:, None], Qe, axis=1)
    da, dA, dB, dC = _tri_back(f.A, f.B, f.C, f.M, f.alpha3, g)
    dalpha += da
    dPsi += _scatter(pj, dA * f.phip, N)
    dPhi += batch.Wp.T @ (dA * f.Psi[pj])
    dU += _scatter(pj, dB * f.Vp, N)
    dVp = dB * f.U[pj]
    dGev += _scatter(pj, dC * f.Hev[pi], N)
    dHev += _scatter(pi, dC * f.Gev[pj], N)

    gI = np.repeat(dint[batch.seq_id][:, None], Qe, axis=1)
    da, dAI, dBI, dCI = _tri_back(f.AI, f.BI, f.CI, f.MI, f.alpha3, gI)
    dalpha += da
    dPsi += dAI * f.Fint
    dF = batch.Wint.T @ (dAI * f.Psi)
    dU += dBI * f.Vint
    dVint = dBI * f.U
    dGev += dCI * f.Hsum[None, :]
    dHsum += np.sum(dCI * f.Gev, axis=0)

    dVc = np.zeros((0, R))
    if dpts is not None and f.has_points:
        cj, cc = batch.cj, batch.cc
        if model.Q:
            gc = dpts[cc]
        else:
            dmu += dpts.sum()
            gc = dpts[cc][:, None]
        da, dAc, dBc, dCc = _tri_back(f.Ac, f.Bc, f.Cc, f.Mc, f.alpha3, gc)
        dalpha += da
        dPsi += _scatter(cj, dAc * f.phic, N)
        dPhi += batch.Wc.T @ (dAc * f.Psi[cj])
        dU += _scatter(cj, dBc * f.Vc, N)
        dVc = dBc * f.U[cj]
        if model.Q:
            dGev += _scatter(cj, dCc, N)
    elif f.has_points:
        dVc = np.zeros((batch.cj.size, R))

    dPhi += batch.Ctrap.T @ dF

    grads = {"mu": np.asarray(dmu, dtype=np.float64).reshape(()),
             "alpha": dalpha if model.Q else dalpha[:, :, 0]}

    def put(group, caches, adj):
        for idx, (net, cache) in enumerate(zip(model.nets[group], caches)):
            for name, gr in zip(net.param_names(), net.backward(cache, adj[:, idx])):
                grads[f"{group}.{idx}.{name}"] = gr

    put("psi", f.c_psi, dPsi)
    put("phi", f.c_phi, dPhi)
    if d:
        dVg = (batch.mask.T @ dVint) * grids.da
        put("u", f.c_u, dU)
        put("v", f.c_v, np.concatenate([dVp, dVc, dVg]))
    if model.Q:
        dGk = _scatter(batch.marks, dGev, f.K)
        dHk = _scatter(batch.marks, dHev, f.K) + dHsum[None, :]
        put("g", f.c_g, dGk)
        put("h", f.c_h, dHk)
    return grads


# ----------------------------------------------------------------------------
# Public operations
# ----------------------------------------------------------------------------

def _as_list(seqs):
    return seqs if isinstance(seqs, (list, tuple)) else [seqs]


def _check_events(f, batch):
    bad = np.nonzero(~(f.lam > 0))[0]
    if bad.size:
        k = int(bad[0])
        s = int(batch.seq_id[k])
        local = k - int(batch.ev_off[s])
        raise InfeasibleError(f"non-positive intensity {f.lam[k]:.4g} at event {local} of sequence {s}",
                              index=(s, local), value=float(f.lam[k]))


def log_summation(model, seq, tables=None, grids=None):
    """``sum_i log lambda(t_i, s_i)`` with interpolated ``phi`` and truncated pairs."""
    grids = grids or _default_grids(model)
    batch = make_batch(model, [seq], grids, points=None)
    f = _forward(model, batch, grids, tables, points=False)
    _check_events(f, batch)
    return float(np.sum(np.log(f.lam)))


def integral_term(model, seq, tables=None, grids=None):
    """``int_0^T int_S lambda`` decomposed into tabulated basis integrals."""
    grids = grids or _default_grids(model)
    batch = make_batch(model, [seq], grids, points=None)
    f = _forward(model, batch, grids, tables, points=False)
    return float(f.integral[0])


def log_likelihood(model, seq, tables=None, grids=None):
    grids = grids or _default_grids(model)
    batch = make_batch(model, [seq], grids, points=None)
    f = _forward(model, batch, grids, tables, points=False)
    _check_events(f, batch)
    return float(np.sum(np.log(f.lam)) - f.integral[0])


def log_likelihoods(model, seqs, grids, tables=None):
    """Per-sequence log-likelihoods of a list of sequences."""
    batch = make_batch(model, seqs, grids, points=None)
    f = _forward(model, batch, grids, tables, points=False)
    _check_events(f, batch)
    return np.bincount(batch.seq_id, np.log(f.lam), minlength=batch.n_seq) - f.integral


def grid_values(model, seqs, grids, tables=None):
    """Intensity on every barrier-grid point of ``seqs``, concatenated.

    For marked models the ``(n_points, Q)`` array of bracketed history sums
    ``F_q`` is returned instead.
    """
    batch = make_batch(model, _as_list(seqs), grids)
    f = _forward(model, batch, grids, tables)
    return f.Fhat if model.Q else f.lam_pts


def intensity_at(model, seq, times, locs, grids, tables=None):
    """Intensity on the product grid ``times x locs`` given ``seq`` as history.

    Returns shape ``(len(times), n_locs)`` for unmarked models and
    ``(len(times), n_locs, n_marks)`` for marked ones. Only events strictly
    before each query time contribute.
    """
    prep = prepare(seq, model, grids, points=(times, locs))
    batch = Batch([prep], model, grids)
    f = _forward(model, batch, grids, tables)
    shape = prep.pt_shape
    if model.Q:
        lam = float(model.mu) + f.Fhat @ f.Hk.T
        return lam.reshape(shape + (model.n_marks,))
    return f.lam_pts.reshape(shape)


def _barrier_value(vals, b, scale):
    gap = vals - b
    if np.any(~(gap > 0)):
        k = int(np.argmin(gap))
        raise InfeasibleError(f"barrier argument non-positive ({gap.flat[k]:.4g}) at grid point {k}",
                              index=k, value=float(gap.flat[k]))
    return -np.sum(np.log(gap)) / scale


def barrier(model, seqs, grids, b, tables=None):
    """``-mean log(lambda(t_c, s_c) - b)`` over the barrier grids of ``seqs``."""
    lam = grid_values(model, seqs, grids, tables)
    if model.Q:
        raise ConfigurationError("use barrier_marked for marked models")
    return float(_barrier_value(lam, b, lam.size))


def barrier_marked(model, seqs, grids, b, tables=None):
    """``-(1/(Q n_c)) sum log(F_q(t_c, s_c) - b)`` for marked models."""
    if not model.Q:
        raise ConfigurationError("barrier_marked needs a marked model")
    Fhat = grid_values(model, seqs, grids, tables)
    return float(_barrier_value(Fhat, b, Fhat.size))


def objective(model, seqs, w, b, grids, tables=None):
    """``-sum log-likelihood + barrier / w`` over a batch of sequences."""
    value, _ = _objective(model, make_batch(model, _as_list(seqs), grids), grids, w, b, need_grad=False, tables=tables)
    return value


def grad_objective(model, seqs, w, b, grids):
    """Objective value and its gradient for every parameter (dict keyed like ``model.params()``)."""
    batch = seqs if isinstance(seqs, Batch) else make_batch(model, _as_list(seqs), grids)
    return _objective(model, batch, grids, w, b, need_grad=True)


def objective_parts(model, batch, grids, w, b=None, need_grad=True, eps_b=1e-3):
    """Like :func:`grad_objective` on a prebuilt batch, returning ``(value, grads, parts)``.

    With ``b=None`` the barrier offset is set from the same forward pass to
    ``min(grid values) - eps_b`` (treated as a constant for the gradient).
    """
    return _objective(model, batch, grids, w, b, need_grad=need_grad, with_parts=True, eps_b=eps_b)


def _objective(model, batch, grids, w, b, need_grad, tables=None, with_parts=False, eps_b=1e-3):
    f = _forward(model, batch, grids, tables=tables, keep=need_grad)
    _check_events(f, batch)
    neg_ll = -np.sum(np.log(f.lam)) + np.sum(f.integral)
    vals = f.Fhat if model.Q else f.lam_pts
    if b is None:
        b = float(vals.min()) - eps_b
    bar = _barrier_value(vals, b, vals.size)
    value = neg_ll + bar / w
    if not np.isfinite(value):
        raise NumericalError(f"objective is not finite ({value})")
    grads = None
    if need_grad:
        dlam = -1.0 / f.lam
        dint = np.ones(batch.n_seq)
        dpts = -1.0 / (w * vals.size * (vals - b))
        grads = _backward(model, batch, grids, f, dlam, dint, dpts)
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for {name}")
    if with_parts:
        parts = {"neg_loglik": float(neg_ll), "barrier": float(bar), "n_events": batch.N, "b": float(b),
                 "grid_min": float(vals.min()), "grid_lam_min": float(_grid_lambda(model, f).min()), "event_min": float(f.lam.min()) if batch.N else np.inf}
        return float(value), grads, parts
    return float(value), grads


def min_intensity(model, batch, grids):
    """Smallest values over the events and barrier points of ``batch``.

    Returns ``(event_min, grid_min, barrier_min)``: the intensity minimum over
    events, the intensity minimum over barrier points (every mark class for
    marked models) and the minimum of the quantity the barrier acts on.
    """
    f = _forward(model, batch, grids)
    ev = float(f.lam.min()) if batch.N else np.inf
    if not f.has_points:
        return ev, np.inf, np.inf
    vals = f.Fhat if model.Q else f.lam_pts
    lam = _grid_lambda(model, f)
    return ev, float(lam.min()), float(vals.min())


def _grid_lambda(model, f):
    return float(model.mu) + f.Fhat @ f.Hk.T if model.Q else f.lam_pts


def _default_grids(model):
    from .grids import GridSpec
    return GridSpec.for_model(model)
