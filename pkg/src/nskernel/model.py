"""Event sequences, the low-rank influence kernel, and the conditional intensity.

The kernel is

    k(t', t, s', s) = sum_{l,r[,q]} alpha[l,r(,q)] psi_l(t') phi_l(t - t')
                      u_r(s') v_r(s - s') [g_q(m') h_q(m)]

with ``phi_l`` zero beyond ``tau_max`` and ``v_r`` zero outside the ball of
radius ``a_max``. Functions here evaluate the networks directly (no grids);
they are the reference path. The grid-accelerated likelihood lives in
:mod:`nskernel.likelihood`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError, ShapeError
from .nets import BasisNet, net_init

NET_GROUPS = ("psi", "phi", "u", "v", "g", "h")


@dataclass
class EventSequence:
    """Events ``(t_i, s_i[, m_i])`` observed on ``[0, T] x S``.

    ``locs`` has shape ``(n, d)`` with ``d = len(bounds)``; ``d = 0`` is a
    purely temporal sequence. ``marks`` holds integer class labels or is
    ``None``.
    """

    times: np.ndarray
    T: float
    locs: np.ndarray | None = None
    bounds: np.ndarray | None = None
    marks: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        n = self.times.size
        self.bounds = np.zeros((0, 2)) if self.bounds is None else np.asarray(self.bounds, dtype=np.float64).reshape(-1, 2)
        d = self.bounds.shape[0]
        if self.locs is None:
            if d:
                raise ShapeError("locations required for a spatial sequence")
            self.locs = np.zeros((n, 0))
        self.locs = np.asarray(self.locs, dtype=np.float64).reshape(n, d)
        if self.marks is not None:
            self.marks = np.asarray(self.marks, dtype=np.int64).reshape(n)
        self.T = float(self.T)
        if n and (np.any(np.diff(self.times) <= 0)):
            raise DomainError("event times must be strictly increasing")
        if n and (self.times[0] < 0 or self.times[-1] > self.T):
            raise DomainError("event times must lie in [0, T]")
        if d and n:
            lo, hi = self.bounds[:, 0], self.bounds[:, 1]
            if np.any(self.locs < lo) or np.any(self.locs > hi):
                raise DomainError("event locations must lie inside S")

    def __len__(self):
        return self.times.size

    @property
    def spatial_dim(self):
        return self.bounds.shape[0]

    @property
    def area(self):
        """Lebesgue measure of S (1 for purely temporal sequences)."""
        if self.spatial_dim == 0:
            return 1.0
        return float(np.prod(self.bounds[:, 1] - self.bounds[:, 0]))

    def head(self, k, T=None):
        """First ``k`` events, optionally on a shorter window."""
        return EventSequence(self.times[:k], self.T if T is None else T, self.locs[:k],
                             self.bounds, None if self.marks is None else self.marks[:k])

    def before(self, t):
        k = int(np.searchsorted(self.times, t, side="left"))
        return self.head(k)

    def __eq__(self, other):
        if not isinstance(other, EventSequence):
            return NotImplemented
        same_marks = (self.marks is None and other.marks is None) or (
            self.marks is not None and other.marks is not None and np.array_equal(self.marks, other.marks))
        return (self.T == other.T and np.array_equal(self.times, other.times)
                and np.array_equal(self.locs, other.locs) and np.array_equal(self.bounds, other.bounds)
                and same_marks)


class KernelModel:
    """Low-rank deep kernel with base rate.

    Parameters
    ----------
    L, R, Q : int
        Temporal, spatial and mark ranks. ``Q = 0`` means unmarked.
        Purely temporal models (``spatial_dim = 0``) require ``R = 1`` and have
        no spatial networks; the spatial factor is identically one.
    tau_max, a_max : float
        Truncation radii of the displacement networks.
    temporal_param : {"displacement", "absolute"}
        ``"absolute"`` feeds the current time ``t`` (not ``t - t'``) to the
        right temporal networks. That variant only exists as an ablation.
    t_max : float
        Domain length of the right temporal networks in ``"absolute"`` mode.
    n_marks : int
        Number of mark categories (one-hot width of g/h inputs).
    """

    def __init__(self, L, R, Q, spatial_dim, tau_max, a_max, mu, alpha, nets,
                 n_marks=1, temporal_param="displacement", t_max=None):
        self.L, self.R, self.Q = int(L), int(R), int(Q)
        self.spatial_dim = int(spatial_dim)
        self.tau_max = float(tau_max)
        self.a_max = float(a_max) if a_max is not None else np.inf
        self.n_marks = int(n_marks)
        self.temporal_param = temporal_param
        self.t_max = None if t_max is None else float(t_max)
        self.mu = np.asarray(mu, dtype=np.float64).reshape(())
        self.alpha = np.asarray(alpha, dtype=np.float64)
        self.nets = {k: list(nets.get(k, [])) for k in NET_GROUPS}
        self._validate()

    def _validate(self):
        if self.L < 1 or self.R < 1 or self.Q < 0:
            raise ConfigurationError(f"invalid ranks L={self.L}, R={self.R}, Q={self.Q}")
        if self.spatial_dim not in (0, 1, 2):
            raise ConfigurationError("spatial_dim must be 0, 1 or 2")
        if self.spatial_dim == 0 and self.R != 1:
            raise ConfigurationError("purely temporal models use R = 1")
        if self.tau_max <= 0:
            raise ConfigurationError("tau_max must be positive")
        if self.spatial_dim and not self.a_max > 0:
            raise ConfigurationError("a_max must be positive")
        if self.temporal_param not in ("displacement", "absolute"):
            raise ConfigurationError(f"unknown temporal_param {self.temporal_param!r}")
        if self.temporal_param == "absolute" and not (self.t_max and self.t_max > 0):
            raise ConfigurationError("absolute temporal parameterization needs t_max")
        if self.mu < 0:
            raise ConfigurationError("mu must be non-negative")
        shape = (self.L, self.R) + ((self.Q,) if self.Q else ())
        if self.alpha.shape != shape:
            raise ShapeError(f"alpha has shape {self.alpha.shape}, expected {shape}")
        expected = {"psi": self.L, "phi": self.L,
                    "u": self.R if self.spatial_dim else 0, "v": self.R if self.spatial_dim else 0,
                    "g": self.Q, "h": self.Q}
        for group, count in expected.items():
            if len(self.nets[group]) != count:
                raise ConfigurationError(f"expected {count} {group} networks, got {len(self.nets[group])}")
        d_in = {"psi": 1, "phi": 1, "u": self.spatial_dim, "v": self.spatial_dim,
                "g": self.n_marks, "h": self.n_marks}
        for group, nets in self.nets.items():
            for net in nets:
                if net.d_in != d_in[group]:
                    raise ShapeError(f"{group} network expects input dim {d_in[group]}, has {net.d_in}")

    @property
    def marked(self):
        return self.Q > 0

    @property
    def temporal_span(self):
        """Length of the domain on which the right temporal networks are tabulated."""
        return self.tau_max if self.temporal_param == "displacement" else self.t_max

    def params(self):
        """Ordered mapping ``name -> array``; arrays are the live parameters."""
        out = {"mu": self.mu, "alpha": self.alpha}
        for group in NET_GROUPS:
            for idx, net in enumerate(self.nets[group]):
                for pname, arr in zip(net.param_names(), net.params()):
                    out[f"{group}.{idx}.{pname}"] = arr
        return out

    def n_params(self):
        return sum(p.size for p in self.params().values())

    def all_nets(self):
        for group in NET_GROUPS:
            for idx, net in enumerate(self.nets[group]):
                yield group, idx, net

    def reset_counters(self):
        for _, _, net in self.all_nets():
            net.n_evals = 0

    def eval_counts(self):
        return {(group, idx): net.n_evals for group, idx, net in self.all_nets()}

    def copy(self):
        nets = {k: [n.copy() for n in v] for k, v in self.nets.items()}
        return KernelModel(self.L, self.R, self.Q, self.spatial_dim, self.tau_max,
                           self.a_max if np.isfinite(self.a_max) else None, self.mu.copy(),
                           self.alpha.copy(), nets, self.n_marks, self.temporal_param, self.t_max)

    def meta(self):
        return {"L": self.L, "R": self.R, "Q": self.Q, "spatial_dim": self.spatial_dim,
                "tau_max": self.tau_max, "a_max": self.a_max if np.isfinite(self.a_max) else None,
                "n_marks": self.n_marks, "temporal_param": self.temporal_param, "t_max": self.t_max,
                "layer_dims": {g: [n.layer_dims for n in self.nets[g]] for g in NET_GROUPS},
                "positive_output": {g: [n.positive_output for n in self.nets[g]] for g in NET_GROUPS},
                "in_scale": {g: [n.in_scale for n in self.nets[g]] for g in NET_GROUPS}}


def init_model(L=1, R=1, Q=0, spatial_dim=0, tau_max=3.0, a_max=None, hidden=(64, 64),
               n_marks=1, temporal_param="displacement", t_max=None, mu=1.0, alpha=None, seed=0,
               t_scale=None, s_scale=1.0):
    """Build a :class:`KernelModel` with freshly initialized networks.

    Network seeds are spawned from ``seed`` in the fixed order
    psi_1..psi_L, phi_1..phi_L, u_1..u_R, v_1..v_R, g_1..g_Q, h_1..h_Q.
    ``alpha`` defaults to the constant ``1 / (L R max(Q, 1))``.

    Inputs are divided by the length of their natural domain before entering
    a network: ``t_scale`` for psi (defaults to ``t_max``, else 1), the
    tabulation span for phi, ``s_scale`` for u and ``a_max`` for v.
    """
    if spatial_dim == 0:
        R = 1
    hidden = list(hidden)
    counts = [("psi", L, 1), ("phi", L, 1)]
    if spatial_dim:
        counts += [("u", R, spatial_dim), ("v", R, spatial_dim)]
    counts += [("g", Q, n_marks), ("h", Q, n_marks)]
    total = sum(c for _, c, _ in counts)
    if t_scale is None:
        t_scale = t_max if t_max else 1.0
    span = tau_max if temporal_param == "displacement" else (t_max or tau_max)
    scales = {"psi": 1.0 / t_scale, "phi": 1.0 / span, "u": 1.0 / s_scale,
              "v": 1.0 / a_max if a_max else 1.0, "g": 1.0, "h": 1.0}
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seeds = iter(root.spawn(total))
    nets = {}
    for group, count, d_in in counts:
        nets[group] = [net_init([d_in] + hidden + [1], next(seeds), positive_output=group in ("g", "h"),
                                in_scale=scales[group])
                       for _ in range(count)]
    shape = (L, R) + ((Q,) if Q else ())
    if alpha is None:
        alpha = np.full(shape, 1.0 / (L * R * max(Q, 1)))
    return KernelModel(L, R, Q, spatial_dim, tau_max, a_max, mu, alpha, nets,
                       n_marks=n_marks, temporal_param=temporal_param, t_max=t_max)


def one_hot(marks, n_marks):
    marks = np.asarray(marks, dtype=np.int64).reshape(-1)
    out = np.zeros((marks.size, n_marks))
    out[np.arange(marks.size), marks] = 1.0
    return out


def _stack(nets, x):
    if not nets:
        return None
    return np.stack([net.forward(x) for net in nets], axis=-1)


def _kernel_direct(model, t_prev, t, s_prev, s, m_prev, m, absolute):
    t_prev = np.atleast_1d(np.asarray(t_prev, dtype=np.float64))
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    t_prev, t = np.broadcast_arrays(t_prev, t)
    if np.any(t < t_prev):
        raise DomainError("kernel requires t >= t_prev")
    n = t.size
    tau = t - t_prev
    inside = tau <= model.tau_max
    rows = np.nonzero(inside)[0]
    out = np.zeros(n)
    if rows.size == 0:
        return out
    left_t = _stack(model.nets["psi"], t_prev[rows])
    right_t = _stack(model.nets["phi"], (t if absolute else tau)[rows])
    temporal = left_t * right_t  # (k, L)
    d = model.spatial_dim
    if d:
        s_prev = np.asarray(s_prev, dtype=np.float64).reshape(-1, d)
        s = np.asarray(s, dtype=np.float64).reshape(-1, d)
        s_prev = np.broadcast_to(s_prev, (n, d))[rows]
        s = np.broadcast_to(s, (n, d))[rows]
        nu = s - s_prev
        within = np.linalg.norm(nu, axis=1) <= model.a_max
        spatial = _stack(model.nets["u"], s_prev) * _stack(model.nets["v"], nu) * within[:, None]
    else:
        spatial = np.ones((rows.size, 1))
    if model.Q:
        if m_prev is None or m is None:
            raise DomainError("marked kernel requires marks")
        mp = one_hot(np.broadcast_to(np.asarray(m_prev), (n,))[rows], model.n_marks)
        mc = one_hot(np.broadcast_to(np.asarray(m), (n,))[rows], model.n_marks)
        marks = _stack(model.nets["g"], mp) * _stack(model.nets["h"], mc)
        vals = np.einsum("kl,lrq,kr,kq->k", temporal, model.alpha, spatial, marks)
    else:
        vals = np.einsum("kl,lr,kr->k", temporal, model.alpha, spatial)
    out[rows] = vals
    return out


def _scalarize(x, like):
    return float(x[0]) if np.ndim(like) == 0 else x


def kernel_eval(model, t_prev, t, s_prev=None, s=None, m_prev=None, m=None):
    """Kernel value(s) ``k(t', t - t', s', s - s')`` by direct network evaluation.

    Arrays broadcast elementwise. Exactly zero when ``t - t' > tau_max`` or
    ``||s - s'|| > a_max``.
    """
    vals = _kernel_direct(model, t_prev, t, s_prev, s, m_prev, m,
                          absolute=model.temporal_param == "absolute")
    return _scalarize(vals, t)


def kernel_eval_history_param(model, t_prev, t, s_prev=None, s=None, m_prev=None, m=None):
    """Same low-rank form, but the right temporal networks see absolute time ``t``."""
    vals = _kernel_direct(model, t_prev, t, s_prev, s, m_prev, m, absolute=True)
    return _scalarize(vals, t)


def intensity(model, history, t, s=None, m=None):
    """``mu + sum_{t_i < t} k(t_i, t, s_i, s)`` evaluated directly.

    For marked models with ``m=None`` the intensity summed over all mark
    classes is returned. May be negative; keeping it positive is the
    trainer's job.
    """
    t = float(t)
    if t < 0 or t > history.T:
        raise DomainError(f"t={t} outside [0, {history.T}]")
    if model.spatial_dim and s is None:
        raise DomainError("spatial model needs a location s")
    if model.spatial_dim:
        s = np.asarray(s, dtype=np.float64).reshape(model.spatial_dim)
        lo, hi = history.bounds[:, 0], history.bounds[:, 1]
        if np.any(s < lo) or np.any(s > hi):
            raise DomainError("location outside S")
    if model.Q and m is None:
        return sum(intensity(model, history, t, s, k) for k in range(model.n_marks))
    keep = history.times < t
    if not np.any(keep):
        return float(model.mu)
    tp = history.times[keep]
    sp = history.locs[keep] if model.spatial_dim else None
    mp = history.marks[keep] if model.Q else None
    s_now = np.broadcast_to(s, sp.shape) if model.spatial_dim else None
    vals = kernel_eval(model, tp, np.full(tp.size, t), sp, s_now,
                       mp, None if m is None else np.full(tp.size, m))
    return float(model.mu + np.sum(vals))
