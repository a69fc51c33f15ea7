"""Thinning simulation and the library of closed-form ground-truth kernels."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss

from . import seeding
from .errors import ConfigurationError, DominationError
from .grids import box_cells
from .model import EventSequence

log = logging.getLogger(__name__)

KERNEL_IDS = ("1d-exp", "1d-nonstat", "1d-infrank", "2d-exp", "3d-inhib", "3d-mixture")

# mu, T and S, plus the fitted model's truncation radii, ranks and (where the
# default 0.1 is unstable) learning rate, are not fixed by the kernel formulas.
# These are the CLI defaults; mu, T and S also go into every dataset header.
DATASET_PRESETS = {
    "1d-exp": dict(mu=0.5, T=50.0, bounds=[], tau_max=5.0, a_max=None, L=1, R=1),
    "1d-nonstat": dict(mu=1.0, T=50.0, bounds=[], tau_max=3.0, a_max=None, L=1, R=1),
    "1d-infrank": dict(mu=0.5, T=100.0, bounds=[], tau_max=5.0, a_max=None, L=3, R=1, learning_rate=0.01),
    "2d-exp": dict(mu=1.0, T=50.0, bounds=[[0.0, 1.0]], tau_max=4.0, a_max=1.0, L=1, R=1),
    "3d-inhib": dict(mu=0.5, T=50.0, bounds=[[-1.0, 1.0], [-1.0, 1.0]], tau_max=3.0, a_max=0.6, L=1, R=1),
    "3d-mixture": dict(mu=0.5, T=50.0, bounds=[[-1.0, 1.0], [-1.0, 1.0]], tau_max=3.0, a_max=2.0, L=2, R=2),
}


def _infrank_series(tp, tau, J):
    tp = np.asarray(tp, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    out = np.zeros(np.broadcast(tp, tau).shape)
    phase = (np.maximum(tp, 0.0) / 5.0) ** 0.7 * 1.3 * np.pi
    for j in range(1, J + 1):
        out = out + 2.0 ** -j * (0.3 + np.cos(2.0 + phase * (j + 1))) * np.exp(-8.0 * tau ** 2 * j ** 2 / 25.0)
    return 0.3 * out


def _gauss2(nu, sigma, shift=0.0):
    r2 = np.sum((nu - shift) ** 2, axis=-1)
    return np.exp(-r2 / (2 * sigma ** 2)) / (2 * np.pi * sigma ** 2)


def _inhib_space(sp, s):
    sig_p, sig_s = 0.5, 0.15
    nu = s - sp
    r = np.linalg.norm(nu, axis=-1)
    left = _gauss2(sp, sig_p)
    right = (np.cos(10 * r) / (2 * np.pi * sig_s ** 2 * (1 + np.exp(10 * (r - 0.5))))
             * np.exp(-r ** 2 / (2 * sig_s ** 2)))
    return left * right


def _mixture_terms():
    a_s, b_s, a_t, b_t = 0.3, 0.4, 0.02, 0.02
    s1, s2, beta = 0.2, 0.3, 2.0
    alpha = {(1, 1): 0.6, (1, 2): 0.15, (2, 1): 0.225, (2, 2): 0.525}  # keyed (r, l)
    u = {1: lambda sp: 1 - a_s * (sp[..., 1] + 1), 2: lambda sp: 1 - b_s * (sp[..., 1] + 1)}
    v = {1: lambda nu: _gauss2(nu, s1), 2: lambda nu: _gauss2(nu, s2, 0.8)}
    psi = {1: lambda tp: 1 - a_t * tp, 2: lambda tp: 1 - b_t * tp}
    phi = {1: lambda tau: np.exp(-beta * tau), 2: lambda tau: (tau - 1) * (tau < 3)}
    terms = []
    for (r, l), a in alpha.items():
        terms.append((
            lambda tp, t, a=a, l=l: a * psi[l](tp) * phi[l](t - tp),
            lambda sp, s, r=r: u[r](sp) * v[r](s - sp),
        ))
    return terms


@dataclass(frozen=True)
class TrueKernel:
    """Closed-form ground-truth kernel.

    The kernel is stored as a sum of (time factor) x (space factor) terms so
    that per-event integrals can be done one dimension at a time.
    """

    id: str
    J: int = 20

    def __post_init__(self):
        if self.id not in KERNEL_IDS:
            raise ConfigurationError(f"unknown kernel id {self.id!r}; choose from {KERNEL_IDS}")

    @property
    def spatial_dim(self):
        return {"1d": 0, "2d": 1, "3d": 2}[self.id[:2]]

    def terms(self):
        k = self.id
        if k == "1d-exp":
            return [(lambda tp, t: 0.8 * np.exp(-(t - tp)), None)]
        if k == "1d-nonstat":
            return [(lambda tp, t: 0.3 * (0.5 + 0.5 * np.cos(0.2 * tp)) * np.exp(-2 * (t - tp)), None)]
        if k == "1d-infrank":
            return [(lambda tp, t: _infrank_series(tp, t - tp, self.J), None)]
        if k == "2d-exp":
            return [(lambda tp, t: 0.5 * np.exp(-1.5 * (t - tp)), lambda sp, s: np.exp(-0.8 * sp[..., 0]))]
        if k == "3d-inhib":
            return [(lambda tp, t: 0.3 * (1 - 0.01 * t) * np.exp(-2 * (t - tp)), _inhib_space)]
        return _mixture_terms()

    def __call__(self, tp, t, sp=None, s=None):
        tp = np.asarray(tp, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        total = 0.0
        for time_fn, space_fn in self.terms():
            val = time_fn(tp, t)
            if space_fn is not None:
                val = val * space_fn(np.asarray(sp, dtype=np.float64), np.asarray(s, dtype=np.float64))
            total = total + val
        return total


def true_kernel_eval(tk, t_prev, t, s_prev=None, s=None):
    if np.any(np.asarray(t) < np.asarray(t_prev)):
        raise ConfigurationError("true kernels are defined for t >= t_prev")
    out = tk(t_prev, t, s_prev, s)
    return float(out) if np.ndim(out) == 0 else out


class TrueModel:
    """Hawkes-type intensity ``mu + sum k(t_i, t, s_i, s)`` for a :class:`TrueKernel`."""

    def __init__(self, kernel, mu):
        self.kernel = kernel if isinstance(kernel, TrueKernel) else TrueKernel(kernel)
        self.mu = float(mu)
        self.spatial_dim = self.kernel.spatial_dim
        self.Q = 0

    def intensity(self, t, s, hist_t, hist_s):
        """Intensity at a single point given history arrays (events strictly before ``t``)."""
        keep = hist_t < t
        if not np.any(keep):
            return self.mu
        if self.spatial_dim:
            vals = self.kernel(hist_t[keep], t, hist_s[keep], np.asarray(s)[None, :])
        else:
            vals = self.kernel(hist_t[keep], t)
        return self.mu + float(np.sum(vals))

    def intensity_at(self, seq, times, locs=None):
        """Intensity on the product grid ``times x locs``; shape ``(len(times), n_locs)``."""
        times = np.asarray(times, dtype=np.float64).reshape(-1)
        d = self.spatial_dim
        locs = np.zeros((1, 0)) if not d else np.asarray(locs, dtype=np.float64).reshape(-1, d)
        out = np.full((times.size, locs.shape[0]), self.mu)
        for j in range(len(seq)):
            after = times > seq.times[j]
            if not np.any(after):
                continue
            tq = times[after][:, None]
            if d:
                val = self.kernel(seq.times[j], tq, seq.locs[j][None, None, :], locs[None, :, :])
            else:
                val = self.kernel(seq.times[j], tq)
            out[after] += val
        return out

    def log_likelihood(self, seq, n_space=100, panel=0.25, order=8):
        """Exact-to-quadrature log-likelihood.

        The time integral of every term is done by composite Gauss-Legendre
        (``panel`` wide panels starting at the event time); space integrals use
        a ``n_space``-per-axis midpoint grid over ``S``.
        """
        d = self.spatial_dim
        lam = np.array([self.intensity(seq.times[i], seq.locs[i], seq.times[:i], seq.locs[:i])
                        for i in range(len(seq))])
        if np.any(lam <= 0):
            return -np.inf
        total = self.mu * seq.area * seq.T
        nodes, weights = leggauss(order)
        cells, vol = box_cells(seq.bounds, n_space) if d else (None, 1.0)
        for j in range(len(seq)):
            tj = seq.times[j]
            span = seq.T - tj
            if span <= 0:
                continue
            n_pan = max(1, int(np.ceil(span / panel)))
            edges = tj + np.minimum(np.arange(n_pan + 1) * panel, span)
            a, b = edges[:-1, None], edges[1:, None]
            tq = ((b - a) / 2 * nodes + (a + b) / 2).ravel()
            wq = ((b - a) / 2 * weights).ravel()
            for time_fn, space_fn in self.kernel.terms():
                ti = np.sum(wq * time_fn(tj, tq))
                si = 1.0
                if space_fn is not None:
                    si = np.sum(space_fn(seq.locs[j][None, :], cells)) * vol
                total += ti * si
        return float(np.sum(np.log(lam)) - total)


@dataclass
class SimConfig:
    """Thinning settings. ``lam_bar=None`` means: pick it from a pilot run."""

    T: float
    bounds: list = field(default_factory=list)
    lam_bar: float | None = None
    n_sequences: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.lam_bar is not None and not self.lam_bar > 0:
            raise ConfigurationError("lam_bar must be positive")
        if self.T <= 0:
            raise ConfigurationError("T must be positive")
        if self.n_sequences < 0:
            raise ConfigurationError("n_sequences must be non-negative")
        b = np.asarray(self.bounds, dtype=np.float64).reshape(-1, 2)
        if np.any(b[:, 1] <= b[:, 0]):
            raise ConfigurationError(f"empty spatial window {self.bounds}")


def thinning_sample(intensity, config, rng=None, return_sup=False):
    """Generate one sequence by Ogata thinning.

    ``intensity(t, s, hist_t, hist_s)`` must return the conditional intensity
    and ``lam_bar`` must bound it. Candidate times arrive at rate
    ``lam_bar * |S|`` with uniform locations, and a candidate is accepted when
    ``D * lam_bar <= lambda``. ``T``, bounds and ``lam_bar`` come from
    ``config`` (a :class:`SimConfig`). With ``return_sup`` the largest
    intensity seen at any candidate is returned as well.

    Raises
    ------
    DominationError
        If the intensity at a candidate exceeds ``lam_bar``.
    """
    if config.lam_bar is None:
        raise ConfigurationError("thinning needs an explicit lam_bar")
    rng = np.random.default_rng(rng)
    T, lam_bar = config.T, config.lam_bar
    bounds = np.asarray(config.bounds, dtype=np.float64).reshape(-1, 2)
    d = bounds.shape[0]
    lo, width = bounds[:, 0], bounds[:, 1] - bounds[:, 0]
    rate = lam_bar * float(np.prod(width))
    ts, ss = [], []
    hist_t = np.zeros(0)
    hist_s = np.zeros((0, d))
    t = 0.0
    sup_seen = 0.0
    while t < T:
        u = rng.uniform()
        t = t - np.log(u) / rate
        s = lo + width * rng.uniform(size=d)
        D = rng.uniform()
        lam = intensity(t, s, hist_t, hist_s)
        sup_seen = max(sup_seen, lam)
        if lam > lam_bar:
            raise DominationError(f"intensity {lam:.4g} exceeds upper bound {lam_bar:.4g} at t={t:.4g}",
                                  sup_seen=sup_seen)
        if D * lam_bar <= lam:
            ts.append(t)
            ss.append(s)
            hist_t = np.asarray(ts)
            hist_s = np.asarray(ss).reshape(len(ts), d)
    if ts and ts[-1] >= T:
        ts.pop()
        ss.pop()
    seq = EventSequence(np.asarray(ts), T, np.asarray(ss).reshape(len(ts), d) if d else None,
                        bounds if d else None)
    return (seq, sup_seen) if return_sup else seq


def pilot_lam_bar(intensity, T, bounds, seed, n_pilot=5, start=1.0, factor=3.0):
    """Upper bound = ``factor`` x sup of the intensity seen over a few pilot runs.

    The pilot starts from ``start`` and doubles the bound whenever it is
    violated.
    """
    lam_bar = start
    while True:
        rng = np.random.default_rng(seed)
        cfg = SimConfig(T=T, bounds=bounds, lam_bar=lam_bar, n_sequences=n_pilot)
        try:
            sup = max(thinning_sample(intensity, cfg, rng, return_sup=True)[1] for _ in range(n_pilot))
        except DominationError:
            lam_bar *= 2.0
            continue
        return factor * max(sup, 1e-12)


@dataclass
class Dataset:
    sequences: list
    meta: dict

    def __len__(self):
        return len(self.sequences)

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.meta == other.meta
                and len(self) == len(other) and all(a == b for a, b in zip(self.sequences, other.sequences)))


def sequence_seeds(seed, n):
    """Per-sequence seeds: children ``0..n-1`` of ``SeedSequence(seed)``."""
    return np.random.SeedSequence(seed).spawn(n)


def generate_dataset(tk, mu, config, threads=1):
    """Simulate ``config.n_sequences`` independent sequences from ``mu`` + ``tk``.

    Sequence ``i`` uses its own child seed, so the result does not depend on
    ``threads``. Seed layout is documented in :mod:`nskernel.seeding`.

    When ``config.lam_bar`` is None the bound comes from a pilot run; should
    any sequence exceed it, the bound is doubled and the whole dataset is
    simulated again from the same seeds. An explicit bound is never changed
    and a violation raises :class:`DominationError`.
    """
    tk = tk if isinstance(tk, TrueKernel) else TrueKernel(tk)
    truth = TrueModel(tk, mu)
    bounds = np.asarray(config.bounds, dtype=np.float64).reshape(-1, 2)
    if bounds.shape[0] != tk.spatial_dim:
        raise ConfigurationError(f"kernel {tk.id} needs {tk.spatial_dim} spatial bounds, got {bounds.shape[0]}")
    lam_bar = config.lam_bar
    automatic = lam_bar is None
    if automatic:
        pilot_seed = seeding.derive(config.seed, seeding.PILOT)
        lam_bar = pilot_lam_bar(truth.intensity, config.T, bounds, pilot_seed, start=max(1.0, 2 * mu))
    seeds = sequence_seeds(config.seed, config.n_sequences)

    while True:
        run_cfg = SimConfig(T=config.T, bounds=bounds.tolist(), lam_bar=lam_bar,
                            n_sequences=config.n_sequences, seed=config.seed)

        def one(ss, run_cfg=run_cfg):
            return thinning_sample(truth.intensity, run_cfg, np.random.default_rng(ss))

        try:
            if threads > 1:
                with ThreadPoolExecutor(threads) as pool:
                    seqs = list(pool.map(one, seeds))
            else:
                seqs = [one(ss) for ss in seeds]
            break
        except DominationError as exc:
            if not automatic:
                raise
            # a pilot-chosen bound was too low: redo every sequence under a larger one
            log.warning("pilot bound %.4g violated (sup seen %.4g); restarting with %.4g",
                        lam_bar, exc.sup_seen, 2 * max(lam_bar, exc.sup_seen))
            lam_bar = 2 * max(lam_bar, exc.sup_seen)
    meta = {"kernel": tk.id, "mu": float(mu), "seed": int(config.seed), "T": float(config.T),
            "S": bounds.tolist(), "lam_bar": float(lam_bar), "J": tk.J, "n_marks": 0}
    log.info("simulated %d sequences from %s (lam_bar=%.3g)", len(seqs), tk.id, lam_bar)
    return Dataset(seqs, meta)

