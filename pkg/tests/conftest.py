import numpy as np
import pytest

from nskernel.grids import GridSpec
from nskernel.likelihood import grid_values, grad_objective, objective, prepare
from nskernel.model import EventSequence, init_model
from nskernel.trainer import make_feasible

UNIT_SQUARE = np.array([[0.0, 1.0], [0.0, 1.0]])


def random_sequence(rng, n, T=5.0, bounds=None, n_marks=0):
    """``n`` uniform events on ``[0, T] x bounds`` with optional integer marks."""
    times = np.sort(rng.uniform(0.0, T, n))
    locs = None
    if bounds is not None:
        bounds = np.asarray(bounds, dtype=float)
        locs = bounds[:, 0] + (bounds[:, 1] - bounds[:, 0]) * rng.uniform(size=(n, len(bounds)))
    marks = rng.integers(0, n_marks, n) if n_marks else None
    return EventSequence(times, T, locs, bounds, marks)


def small_case(kind, seed=0, hidden=(6, 6)):
    """A small model, two sequences and coarse grids for one of the supported geometries."""
    rng = np.random.default_rng(seed)
    if kind == "temporal":
        m = init_model(L=2, tau_max=2.0, hidden=hidden, mu=1.5, seed=seed)
        seqs = [random_sequence(rng, 5) for _ in range(2)]
        g = GridSpec.for_model(m, n_t=20, n_bar_t=10)
    elif kind == "spatial2":
        m = init_model(L=2, R=2, spatial_dim=2, tau_max=2.0, a_max=0.8, hidden=hidden, mu=1.5, seed=seed)
        seqs = [random_sequence(rng, 5, bounds=UNIT_SQUARE) for _ in range(2)]
        g = GridSpec.for_model(m, n_t=20, n_s=100, n_bar_t=6, n_bar_s=4)
    elif kind == "marked":
        m = init_model(L=1, R=2, Q=2, n_marks=3, spatial_dim=1, tau_max=2.0, a_max=0.8, hidden=hidden,
                       mu=1.5, seed=seed)
        seqs = [random_sequence(rng, 5, bounds=[[0.0, 1.0]], n_marks=3) for _ in range(2)]
        g = GridSpec.for_model(m, n_t=20, n_s=50, n_bar_t=6, n_bar_s=4)
    elif kind == "absolute":
        m = init_model(L=2, tau_max=2.0, hidden=hidden, mu=1.5, seed=seed, temporal_param="absolute", t_max=5.0)
        seqs = [random_sequence(rng, 5) for _ in range(2)]
        g = GridSpec.for_model(m, n_t=40, n_bar_t=10)
    else:
        raise ValueError(kind)
    make_feasible(m, [prepare(s, m, g) for s in seqs], g)
    return m, seqs, g


CASES = ("temporal", "spatial2", "marked", "absolute")


def fd_mismatches(model, seqs, grids, coords=None, h=1e-5, w=2.0, eps_b=0.5, rtol=1e-4, atol=1e-6):
    """Compare the analytic objective gradient with central differences.

    ``coords`` is a list of ``(name, flat_index)``; all coordinates when None.
    Returns the list of mismatching ``(name, index, analytic, fd)``.
    """
    b = float(np.min(grid_values(model, seqs, grids))) - eps_b
    _, grads = grad_objective(model, seqs, w, b, grids)
    params = model.params()
    if coords is None:
        coords = [(k, i) for k, p in params.items() for i in range(p.size)]
    bad = []
    for name, i in coords:
        flat = params[name].reshape(-1)
        old = flat[i]
        flat[i] = old + h
        fp = objective(model, seqs, w, b, grids)
        flat[i] = old - h
        fm = objective(model, seqs, w, b, grids)
        flat[i] = old
        fd = (fp - fm) / (2 * h)
        an = grads[name].reshape(-1)[i]
        if abs(fd - an) > rtol * max(abs(fd), abs(an)) + atol:
            bad.append((name, i, an, fd))
    return bad


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
