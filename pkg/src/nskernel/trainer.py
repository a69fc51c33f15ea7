"""Mini-batch training with an adaptive log-barrier.

Each mini-batch step:

1. ``b`` is set to the smallest barrier-grid intensity of the batch minus
   ``eps_b``;
2. the objective ``-sum loglik + barrier / w`` and its gradient are computed;
3. Adam takes a step, ``mu`` is clipped at zero;
4. the step is checked: the intensity must stay positive at every training
   event (so the next batch has a finite log-likelihood), and a barrier-grid
   intensity of the batch that was positive must stay positive. Otherwise
   the step is undone and retried with half the learning rate (up to
   ``max_backoff`` times);
5. ``w`` becomes ``w0 * a**k`` after the k-th batch.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .errors import ConfigurationError, InfeasibleError
from .grids import GridSpec
from .likelihood import Batch, min_intensity, objective_parts, prepare
from .nets import AdamState, adam_step

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "neg_loglik", "barrier", "w", "b")


@dataclass
class TrainConfig:
    """Optimizer and barrier settings.

    ``freeze`` lists parameter names (as in ``model.params()``) or group
    prefixes such as ``"alpha"`` or ``"phi"`` that are held fixed.
    """

    learning_rate: float = 0.1
    batch_size: int = 64
    epochs: int = 50
    w0: float = 1.0
    a: float = 1.2
    eps_b: float = 1e-3
    seed: int = 0
    max_backoff: int = 8
    freeze: tuple = ()
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    n_t: int = 50
    n_s: int = 1500
    n_bar_t: int = 50
    n_bar_s: int = 15

    def __post_init__(self):
        if not self.a > 1:
            raise ConfigurationError(f"barrier growth factor a must exceed 1, got {self.a}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if not self.eps_b > 0:
            raise ConfigurationError("eps_b must be positive")
        if not self.learning_rate > 0 or not self.w0 > 0:
            raise ConfigurationError("lr and w0 must be positive")
        if self.epochs < 0 or self.max_backoff < 0:
            raise ConfigurationError("epochs and max_backoff must be non-negative")
        self.freeze = tuple(self.freeze)

    def grids_for(self, model):
        return GridSpec.for_model(model, self.n_t, self.n_s, self.n_bar_t, self.n_bar_s)


@dataclass
class TrainState:
    """Everything needed to resume training besides the model parameters."""

    adam: AdamState
    w: float
    epoch: int = 0
    n_batches: int = 0
    b: float = float("nan")
    history: list = field(default_factory=list)
    feasible_start: bool = False


def _frozen(name, freeze):
    return any(name == f or name.startswith(f + ".") for f in freeze)


def compute_b(model, batch, grids, eps_b=1e-3):
    """Barrier offset ``min(grid values) - eps_b`` for one batch.

    ``batch`` may be a :class:`~nskernel.likelihood.Batch` or a list of
    sequences. For marked models the grid values are the per-class history
    sums that the marked barrier acts on.
    """
    if not isinstance(batch, Batch):
        batch = Batch([prepare(s, model, grids) for s in batch], model, grids)
    parts = objective_parts(model, batch, grids, w=1.0, b=None, need_grad=False, eps_b=eps_b)[2]
    return parts["b"]


def train_test_split(seqs, train_frac=0.9, seed=0):
    """Random split; the permutation is drawn from the documented split seed."""
    if not 0 < train_frac <= 1:
        raise ConfigurationError("train_frac must be in (0, 1]")
    perm = seeding.rng(seed, seeding.SPLIT).permutation(len(seqs))
    n_train = int(round(train_frac * len(seqs)))
    return [seqs[i] for i in perm[:n_train]], [seqs[i] for i in perm[n_train:]]


def init_state(model, config):
    params = {k: v for k, v in model.params().items() if not _frozen(k, config.freeze)}
    adam = AdamState.for_params(params, lr=config.learning_rate, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
    return TrainState(adam=adam, w=float(config.w0))


def make_feasible(model, preps, grids, max_halvings=30):
    """Halve ``alpha`` until the intensity is positive on all events and barrier grids.

    Returns the number of halvings applied.
    """
    batch = Batch(preps, model, grids)
    for k in range(max_halvings + 1):
        ev, gr, _ = min_intensity(model, batch, grids)
        if ev > 0 and gr > 0:
            if k:
                log.info("initial alpha scaled by 2^-%d to make the intensity positive", k)
            return k
        model.alpha *= 0.5
    raise InfeasibleError("could not find a feasible starting point by shrinking alpha")


class Trainer:
    """Stateful driver around :func:`train`, convenient for checkpointing."""

    def __init__(self, model, seqs, config=None, grids=None, state=None, log_path=None):
        self.model = model
        self.config = config or TrainConfig()
        self.grids = grids or self.config.grids_for(model)
        self.preps = [prepare(s, model, self.grids) for s in seqs]
        if not self.preps:
            raise ConfigurationError("no training sequences")
        self.events = Batch([prepare(s, model, self.grids, points=None) for s in seqs], model, self.grids)
        self.state = state
        self.log_path = log_path
        if self.state is None:
            self.state = init_state(model, self.config)

    def run_epoch(self):
        cfg, st, model, grids = self.config, self.state, self.model, self.grids
        order = seeding.rng(cfg.seed, seeding.SHUFFLE, st.epoch).permutation(len(self.preps))
        live = {k: v for k, v in model.params().items() if not _frozen(k, cfg.freeze)}
        tot_nll = tot_bar = 0.0
        n_ev = n_b = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = Batch([self.preps[i] for i in order[start:start + cfg.batch_size]], model, grids)
            _, grads, parts = objective_parts(model, batch, grids, st.w, b=None, need_grad=True, eps_b=cfg.eps_b)
            st.b = parts["b"]
            tot_nll += parts["neg_loglik"]
            tot_bar += parts["barrier"]
            n_ev += parts["n_events"]
            n_b += 1
            grid_floor = 0.0 if parts["grid_lam_min"] > 0 else -np.inf
            self._step(live, {k: grads[k] for k in live}, batch, grid_floor)
            st.n_batches += 1
            # closed form rather than repeated products, so w is exactly w0 * a**k
            st.w = cfg.w0 * cfg.a ** st.n_batches
        st.epoch += 1
        row = {"epoch": st.epoch, "neg_loglik": tot_nll / max(n_ev, 1), "barrier": tot_bar / n_b,
               "w": st.w, "b": st.b}
        st.history.append(row)
        return row

    def _step(self, live, grads, batch, grid_floor):
        cfg, st = self.config, self.state
        saved = {k: v.copy() for k, v in live.items()}
        saved_adam = st.adam.copy()
        lr = cfg.learning_rate
        for attempt in range(cfg.max_backoff + 1):
            adam_step(live, grads, st.adam, lr=lr)
            if "mu" in live:
                np.maximum(live["mu"], 0.0, out=live["mu"])
            ev = min_intensity(self.model, self.events, self.grids)[0]
            gr = min_intensity(self.model, batch, self.grids)[1] if ev > 0 else -np.inf
            if ev > 0 and gr > grid_floor:
                if attempt:
                    log.debug("step accepted after %d learning-rate halvings", attempt)
                return
            for k, v in live.items():
                v[...] = saved[k]
            st.adam = saved_adam.copy()
            lr *= 0.5
        raise InfeasibleError(f"no feasible step after {cfg.max_backoff} learning-rate halvings "
                              f"(batch {st.n_batches}, epoch {st.epoch})")

    def fit(self, epochs=None, checkpoint=None, checkpoint_every=0):
        """Train until ``state.epoch == epochs`` (default ``config.epochs``).

        ``checkpoint(model, state)`` is called every ``checkpoint_every``
        epochs and at the end, when given.
        """
        target = self.config.epochs if epochs is None else epochs
        writer = None
        fh = None
        if self.log_path is not None:
            fh = open(self.log_path, "a" if self.state.epoch else "w", newline="")
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            if not self.state.epoch:
                writer.writeheader()
        try:
            if self.state.epoch < target and not self.state.feasible_start:
                make_feasible(self.model, self.preps, self.grids)
                self.state.feasible_start = True
            while self.state.epoch < target:
                t0 = time.perf_counter()
                row = self.run_epoch()
                log.info("epoch %d  nll/event %.4f  barrier %.4g  w %.3g  (%.1fs)", row["epoch"],
                         row["neg_loglik"], row["barrier"], row["w"], time.perf_counter() - t0)
                if writer:
                    writer.writerow(row)
                    fh.flush()
                if checkpoint and checkpoint_every and self.state.epoch % checkpoint_every == 0:
                    checkpoint(self.model, self.state)
        finally:
            if fh:
                fh.close()
        if checkpoint:
            checkpoint(self.model, self.state)
        return self.state

    def min_training_intensity(self):
        """Smallest intensity over the events and barrier grids of all training sequences."""
        ev, gr, _ = min_intensity(self.model, Batch(self.preps, self.model, self.grids), self.grids)
        return min(ev, gr)


def train(model, seqs, config=None, grids=None, state=None, log_path=None):
    """Fit ``model`` in place on ``seqs``; returns ``(model, state)``."""
    trainer = Trainer(model, seqs, config, grids, state, log_path)
    trainer.fit()
    if trainer.state.epoch:
        lowest = trainer.min_training_intensity()
        if not lowest > 0:
            log.warning("fitted intensity reaches %.4g on the training barrier grids", lowest)
    return model, trainer.state
