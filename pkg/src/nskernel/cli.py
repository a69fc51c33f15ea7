"""Command-line interface: ``nskernel {simulate,fit,eval,rank,predict}``.

Exit codes: 0 success, 1 usage/configuration error, 2 runtime failure
(infeasible training, domination violation, missing files, numerical trouble).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .config import dump_config, load_config, parse_override
from .errors import ConfigurationError, NSKernelError
from .io import (atomic_open, load_checkpoint, read_dataset, save_checkpoint, write_csv, write_dataset,
                 write_json, write_matrix_csv)
from .model import init_model
from .seeding import INIT, derive
from .simulate import SimConfig, TrueKernel, TrueModel, generate_dataset
from .trainer import Trainer, train_test_split

log = logging.getLogger("nskernel")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--seed", type=int, help="root seed (overrides config)")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--threads", type=int, help="worker threads for simulation")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config entry, e.g. --set train.epochs=20")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser():
    parser = _Parser(prog="nskernel", description="Low-rank neural kernels for spatio-temporal point processes.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="simulate a synthetic dataset by thinning")
    _common(p)
    p.add_argument("--kernel", help="ground-truth kernel id")
    p.add_argument("--sequences", type=int, help="number of sequences")
    p.add_argument("--mu", type=float)
    p.add_argument("--horizon", type=float, help="observation horizon T")

    p = sub.add_parser("fit", help="train a model")
    _common(p)
    p.add_argument("--data", help="dataset file (default: simulate from the config)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out split")
    _common(p)
    p.add_argument("--checkpoint", help="fitted model (.npz)")
    p.add_argument("--true-model", action="store_true",
                   help="evaluate the dataset's ground-truth kernel instead of a checkpoint")
    p.add_argument("--data", help="dataset file")

    p = sub.add_parser("rank", help="numerical rank of a kernel in both coordinate systems")
    _common(p)
    p.add_argument("--kernel", help="ground-truth kernel id (default from config)")
    p.add_argument("--checkpoint", help="use a fitted temporal model instead")
    p.add_argument("--n-grid", type=int)
    p.add_argument("--extent", type=float)

    p = sub.add_parser("predict", help="predict the next event after each sequence in a file")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prefix", required=True, help="dataset file holding the observed histories")
    return parser


def _resolve_config(args, extra):
    overrides = dict(parse_override(s) for s in args.set)
    for key, val in extra.items():
        if val is not None:
            overrides[key] = val
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    if args.threads is not None:
        overrides["threads"] = args.threads
    return load_config(args.config, overrides).resolved()


def _write_config(cfg, out):
    with atomic_open(out / "config.yaml", "w") as fh:
        fh.write(dump_config(cfg))


def _simulate(cfg):
    ds = cfg.dataset
    sim = SimConfig(T=ds.T, bounds=ds.bounds or [], lam_bar=ds.lam_bar, n_sequences=ds.n_sequences, seed=cfg.seed)
    return generate_dataset(TrueKernel(ds.kernel), ds.mu, sim, threads=cfg.threads)


def _load_data(cfg, path):
    if path:
        return read_dataset(path)
    if cfg.dataset.path:
        return read_dataset(cfg.dataset.path)
    return _simulate(cfg)


def cmd_simulate(args):
    cfg = _resolve_config(args, {"dataset.kernel": args.kernel, "dataset.n_sequences": args.sequences,
                                 "dataset.mu": args.mu, "dataset.T": args.horizon, "dataset.path": None})
    out = Path(cfg.out)
    data = _simulate(cfg)
    write_dataset(out / "dataset.jsonl", data)
    _write_config(cfg, out)
    print(f"wrote {len(data)} sequences to {out / 'dataset.jsonl'}")
    return 0


def _init_from_config(cfg, train_seqs, meta):
    md = cfg.model
    d = len(train_seqs[0].bounds) if train_seqs else len(meta.get("S", []))
    mu = md.mu_init
    if mu is None:
        n = sum(len(s) for s in train_seqs)
        k = md.n_marks if md.Q else 1
        mu = n / max(sum(s.T * s.area for s in train_seqs), 1e-12) / k
    if md.tau_max is None:
        raise ConfigurationError("model.tau_max must be set for datasets without a kernel preset")
    if d and md.a_max is None:
        raise ConfigurationError("model.a_max must be set for spatial data")
    t_scale = max((s.T for s in train_seqs), default=meta.get("T") or 1.0)
    bounds = train_seqs[0].bounds if train_seqs and d else np.asarray(meta.get("S") or [[0.0, 1.0]], float)
    s_scale = float(np.max(np.abs(bounds))) or 1.0
    return init_model(L=md.L, R=md.R if d else 1, Q=md.Q, spatial_dim=d, tau_max=md.tau_max, a_max=md.a_max,
                      hidden=md.hidden, n_marks=md.n_marks, temporal_param=md.temporal_param, t_max=md.t_max,
                      mu=mu, seed=derive(cfg.seed, INIT), t_scale=t_scale, s_scale=s_scale)


def cmd_fit(args):
    cfg = _resolve_config(args, {"train.epochs": args.epochs, "train.learning_rate": args.lr,
                                 "train.batch_size": args.batch_size})
    out = Path(cfg.out)
    data = _load_data(cfg, args.data)
    train_seqs, test_seqs = train_test_split(data.sequences, cfg.dataset.train_fraction, cfg.seed)
    tcfg = cfg.train_config()
    state = None
    if args.resume:
        model, state, _ = load_checkpoint(args.resume)
    else:
        model = _init_from_config(cfg, train_seqs, data.meta)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(cfg, out)
    if not (args.data or cfg.dataset.path):
        write_dataset(out / "dataset.jsonl", data)
    ckpt = out / "checkpoint.npz"
    extra = {"dataset": data.meta, "seed": cfg.seed}
    trainer = Trainer(model, train_seqs, tcfg, state=state, log_path=out / "training_log.csv")
    trainer.fit(checkpoint=lambda m, s: save_checkpoint(ckpt, m, s, extra),
                checkpoint_every=cfg.train.checkpoint_every)
    lowest = trainer.min_training_intensity() if trainer.state.epoch else float("nan")
    summary = {"epochs": trainer.state.epoch, "batches": trainer.state.n_batches, "w": trainer.state.w,
               "n_train": len(train_seqs), "n_test": len(test_seqs), "min_training_intensity": lowest}
    write_json(out / "fit_summary.json", summary)
    print(f"trained {trainer.state.epoch} epochs; checkpoint {ckpt}")
    return 0


def cmd_eval(args):
    cfg = _resolve_config(args, {})
    if not args.true_model:
        if not args.checkpoint:
            raise ConfigurationError("eval needs --checkpoint or --true-model")
        if not Path(args.checkpoint).is_file():
            raise FileNotFoundError(f"checkpoint {args.checkpoint} not found")
    data = _load_data(cfg, args.data)
    _, test_seqs = train_test_split(data.sequences, cfg.dataset.train_fraction, cfg.seed)
    if not test_seqs:
        raise ConfigurationError("held-out split is empty; lower dataset.train_fraction")
    truth = _truth_from_meta(data.meta)
    if args.true_model:
        if truth is None:
            raise ConfigurationError("dataset has no ground-truth kernel in its header")
        model = truth
    else:
        model = load_checkpoint(args.checkpoint)[0]
    grids = None if args.true_model else cfg.train_config().grids_for(model)
    report = ev.evaluate(model, test_seqs, truth=truth, grids=grids,
                         predict=cfg.eval.predict and not args.true_model,
                         mre_grid=(cfg.eval.mre_n_t, cfg.eval.mre_n_s))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(cfg, out)
    write_json(out / "report.json", report.to_dict())
    _emit_plot_data(cfg, model, truth, test_seqs, grids, out)
    print(f"log-likelihood per event {report.loglik_per_event:.4f}"
          + (f", MRE {report.mre:.4f}" if report.mre is not None else ""))
    return 0


def _truth_from_meta(meta):
    if meta.get("kernel") in (None, "") or meta.get("mu") is None:
        return None
    return TrueModel(TrueKernel(meta["kernel"], J=meta.get("J", 20)), meta["mu"])


def _emit_plot_data(cfg, model, truth, seqs, grids, out):
    n = cfg.eval.heatmap_n
    T = seqs[0].T
    d = seqs[0].spatial_dim
    centre = seqs[0].bounds.mean(axis=1) if d else None
    zero = np.zeros(d) if d else None
    tau_ext = model.tau_max if not isinstance(model, TrueModel) else (cfg.model.tau_max or T)
    fns = {"learned": model}
    if truth is not None:
        fns["true"] = truth
    for name, m in fns.items():
        fn = ev.true_kernel_fn(m, centre, zero) if isinstance(m, TrueModel) else ev.fitted_kernel_fn(m, centre, zero)
        tp, tau, vals = ev.kernel_heatmap(fn, T, tau_ext, n)
        write_matrix_csv(out / f"kernel_{name}.csv", tp, tau, vals)
        if d == 2:
            a_ext = cfg.model.a_max or 1.0
            ax, _, sv = ev.spatial_heatmap(m, 0.0, 0.1 * tau_ext, centre, a_ext, min(n, 60))
            write_matrix_csv(out / f"kernel_spatial_{name}.csv", ax, ax, sv)
    for i, seq in enumerate(seqs[:cfg.eval.n_curves]):
        times, lam = ev.intensity_curve(model, seq, grids=grids)
        cols = [times, lam]
        header = ["t", "learned"]
        if truth is not None:
            cols.append(ev.intensity_curve(truth, seq)[1])
            header.append("true")
        write_csv(out / f"intensity_{i}.csv", header, np.column_stack(cols).tolist())


def cmd_rank(args):
    cfg = _resolve_config(args, {"eval.rank_n_grid": args.n_grid, "eval.rank_extent": args.extent,
                                 "dataset.kernel": args.kernel})
    e = cfg.eval
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)[0]
        if model.spatial_dim:
            raise ConfigurationError("rank analysis is defined for temporal kernels")
        fn, label = ev.fitted_kernel_fn(model), args.checkpoint
    else:
        tk = TrueKernel(cfg.dataset.kernel)
        if tk.spatial_dim:
            raise ConfigurationError("rank analysis is defined for temporal kernels")
        fn, label = tk, tk.id
    result = {"kernel": label, "n_grid": e.rank_n_grid, "tolerance": e.rank_tolerance, "extent": e.rank_extent}
    for p in ev.PARAMETERIZATIONS:
        result[p] = ev.kernel_matrix_rank(fn, p, e.rank_n_grid, e.rank_tolerance, e.rank_extent)
    out = Path(cfg.out)
    _write_config(cfg, out)
    write_json(out / "rank.json", result)
    print(f"{label}: rank (t', t) = {result['history-time']}, rank (t', t - t') = {result['history-displacement']}")
    return 0


def cmd_predict(args):
    cfg = _resolve_config(args, {})
    if not Path(args.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint {args.checkpoint} not found")
    model = load_checkpoint(args.checkpoint)[0]
    data = read_dataset(args.prefix)
    preds = []
    for seq in data.sequences:
        p = ev.predict_next_event(model, seq)
        rec = {"time": p.time, "truncated": p.truncated}
        if p.location is not None:
            rec["location"] = p.location.tolist()
        if p.mark_probs is not None:
            rec["mark_probs"] = p.mark_probs.tolist()
            rec["mark"] = p.mark
        preds.append(rec)
    out = Path(cfg.out)
    _write_config(cfg, out)
    write_json(out / "predictions.json", preds)
    for i, rec in enumerate(preds):
        print(i, rec)
    return 0


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "eval": cmd_eval, "rank": cmd_rank, "predict": cmd_predict}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"nskernel: configuration error: {exc}", file=sys.stderr)
        return 1
    except (NSKernelError, FileNotFoundError, OSError) as exc:
        print(f"nskernel: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
