"""File formats: JSONL datasets, npz checkpoints, JSON/CSV outputs.

Dataset files hold one JSON record per line. The first line is a header
``{"header": true, "kernel": ..., "mu": ..., "seed": ..., ...}``; every
following line is one sequence
``{"T": ..., "S": [[lo, hi], ...], "events": [[t, s1, s2?, mark?], ...]}``.
Marks are stored as the trailing integer column when the header has
``n_marks > 0``.

Every writer goes through a temporary file in the target directory followed
by :func:`os.replace`, so readers never see partial files.
"""

from __future__ import annotations

import contextlib
import csv
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ShapeError
from .model import NET_GROUPS, EventSequence, KernelModel
from .nets import AdamState, BasisNet
from .simulate import Dataset

CHECKPOINT_VERSION = 1


@contextlib.contextmanager
def atomic_open(path, mode="w", **kwargs):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **kwargs) as fh:
            yield fh
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def _umask():
    mask = os.umask(0)
    os.umask(mask)
    return mask


def _seq_record(seq, marked):
    d = seq.spatial_dim
    cols = [seq.times[:, None]]
    if d:
        cols.append(seq.locs)
    rows = np.hstack(cols).tolist() if len(seq) else []
    if marked:
        for row, m in zip(rows, seq.marks.tolist()):
            row.append(int(m))
    return {"T": float(seq.T), "S": seq.bounds.tolist() if d else [], "events": rows}


def write_dataset(path, dataset):
    meta = dict(dataset.meta)
    marked = int(meta.get("n_marks", 0) or 0) > 0
    with atomic_open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"header": True, **meta}, sort_keys=True) + "\n")
        for seq in dataset.sequences:
            fh.write(json.dumps(_seq_record(seq, marked)) + "\n")


def read_dataset(path):
    """Parse a dataset file. A missing header means unmarked data with empty metadata."""
    meta = {}
    seqs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            if rec.get("header"):
                if seqs:
                    raise ConfigurationError(f"{path}:{lineno}: header after sequence records")
                meta = {k: v for k, v in rec.items() if k != "header"}
                continue
            try:
                seqs.append(_parse_seq(rec, int(meta.get("n_marks", 0) or 0)))
            except (KeyError, ValueError) as exc:
                raise ConfigurationError(f"{path}:{lineno}: bad sequence record ({exc})") from exc
    return Dataset(seqs, meta)


def _parse_seq(rec, n_marks):
    bounds = np.asarray(rec.get("S", []), dtype=np.float64).reshape(-1, 2)
    d = bounds.shape[0]
    width = 1 + d + (1 if n_marks else 0)
    ev = np.asarray(rec["events"], dtype=np.float64).reshape(-1, width)
    marks = ev[:, -1].astype(np.int64) if n_marks else None
    return EventSequence(ev[:, 0].copy(), float(rec["T"]), ev[:, 1:1 + d].copy() if d else None,
                         bounds if d else None, marks)


def save_checkpoint(path, model, state=None, extra=None):
    """Write model parameters (and optimizer state) to an ``.npz`` file.

    Arrays are stored little-endian float64 under ``param/<name>``,
    ``adam_m/<name>`` and ``adam_v/<name>``; everything else is a JSON
    document in the ``meta`` entry.
    """
    arrays = {f"param/{k}": v.astype("<f8") for k, v in model.params().items()}
    meta = {"version": CHECKPOINT_VERSION, "model": model.meta(), "extra": extra or {}}
    if state is not None:
        for k in state.adam.m:
            arrays[f"adam_m/{k}"] = state.adam.m[k].astype("<f8")
            arrays[f"adam_v/{k}"] = state.adam.v[k].astype("<f8")
        meta["state"] = {"w": state.w, "epoch": state.epoch, "n_batches": state.n_batches, "b": state.b,
                         "history": state.history, "feasible_start": state.feasible_start,
                         "adam": {"lr": state.adam.lr, "beta1": state.adam.beta1, "beta2": state.adam.beta2,
                                  "eps": state.adam.eps, "step": state.adam.step, "keys": list(state.adam.m)}}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    with atomic_open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(model, state_or_None, extra)``."""
    from .trainer import TrainState

    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["meta"].tobytes().decode("utf-8"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {meta.get('version')}")
        mm = meta["model"]
        nets = {}
        for g in NET_GROUPS:
            nets[g] = []
            scales = mm.get("in_scale", {}).get(g, [1.0] * len(mm["layer_dims"][g]))
            for idx, (dims, pos, sc) in enumerate(zip(mm["layer_dims"][g], mm["positive_output"][g], scales)):
                n_layers = len(dims) - 1
                W = [z[f"param/{g}.{idx}.W{k}"] for k in range(n_layers)]
                b = [z[f"param/{g}.{idx}.b{k}"] for k in range(n_layers)]
                nets[g].append(BasisNet(dims, W, b, positive_output=pos, in_scale=sc))
        model = KernelModel(mm["L"], mm["R"], mm["Q"], mm["spatial_dim"], mm["tau_max"], mm["a_max"],
                            z["param/mu"], z["param/alpha"], nets, n_marks=mm["n_marks"],
                            temporal_param=mm["temporal_param"], t_max=mm["t_max"])
        state = None
        if "state" in meta:
            s = meta["state"]
            a = s["adam"]
            adam = AdamState(a["lr"], a["beta1"], a["beta2"], a["eps"], a["step"],
                             {k: z[f"adam_m/{k}"].copy() for k in a["keys"]},
                             {k: z[f"adam_v/{k}"].copy() for k in a["keys"]})
            state = TrainState(adam=adam, w=s["w"], epoch=s["epoch"], n_batches=s["n_batches"], b=s["b"],
                               history=s["history"], feasible_start=s.get("feasible_start", True))
    for k, v in model.params().items():
        if not np.all(np.isfinite(v)):
            raise ShapeError(f"checkpoint parameter {k} is not finite")
    return model, state, meta.get("extra", {})


def write_json(path, obj):
    with atomic_open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_csv(path, header, rows):
    with atomic_open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_matrix_csv(path, row_axis, col_axis, values):
    """Matrix as CSV with the column abscissae in the first row and row abscissae in the first column."""
    values = np.asarray(values)
    rows = [[float(r)] + [float(x) for x in vals] for r, vals in zip(row_axis, values)]
    write_csv(path, [""] + [float(c) for c in col_axis], rows)
