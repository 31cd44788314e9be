"""Command line entry point: ``dcc <task> [options]``.

Every task accepts ``--config file.json``; command-line flags override the
file. Exit codes: 0 success, 2 configuration error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import condenser as cd
from . import data
from . import evaluation as ev
from . import io
from . import toy

log = logging.getLogger("dcc")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
TASKS = ("condense", "eval", "toy", "ntk", "continual", "report")
_PAYLOAD = {"condense": "condense", "ntk": "condense", "eval": "eval", "toy": "toy",
            "continual": "continual", "report": "report"}


class ConfigError(ValueError):
    pass


# config resolution -----------------------------------------------------------

def load_run_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path}: {e}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    return cfg


def resolve(task: str, file_cfg: dict, overrides: dict) -> dict:
    """Merge a RunConfig dict with flag overrides and check its shape.

    A RunConfig has ``task``, optional ``dataset``, ``out`` and ``seed``, and
    exactly one payload section named after the task (``condense`` for both
    condense and ntk).
    """
    if file_cfg.get("task", task) != task:
        raise ConfigError(f"config is for task {file_cfg['task']!r}, not {task!r}")
    want = _PAYLOAD[task]
    extra = [k for k in set(_PAYLOAD.values()) if k in file_cfg and k != want]
    if extra:
        raise ConfigError(f"config for {task!r} must only carry the {want!r} payload, found {extra}")
    payload = dict(file_cfg.get(want, {}))
    top = {k: v for k, v in file_cfg.items() if k not in _PAYLOAD.values() and k != "task"}
    for k, v in overrides.items():
        if v is None:
            continue
        if k in ("dataset", "format", "out", "seed"):
            top[k] = v
        else:
            payload[k] = v
    if "seed" in top:
        payload.setdefault("seed", top["seed"])
    return {"task": task, **top, want: payload}


# argument parsing ------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="JSON run config; flags override its fields")
    p.add_argument("--out", help="output directory (default: out)")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def _dataset_flags(p):
    p.add_argument("--dataset", help="builtin name, idx directory or raw-f32 manifest")
    p.add_argument("--format", choices=["idx", "raw-f32", "builtin-toy"])


def _condense_flags(p):
    p.add_argument("--ipc", type=int)
    p.add_argument("--mode", dest="matching_mode")
    p.add_argument("--warmup", choices=["none", "simple", "bilevel"])
    p.add_argument("--K-o", dest="K_o", type=int)
    p.add_argument("--K-i", dest="K_i", type=int)
    p.add_argument("--T", dest="T", type=int)
    p.add_argument("--gamma-o", dest="gamma_o", type=int)
    p.add_argument("--gamma-i", dest="gamma_i", type=int)
    p.add_argument("--lr-synthetic", dest="lr_synthetic", type=float)
    p.add_argument("--real-batch", dest="real_batch_per_class", type=int)
    p.add_argument("--distance", choices=["layerwise_cosine", "l2"])
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--width", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--gram-every", dest="gram_every", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dcc", description="gradient-matching dataset condensation")
    sub = ap.add_subparsers(dest="task", required=True)

    p = sub.add_parser("condense", help="learn a condensed set")
    _common(p), _dataset_flags(p), _condense_flags(p)

    p = sub.add_parser("ntk", help="condense while recording Gram snapshots; report NTK velocity")
    _common(p), _dataset_flags(p), _condense_flags(p)

    p = sub.add_parser("eval", help="train fresh models on a condensed or selected set")
    _common(p), _dataset_flags(p)
    p.add_argument("--condensed", help="path to a condensed set (.bin or .json)")
    p.add_argument("--select", choices=["random", "grand", "el2n"], help="baseline selection instead")
    p.add_argument("--ipc", type=int)
    p.add_argument("--runs", dest="n_models_per_set", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--depth", type=int)

    p = sub.add_parser("toy", help="two-Gaussian toy model: closed forms and bound checks")
    _common(p)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--trials", type=int)
    p.add_argument("--N", type=int)
    p.add_argument("--eps", type=float)
    p.add_argument("--lam", type=float)

    p = sub.add_parser("continual", help="class-incremental replay on a finegrained task sequence")
    _common(p)
    p.add_argument("--builder", choices=["ring_buffer", "condensed", "both"])
    p.add_argument("--memory", dest="memory_per_class", type=int)
    p.add_argument("--tasks", dest="n_tasks", type=int)
    p.add_argument("--epochs-per-task", dest="epochs_per_task", type=int)

    p = sub.add_parser("report", help="print CSV columns as gnuplot-ready whitespace text")
    _common(p)
    p.add_argument("--input", help="CSV file to convert")
    p.add_argument("--columns", help="comma-separated column names (default: all numeric)")
    return ap


def _overrides(ns) -> dict:
    skip = {"task", "config", "verbose", "width", "depth"}
    d = {k: v for k, v in vars(ns).items() if k not in skip}
    hyper = {k: getattr(ns, k) for k in ("width", "depth") if getattr(ns, k, None) is not None}
    if hyper:
        d["model_hyper"] = hyper
    return d


# tasks -----------------------------------------------------------------------

def _dataset(rc):
    name = rc.get("dataset")
    if not name:
        raise ConfigError("a --dataset is required for this task")
    try:
        return data.load_dataset(name, rc.get("format"), **rc.get("dataset_kwargs", {}))
    except FileNotFoundError as e:
        raise data.DataError(str(e)) from None


def _condense_cfg(payload: dict) -> cd.CondenseConfig:
    payload = dict(payload)
    if "model_hyper" in payload:
        payload["model_hyper"] = {**cd.CondenseConfig().model_hyper, **payload["model_hyper"]}
    try:
        return cd.CondenseConfig.from_dict(payload)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"condense config: {e}") from None


def _out(rc) -> Path:
    p = Path(rc.get("out") or "out")
    p.mkdir(parents=True, exist_ok=True)
    return p


def task_condense(rc, record_grams=False):
    ds = _dataset(rc)
    payload = dict(rc["condense"])
    if not record_grams:
        payload.setdefault("gram_every", 0)
    cfg = _condense_cfg(payload)
    S, runlog = cd.condense(ds, cfg)
    out = _out(rc)
    meta = {"dataset": rc.get("dataset"), "format": rc.get("format"), "run_config": rc}
    io.save_condensed(S, out / "set.bin", cfg, meta, clip=(float(ds.x_train.min()), float(ds.x_train.max())))
    io.write_runlog_csv(runlog, out / "runlog.csv")
    summary = {"task": rc["task"], "steps": len(runlog.rows), "final_loss": runlog.rows[-1][3] if runlog.rows else None,
               "config_hash": cfg.hash(), "notes": runlog.notes}
    if record_grams:
        io.save_grams(runlog, out / "grams.bin")
        series = ev.GramSeries.from_runlog(runlog)
        if len(series.snapshots) >= 2:
            io.write_csv([{"index": i, "step": series.snapshots[i + 1][0], "outer": series.outers[i + 1],
                           "velocity": v} for i, v in enumerate(series.velocities)], out / "velocity.csv")
            peaks = ev.reinit_peaks(series)
            summary["reinit_peaks"] = peaks
            summary["peak_median"] = float(np.median([p["peak"] for p in peaks])) if peaks else None
    io.write_json(summary, out / f"{rc['task']}.json")
    print(f"{rc['task']}: {cfg.matching_mode} ipc={cfg.ipc} steps={len(runlog.rows)} "
          f"final_loss={summary['final_loss']:.4f} -> {out / 'set.bin'}" if runlog.rows
          else f"{rc['task']}: no steps run -> {out / 'set.bin'}")
    return EXIT_OK


def _eval_protocol(payload) -> ev.EvalProtocol:
    payload = dict(payload)
    for k in ("condensed", "select", "ipc"):
        payload.pop(k, None)
    if "model_hyper" in payload:
        payload["model_hyper"] = {**ev.EvalProtocol().model_hyper, **payload["model_hyper"]}
    try:
        return ev.EvalProtocol(**payload)
    except TypeError as e:
        raise ConfigError(f"eval config: {e}") from None


def task_eval(rc):
    payload = rc["eval"]
    prot = _eval_protocol(payload)
    condensed, select = payload.get("condensed"), payload.get("select")
    if bool(condensed) == bool(select):
        raise ConfigError("eval needs exactly one of --condensed or --select")
    if condensed:
        try:
            S, manifest = io.load_condensed(condensed)
        except (FileNotFoundError, io.ArtifactError) as e:
            raise data.DataError(str(e)) from None
        if not rc.get("dataset"):
            extra = manifest.get("extra", {})
            rc = {**rc, "dataset": extra.get("dataset"), "format": extra.get("format")}
        method = (manifest.get("config") or {}).get("matching_mode", "condensed")
        ds = _dataset(rc)
    else:
        ds = _dataset(rc)
        ipc = payload.get("ipc") or 1
        if select == "random":
            S = ev.random_select(ds, ipc, prot.seed_base)
        else:
            scores = ev.grand_el2n_scores(ds, protocol=prot, seed=prot.seed_base)
            S = ev.select_by_score(ds, scores[select], ipc)
        method = select
    if S.images.shape[1:] != ds.x_test.shape[1:]:
        raise data.DataError(f"condensed images {S.images.shape[1:]} do not match test images {ds.x_test.shape[1:]}")
    res = ev.evaluate(S, ds, prot)
    out = _out(rc)
    row = {"method": method, "dataset": ds.name, "ipc": S.ipc, "mean": res.mean, "std": res.std}
    io.write_csv([row], out / "eval.csv")
    io.write_json({**row, "accuracies": res.accuracies, "degenerate": res.degenerate,
                   "protocol": prot.to_dict()}, out / "eval.json")
    print(f"eval: {method} {ds.name} ipc={S.ipc} acc={100 * res.mean:.2f}+-{100 * res.std:.2f} "
          f"over {len(res.accuracies)} runs")
    return EXIT_OK


def task_toy(rc):
    payload = dict(rc["toy"])
    trials = int(payload.pop("trials", 20))
    try:
        spec = toy.ToySpec(**payload)
    except TypeError as e:
        raise ConfigError(f"toy config: {e}") from None
    rep = toy.verify_bounds(spec, trials)
    rows = [{"alpha": spec.alpha, "beta": spec.beta, "strategy": toy.CLASS_WISE,
             "R": float(np.mean(rep["classwise_R"])), "bound": rep["bound"]},
            {"alpha": spec.alpha, "beta": spec.beta, "strategy": toy.CLASS_COLLECTIVE,
             "R": float(np.mean(rep["collective_R"])), "bound": 1.0}]
    out = _out(rc)
    io.write_csv(rows, out / "toy.csv", ["alpha", "beta", "strategy", "R", "bound"])
    io.write_json(rep, out / "toy_report.json")
    print(f"toy: alpha={spec.alpha} beta={spec.beta} class-wise R max={rep['classwise_R_max']:.4f} "
          f"(bound {rep['bound']:.4f}) collective R min={rep['collective_R_min']:.4f}")
    return EXIT_OK


def task_continual(rc):
    payload = dict(rc["continual"])
    n_tasks = int(payload.pop("n_tasks", 3))
    builder = payload.pop("builder", "both")
    seed = int(payload.pop("seed", 0))
    prot = _eval_protocol(payload.pop("protocol", {"model_hyper": {"width": 32, "depth": 2}, "epochs": 0}))
    ccfg = _condense_cfg(payload.pop("condense", {"K_o": 50, "gamma_o": 12, "K_i": 5, "T": 4,
                                                  "real_batch_per_class": 32, "gram_every": 0,
                                                  "model_hyper": {"width": 16, "depth": 2}}))
    n_per_class = int(payload.pop("n_per_class", 300))
    tasks = [data.make_finegrained(n_per_class=n_per_class, n_test_per_class=n_per_class, seed=seed,
                                   task=t, n_tasks=n_tasks, name=f"finegrained2-t{t}") for t in range(n_tasks)]
    builders = ["ring_buffer", "condensed"] if builder == "both" else [builder]
    rows = []
    for b in builders:
        try:
            cfg = ev.ContinualConfig(tasks=tasks, builder=b, protocol=prot, condense_cfg=ccfg, seed=seed, **payload)
        except TypeError as e:
            raise ConfigError(f"continual config: {e}") from None
        res = ev.continual_run(cfg)
        rows += [{"builder": b, "stage": i + 1, "avg_acc": a} for i, a in enumerate(res.stage_avg)]
        print(f"continual: {b} stage averages " + " ".join(f"{100 * a:.1f}" for a in res.stage_avg))
    io.write_csv(rows, _out(rc) / "continual.csv", ["builder", "stage", "avg_acc"])
    return EXIT_OK


def task_report(rc):
    payload = rc["report"]
    src = payload.get("input")
    if not src:
        raise ConfigError("report needs --input")
    import csv

    try:
        with open(src, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except FileNotFoundError:
        raise data.DataError(f"{src} not found") from None
    if not rows:
        raise data.DataError(f"{src} has no rows")
    cols = payload.get("columns")
    cols = cols.split(",") if cols else [c for c in rows[0] if _numeric(rows[0][c])]
    missing = [c for c in cols if c not in rows[0]]
    if missing:
        raise ConfigError(f"columns {missing} not in {src}")
    lines = ["# " + " ".join(cols)] + [" ".join(r[c] for c in cols) for r in rows]
    text = "\n".join(lines) + "\n"
    out = _out(rc) / (Path(src).stem + ".dat")
    out.write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def _numeric(v):
    try:
        float(v)
        return True
    except (TypeError, ValueError):
        return False


def run(rc: dict) -> int:
    task = rc.get("task")
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    if task == "condense":
        return task_condense(rc)
    if task == "ntk":
        payload = rc["condense"]
        payload.setdefault("gram_every", 10)
        return task_condense(rc, record_grams=True)
    return {"eval": task_eval, "toy": task_toy, "continual": task_continual, "report": task_report}[task](rc)


def main(argv=None) -> int:
    ap = build_parser()
    ns = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = resolve(ns.task, load_run_config(ns.config), _overrides(ns))
        return run(rc)
    except cd.NumericalError as e:
        print(f"error: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except data.DataError as e:
        print(f"error: data: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as e:
        print(f"error: config: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
