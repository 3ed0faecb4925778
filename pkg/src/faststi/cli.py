"""Command-line entry points: generate-synth, train, impute, evaluate, bench and align.

Exit codes are 0 on success, 1 when a run fails and 2 for usage or
configuration errors. Failures print a one-line JSON error record on stderr
(and into ``error.json`` when an output directory is known).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataError, Dataset, Normalizer, load_csv_dataset, save_csv_dataset, split_bounds, synth_generate
from .graph import GraphError, graph_from_distances
from .metrics import MetricError, evaluate
from .model import ModelConfig, NetworkPredictor, load_checkpoint, save_checkpoint, init_params
from .pipeline import impute_series, time_sampler, windowed_series
from .schedule import SIX_STEP_XIS, ScheduleError, build_aligned_schedule, schedule_from_dict, schedule_to_json
from .solvers import METHODS, SamplerConfig, SamplerError, SamplerTrace, sample
from .training import MaskSpec, TrainConfig, make_targets, train_loop

log = logging.getLogger("faststi")


class UsageError(Exception):
    """Bad flags, configs or inputs; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- run configuration ---------------------------------------------------------

RUN_SECTIONS = ("dataset", "output_dir", "seed", "train", "model", "mask", "schedule", "sampler")
_TRAIN_KEYS = {"epochs", "batch_size", "sequence_length", "learning_rate", "weight_decay", "train_stride", "ratios"}
_DATASET_KEYS = {"values", "distances", "missing_marker"}
_SAMPLER_KEYS = {"method", "steps", "samples", "warmup_steps"}


def _check_keys(section: str, doc, allowed) -> dict:
    if not isinstance(doc, dict):
        raise UsageError(f"config section {section!r} must be an object")
    unknown = set(doc) - set(allowed)
    if unknown:
        raise UsageError(f"unknown keys in {section!r}: {sorted(unknown)}")
    return doc


def resolve_run_config(doc: dict, base_dir: Path) -> dict:
    """Fill defaults, validate every section and make paths absolute."""
    _check_keys("run config", doc, RUN_SECTIONS)
    if "dataset" not in doc:
        raise UsageError("run config needs a 'dataset' section")
    ds = dict(_check_keys("dataset", doc["dataset"], _DATASET_KEYS))
    for key in ("values", "distances"):
        if key not in ds:
            raise UsageError(f"dataset section needs {key!r}")
        ds[key] = str((base_dir / ds[key]).resolve())
    ds.setdefault("missing_marker", 0.0)
    seed = int(doc.get("seed", 0))

    base_train = {f.name: f.default for f in fields(TrainConfig) if f.name in _TRAIN_KEYS}
    train = {**base_train, **_check_keys("train", doc.get("train", {}), _TRAIN_KEYS)}
    train["ratios"] = list(train["ratios"])

    model = {**asdict(ModelConfig.desk()), **_check_keys("model", doc.get("model", {}), asdict(ModelConfig()))}
    mask_fields = {f.name: f.default for f in fields(MaskSpec)}
    mask = {**mask_fields, "seed": seed, **_check_keys("mask", doc.get("mask", {}), mask_fields)}
    schedule = {"kind": "quadratic", "beta_1": 1e-4, "beta_T": 0.2, "T": 50, "xis": list(SIX_STEP_XIS)}
    schedule.update(_check_keys("schedule", doc.get("schedule", {}), schedule))
    sampler = {"method": "fastSTI4", "steps": len(schedule["xis"] or []) or 50, "samples": 16, "warmup_steps": None}
    sampler.update(_check_keys("sampler", doc.get("sampler", {}), _SAMPLER_KEYS))
    out = str((base_dir / doc.get("output_dir", "run")).resolve())

    # validate by construction
    try:
        ModelConfig.from_dict(model)
        MaskSpec(**mask)
        training, aligned = schedule_from_dict(schedule)
        TrainConfig(schedule=training, seed=seed, **{**train, "ratios": tuple(train["ratios"])})
        SamplerConfig(sampler["method"], sampler["steps"], _aligned_for(aligned, sampler["steps"]),
                      sampler["warmup_steps"], seed)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid run config: {exc}") from None
    return {"dataset": ds, "output_dir": out, "seed": seed, "train": train, "model": model, "mask": mask,
            "schedule": schedule, "sampler": sampler}


def _aligned_for(aligned, steps):
    return aligned if aligned is not None and aligned.T_acc == steps else None


# -- helpers -----------------------------------------------------------------

def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_option_config(args, parser_defaults: dict) -> None:
    """Apply ``--config`` JSON (flat option names) underneath explicit flags."""
    if not getattr(args, "config", None):
        return
    doc = json.loads(_require_file(args.config, "config file").read_text())
    doc.pop("command", None)
    unknown = set(doc) - set(parser_defaults)
    if unknown:
        raise UsageError(f"unknown keys in {args.config}: {sorted(unknown)}")
    for key, value in doc.items():
        if getattr(args, key) == parser_defaults[key]:
            setattr(args, key, value)


def _resolved_options(args, command: str) -> dict:
    skip = {"func", "config", "verbose"}
    doc = {"command": command}
    for k, v in sorted(vars(args).items()):
        if k in skip:
            continue
        if k in {"values", "distances", "checkpoint", "truth", "imputed", "ensemble", "targets",
                 "aligned_schedule", "out", "trace", "plot", "per_node"} and v is not None:
            v = str(Path(v).resolve())
        doc[k] = v
    return doc


def _load_dataset(values, distances, marker) -> Dataset:
    _require_file(values, "values file")
    _require_file(distances, "distances file")
    return load_csv_dataset(values, distances, marker)


def _write_values_csv(path, timestamps, node_ids, values) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", *node_ids])
        for t, row in zip(timestamps, values):
            w.writerow([int(t), *[repr(float(v)) for v in row]])


def _write_mask_csv(path, timestamps, node_ids, mask) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", *node_ids])
        for t, row in zip(timestamps, mask):
            w.writerow([int(t), *[int(v) for v in row]])


def _read_table(path, what: str):
    _require_file(path, what)
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) < 2:
        raise UsageError(f"{what} {path} has no data rows")
    header = rows[0][1:]
    ts = np.array([int(r[0]) for r in rows[1:]])
    vals = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return header, ts, vals


# -- commands ----------------------------------------------------------------

def cmd_generate_synth(args) -> int:
    if args.nodes < 2:
        raise UsageError("--nodes must be at least 2")
    if args.steps < 1:
        raise UsageError("--steps must be positive")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = synth_generate(args.nodes, args.steps, args.seed, coupling=args.coupling, noise=args.noise,
                        interval=args.interval)
    save_csv_dataset(ds, out / "values.csv", out / "distances.csv")
    manifest = {**_resolved_options(args, "generate-synth"), "values": "values.csv", "distances": "distances.csv",
                "n_nodes": ds.n_nodes, "n_steps": ds.n_steps, "generator": ds.meta}
    _write_json(out / "manifest.json", manifest)
    print(json.dumps({"values": str(out / "values.csv"), "distances": str(out / "distances.csv"),
                      "manifest": str(out / "manifest.json")}))
    return 0


def cmd_train(args) -> int:
    cfg_path = _require_file(args.config, "run config")
    try:
        doc = json.loads(cfg_path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{cfg_path}: {exc}") from None
    if args.epochs is not None:
        doc.setdefault("train", {})["epochs"] = args.epochs
    if args.output_dir is not None:
        doc["output_dir"] = str(Path(args.output_dir).resolve())
    cfg = resolve_run_config(doc, cfg_path.parent)
    ds = _load_dataset(cfg["dataset"]["values"], cfg["dataset"]["distances"], cfg["dataset"]["missing_marker"])
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    args.output_dir = str(out)
    _write_json(out / "resolved_config.json", cfg)

    training, _ = schedule_from_dict(cfg["schedule"])
    train = TrainConfig(schedule=training, seed=cfg["seed"], **{**cfg["train"], "ratios": tuple(cfg["train"]["ratios"])})
    model = ModelConfig.from_dict(cfg["model"])
    try:
        graph = graph_from_distances(ds.distances)
    except GraphError as exc:
        raise UsageError(str(exc)) from None
    extra = {"run_config": cfg, "node_ids": ds.node_ids, "sampler": cfg["sampler"],
             "schedule_xis": cfg["schedule"]["xis"]}
    result = train_loop(ds, train, model, MaskSpec(**cfg["mask"]), graph=graph,
                        checkpoint_path=out / "checkpoint.fsti", extra=extra)
    result.write_curve(out / "loss_curve.csv")
    summary = {"checkpoint": str(out / "checkpoint.fsti"), "loss_curve": str(out / "loss_curve.csv"),
               "best_epoch": result.best_epoch, "epochs": len(result.curve)}
    print(json.dumps(summary))
    return 0


def _sampler_setup(args, extra, training):
    """Sampler config from flags, falling back to the checkpoint's run config."""
    defaults = extra.get("sampler", {})
    method = args.method or defaults.get("method", "fastSTI4")
    aligned = None
    if args.aligned_schedule:
        doc = json.loads(_require_file(args.aligned_schedule, "aligned schedule").read_text())
        if set(doc) == {"xis"}:
            aligned = build_aligned_schedule(doc["xis"], training)
        else:
            other, aligned = schedule_from_dict(doc)
            if other.T != training.T or not np.allclose(other.alpha_bars, training.alpha_bars, rtol=1e-12):
                raise UsageError("aligned schedule refers to a different training schedule than the checkpoint")
            if aligned is None:
                raise UsageError(f"{args.aligned_schedule} holds no xis")
    steps = args.steps or (aligned.T_acc if aligned is not None else defaults.get("steps", 50))
    if aligned is None and args.aligned_schedule is None and steps == len(extra.get("schedule_xis") or []) \
            and args.steps is None:
        aligned = build_aligned_schedule(extra["schedule_xis"], training)
    return SamplerConfig(method, steps, aligned, args.warmup_steps, args.seed)


def _load_model(path):
    _require_file(path, "checkpoint")
    params, model, extra = load_checkpoint(path)
    for key in ("schedule", "normalizer", "sequence_length"):
        if key not in extra:
            raise UsageError(f"checkpoint {path} lacks {key!r}; was it written by 'train'?")
    training, _ = schedule_from_dict(extra["schedule"])
    return params, model, extra, training


def _select_rows(ds: Dataset, split: str, ratios):
    if split == "all":
        return 0, ds.n_steps
    return split_bounds(ds.n_steps, ratios)[split]


def cmd_impute(args) -> int:
    params, model, extra, training = _load_model(args.checkpoint)
    ds = _load_dataset(args.values, args.distances, args.missing_marker)
    config = _sampler_setup(args, extra, training)
    samples = args.samples or extra.get("sampler", {}).get("samples", 1)
    if samples < 1:
        raise UsageError("--samples must be positive")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = _resolved_options(args, "impute")
    resolved.update(method=config.method, steps=config.steps, samples=samples)
    _write_json(out / "resolved_config.json", resolved)

    lo, hi = _select_rows(ds, args.split, extra.get("ratios", (0.7, 0.1, 0.2)))
    values, mask = ds.values[lo:hi], ds.observed_mask[lo:hi]
    target = ~mask
    if args.scenario:
        spec = MaskSpec(**{**extra.get("mask", {}), "strategy": args.scenario, "seed": args.mask_seed})
        hidden, _ = make_targets(values, mask, spec, np.random.default_rng(args.mask_seed))
        target |= hidden
    series = windowed_series(values, mask, target, Normalizer.from_dict(extra["normalizer"]),
                             graph_from_distances(ds.distances), int(extra["sequence_length"]))
    predictor = NetworkPredictor(params, model)
    if args.trace:
        sample(predictor, series.task, training, config, trace=(trace := SamplerTrace()))
        trace.to_csv(args.trace)
    ens = impute_series(predictor, series, training, config, samples, args.threads)
    point = ens[0] if samples == 1 else np.median(ens, axis=0)
    # observed, non-target entries are copied from the input rather than recomputed
    imputed = np.where(target, point, values)
    ts = ds.timestamps[lo:hi]
    _write_values_csv(out / "imputed.csv", ts, ds.node_ids, imputed)
    _write_mask_csv(out / "targets.csv", ts, ds.node_ids, target)
    if samples > 1:
        rows, cols = np.nonzero(target)
        with open(out / "ensemble.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "timestamp", "node", "value"])
            for s in range(samples):
                for r, c in zip(rows, cols):
                    w.writerow([s, int(ts[r]), ds.node_ids[c], repr(float(ens[s, r, c]))])
    print(json.dumps({"imputed": str(out / "imputed.csv"), "targets": str(out / "targets.csv"),
                      "samples": samples, "predictor_calls": predictor.calls}))
    return 0


def cmd_evaluate(args) -> int:
    nodes, ts, imputed = _read_table(args.imputed, "imputed file")
    tnodes, tts, tvals = _read_table(args.truth, "truth file")
    mnodes, mts, targets = _read_table(args.targets, "targets file")
    if nodes != tnodes or nodes != mnodes:
        raise UsageError("node columns differ between truth, imputed and targets files")
    if not np.array_equal(ts, mts):
        raise UsageError("imputed and targets files cover different timestamps")
    index = {int(t): i for i, t in enumerate(tts)}
    missing = [int(t) for t in ts if int(t) not in index]
    if missing:
        raise UsageError(f"truth file lacks {len(missing)} imputed timestamps (first {missing[0]})")
    truth = tvals[[index[int(t)] for t in ts]]
    observed = np.isfinite(truth) & (truth != args.missing_marker)
    eval_mask = observed & (targets != 0)
    ensemble = None
    if args.ensemble:
        _require_file(args.ensemble, "ensemble file")
        row_of, col_of = {int(t): i for i, t in enumerate(ts)}, {n: j for j, n in enumerate(nodes)}
        with open(args.ensemble, newline="") as fh:
            recs = list(csv.DictReader(fh))
        n = 1 + max(int(r["sample"]) for r in recs)
        ensemble = np.broadcast_to(imputed, (n, *imputed.shape)).copy()
        for r in recs:
            ensemble[int(r["sample"]), row_of[int(r["timestamp"])], col_of[r["node"]]] = float(r["value"])
    try:
        report = evaluate(truth, imputed, eval_mask, ensemble=ensemble)
    except MetricError as exc:
        raise UsageError(str(exc)) from None
    text = report.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
        _write_json(Path(args.out).with_name("evaluate_config.json"), _resolved_options(args, "evaluate"))
    if args.per_node:
        report.write_per_node_csv(args.per_node, nodes)
    print(text)
    return 0


def cmd_bench(args) -> int:
    params, model, extra, training = _load_model(args.checkpoint)
    ds = _load_dataset(args.values, args.distances, args.missing_marker)
    lo, hi = _select_rows(ds, "test", extra.get("ratios", (0.7, 0.1, 0.2)))
    values, mask = ds.values[lo:hi], ds.observed_mask[lo:hi]
    spec = MaskSpec(**{**extra.get("mask", {}), "seed": args.seed})
    target, _ = make_targets(values, mask, spec, np.random.default_rng(args.seed))
    series = windowed_series(values, mask, target | ~mask, Normalizer.from_dict(extra["normalizer"]),
                             graph_from_distances(ds.distances), int(extra["sequence_length"]))
    task = series.task
    if args.windows:
        t = task
        task = type(t)(t.observed[:args.windows], t.observed_mask[:args.windows], t.target_mask[:args.windows],
                       t.conditioner[:args.windows], t.graph)
    predictor = NetworkPredictor(params, model)
    xis = extra.get("schedule_xis")
    rows = []
    for method in args.methods:
        for steps in args.steps:
            aligned = None
            if xis and steps == len(xis) and not args.no_align and method != "ddpm":
                aligned = build_aligned_schedule(xis, training)
            try:
                cfg = SamplerConfig(method, steps, aligned, None, args.seed)
            except SamplerError as exc:
                raise UsageError(str(exc)) from None
            times = time_sampler(predictor, task, training, cfg, args.repeats)
            rows.append({"method": method, "steps": steps, "aligned": aligned is not None,
                         "repeats": args.repeats, "median_seconds": float(np.median(times)),
                         "min_seconds": float(np.min(times)), "predictor_calls": cfg.expected_calls()})
    for r in rows:
        ref = max((q for q in rows if q["method"] == r["method"]), key=lambda q: q["steps"])
        r["speedup_vs_max_steps"] = ref["median_seconds"] / r["median_seconds"]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cols = ["method", "steps", "aligned", "repeats", "median_seconds", "min_seconds", "predictor_calls",
            "speedup_vs_max_steps"]
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)
    _write_json(out.with_name("bench_config.json"), _resolved_options(args, "bench"))
    if args.plot:
        _plot_bench(rows, args.plot)
    print(json.dumps(rows))
    return 0


def _plot_bench(rows, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = [f"{r['method']} ({r['steps']})" for r in rows]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(rows)), 3.5))
    ax.bar(labels, [r["median_seconds"] for r in rows], color="#4c72b0")
    ax.set_ylabel("median seconds per batch")
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def cmd_align(args) -> int:
    training, _ = schedule_from_dict({"kind": args.kind, "beta_1": args.beta_1, "beta_T": args.beta_T,
                                      "T": args.T, "xis": None})
    aligned = build_aligned_schedule(args.xis, training)
    text = schedule_to_json(training, aligned)
    if args.out:
        Path(args.out).write_text(text + "\n")
    doc = {"t_aligned": aligned.t_aligned.tolist(), "phi_bars": aligned.phi_bars.tolist()}
    print(json.dumps(doc))
    return 0


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="faststi", description="Spatiotemporal imputation with fast diffusion samplers.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    g = sub.add_parser("generate-synth", help="write a synthetic sensor dataset")
    g.add_argument("--nodes", type=int, default=10)
    g.add_argument("--steps", type=int, default=2000)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--coupling", type=float, default=0.3)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--interval", type=int, default=300, help="seconds between timestamps")
    g.add_argument("--out", default="synth", help="output directory")
    g.add_argument("--config", help="JSON file of the options above")
    g.set_defaults(func=cmd_generate_synth)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("config", help="run config JSON")
    t.add_argument("--epochs", type=int, help="override train.epochs")
    t.add_argument("--output-dir", help="override output_dir")
    t.set_defaults(func=cmd_train)

    def data_flags(q):
        q.add_argument("--checkpoint", required=True)
        q.add_argument("--values", required=True, help="values CSV")
        q.add_argument("--distances", required=True, help="distances CSV")
        q.add_argument("--missing-marker", type=float, default=0.0)
        q.add_argument("--seed", type=int, default=0)

    i = sub.add_parser("impute", help="impute missing and hidden entries")
    data_flags(i)
    i.add_argument("--method", choices=METHODS)
    i.add_argument("--steps", type=int)
    i.add_argument("--aligned-schedule", help="schedule JSON holding xis")
    i.add_argument("--warmup-steps", type=int)
    i.add_argument("--samples", type=int)
    i.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    i.add_argument("--scenario", choices=("block", "point"), help="also hide observed entries")
    i.add_argument("--mask-seed", type=int, default=0)
    i.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    i.add_argument("--trace", help="CSV of per-step sampler diagnostics")
    i.add_argument("--out", default="imputed")
    i.add_argument("--config", help="JSON file of the options above")
    i.set_defaults(func=cmd_impute)

    e = sub.add_parser("evaluate", help="score imputations against ground truth")
    e.add_argument("--truth", required=True, help="values CSV with ground truth")
    e.add_argument("--imputed", required=True)
    e.add_argument("--targets", required=True, help="0/1 targets CSV written by impute")
    e.add_argument("--ensemble", help="ensemble CSV written by impute")
    e.add_argument("--missing-marker", type=float, default=0.0)
    e.add_argument("--out", help="report JSON path")
    e.add_argument("--per-node", help="per-node CSV path")
    e.add_argument("--config", help="JSON file of the options above")
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("bench", help="time samplers on a fixed batch")
    data_flags(b)
    b.add_argument("--methods", nargs="+", choices=METHODS, default=["fastSTI2", "fastSTI4"])
    b.add_argument("--steps", nargs="+", type=int, default=[6, 50])
    b.add_argument("--no-align", action="store_true", help="use strided steps even when xis match")
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--windows", type=int, default=0, help="limit the batch to this many windows")
    b.add_argument("--out", default="timing.csv")
    b.add_argument("--plot", help="SVG bar chart path")
    b.add_argument("--config", help="JSON file of the options above")
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("align", help="align a short noise schedule to a training schedule")
    a.add_argument("--xis", nargs="+", type=float, default=list(SIX_STEP_XIS))
    a.add_argument("--kind", choices=("linear", "cosine", "quadratic"), default="quadratic")
    a.add_argument("--beta-1", type=float, default=1e-4)
    a.add_argument("--beta-T", type=float, default=0.2)
    a.add_argument("--T", type=int, default=50)
    a.add_argument("--out", help="schedule JSON path")
    a.set_defaults(func=cmd_align)
    return p


def _error_record(exc, command, out_dir=None) -> dict:
    rec = {"error": type(exc).__name__, "message": str(exc), "command": command}
    print(json.dumps(rec), file=sys.stderr)
    if out_dir and Path(out_dir).is_dir():
        _write_json(Path(out_dir) / "error.json", rec)
    return rec


def main(argv=None) -> int:
    parser = build_parser()
    command = None
    args = None
    try:
        args = parser.parse_args(argv)
        command = args.command
        if command is None:
            parser.print_help()
            return 2
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if command != "train" and hasattr(args, "config"):
            sp = next(a for a in parser._subparsers._group_actions[0].choices.values() if a.get_default("func") is args.func)
            _load_option_config(args, {a.dest: a.default for a in sp._actions if a.dest not in ("help", "config")})
        return args.func(args)
    except UsageError as exc:
        _error_record(exc, command)
        return 2
    except (DataError, GraphError, ScheduleError, SamplerError, json.JSONDecodeError, FileNotFoundError) as exc:
        _error_record(exc, command)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure becomes a JSON record
        out = getattr(args, "out", None) or getattr(args, "output_dir", None)
        _error_record(exc, command, out if out and not str(out).endswith((".csv", ".json")) else None)
        log.debug("failure", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
