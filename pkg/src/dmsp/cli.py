"""``dmsp`` command line: generate, train, predict, evaluate, inspect, plot, bench.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.  With
``--json-errors`` failures are reported on stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import svg
from .data import (DataError, MultiSourceDataset, ScrConfig, Split, generate_scr, load_csv,
                   load_truth_csv, mask_target, save_csv, save_truth_csv, split as make_split)
from .fidelity import FidelityError
from .geometry import GeometryError
from .metrics import EvaluationError, evaluate, predict_split
from .model import ModelError, PredictionContext, build_plans, forward_plans, load_checkpoint
from .training import (PlanCache, TrainConfig, TrainingError, fit, load_training_checkpoint, new_state,
                       parse_mode, save_training_checkpoint, train_epoch)

log = logging.getLogger("dmsp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ----------------------------------------------------------------- helpers

def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} not found: {path}")
    return p


def _writable(path: str) -> Path:
    p = Path(path)
    parent = p.parent if str(p.parent) else Path(".")
    if parent.exists() and not parent.is_dir():
        raise UsageError(f"output directory is not a directory: {parent}")
    parent.mkdir(parents=True, exist_ok=True)
    return p


def _fractions(text: str) -> tuple[float, float, float]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--split expects three comma-separated fractions, got {text!r}") from None
    if len(vals) != 3:
        raise UsageError(f"--split expects three comma-separated fractions, got {text!r}")
    return vals


def _emit_json(obj, path: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        _writable(path).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _split_for(meta: dict, dataset: MultiSourceDataset, seed: int | None) -> Split:
    info = meta.get("split") or {}
    if seed is None:
        if "seed" not in info:
            raise UsageError("checkpoint has no split record; pass --split-seed")
        seed = info["seed"]
    return make_split(dataset, tuple(info.get("fractions", (0.6, 0.2, 0.2))), seed)


def _reference(text: str, dataset: MultiSourceDataset):
    kind, _, value = text.partition("=")
    if kind == "source":
        try:
            sid = int(value)
        except ValueError:
            raise UsageError(f"bad reference {text!r}") from None
        if not 0 <= sid < dataset.N:
            raise UsageError(f"reference source {sid} out of range for {dataset.N} sources")
        return sid
    if kind == "truth":
        return load_truth_csv(_existing(value, "truth grid"))
    raise UsageError(f"--reference must be source=<i> or truth=<csv>, got {text!r}")


def _read_locations(path: Path) -> np.ndarray:
    """Rows ``(x, y, timestamp)``; timestamp defaults to 0."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if "x" not in header or "y" not in header:
            raise DataError("schema violation: locations file needs x and y columns")
        ix, iy = header.index("x"), header.index("y")
        it = header.index("timestamp") if "timestamp" in header else None
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                ts = float(row[it]) if it is not None and row[it].strip() else 0.0
                rows.append((float(row[ix]), float(row[iy]), ts))
            except (ValueError, IndexError):
                raise DataError(f"parse error: row {row_no} of {path}") from None
    if not rows:
        raise DataError(f"schema violation: no locations in {path}")
    arr = np.array(rows, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"parse error: non-finite location in {path}")
    return arr


def _grid_locations(dataset: MultiSourceDataset, n: int) -> np.ndarray:
    pts = np.vstack([s.locations for s in dataset.sources])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    gx, gy = np.meshgrid(np.linspace(lo[0], hi[0], n), np.linspace(lo[1], hi[1], n), indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel(), np.zeros(n * n)])


def _observed_lookup(dataset: MultiSourceDataset) -> dict:
    table = {}
    for src in dataset.sources:
        for j in range(src.n):
            key = (float(src.locations[j, 0]), float(src.locations[j, 1]), int(src.timestamps[j]))
            table.setdefault(key, (src.source_id, j))
    return table


def predict_rows(params, dataset: MultiSourceDataset, locations: np.ndarray,
                 mask_observed: bool = False) -> list[dict]:
    """Per-location per-source and fused predictions.

    With ``mask_observed`` a location that coincides with an observed sample is
    predicted with that sample's target hidden, as during training.
    """
    context = PredictionContext(dataset)
    observed = _observed_lookup(dataset) if mask_observed else {}
    out = []
    for x, y, t in locations:
        hit = observed.get((float(x), float(y), int(t)))
        if hit is not None:
            plans = build_plans(params, mask_target(dataset, *hit), context=context)
        else:
            plans = build_plans(params, dataset, (x, y), int(t), context)
        try:
            pred, _ = forward_plans(params, plans)
        except ModelError:
            pred = None
        out.append({"x": float(x), "y": float(y), "timestamp": int(t), "pred": pred})
    return out


def bench_epoch(dataset: MultiSourceDataset, config: TrainConfig, split: Split | None = None) -> float:
    """Wall time of one training epoch from scratch, neighbor search included."""
    split = split or make_split(dataset, config.split_fractions, config.seed)
    state = new_state(dataset, config)
    start = time.perf_counter()
    train_epoch(state, dataset, split, config, PlanCache(state.params, dataset))
    return time.perf_counter() - start


# ----------------------------------------------------------------- commands

def cmd_gen_scr(args) -> int:
    out_dir = Path(args.out_dir)
    data_path = _writable(str(out_dir / args.dataset_name))
    truth_path = _writable(str(out_dir / args.truth_name))
    cfg = ScrConfig(grid_size=args.grid_size, length_scale=args.length_scale, n_high=args.n_high,
                    n_low=args.n_low, noise_sigma=args.noise_sigma,
                    identical_sources=args.identical_sources)
    dataset, truth = generate_scr(cfg, args.seed)
    save_csv(dataset, data_path)
    save_truth_csv(truth, truth_path)
    print(f"N={dataset.N}")
    for src in dataset.sources:
        print(f"source {src.source_id} ({src.declared_name}): n={src.n} p={src.feature_dim}")
    print(f"wrote {data_path} and {truth_path}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    try:
        parse_mode(args.mode)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cfg = TrainConfig(learning_rate=args.lr, max_epochs=args.epochs, patience=args.patience,
                      k_neighbors=args.k, hidden_dim=args.hidden_dim, num_layers=args.layers,
                      seed=args.seed, mode=args.mode, strict_order=args.strict_order,
                      batch_size=args.batch_size, split_fractions=_fractions(args.split),
                      activation=args.activation)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg


def cmd_train(args) -> int:
    dataset = load_csv(_existing(args.data, "dataset"))
    ckpt_path = _writable(args.out)
    report_path = _writable(args.report) if args.report else None
    if args.resume:
        state, config, meta = load_training_checkpoint(_existing(args.resume, "checkpoint"))
        if args.seed is not None and args.seed != config.seed:
            raise UsageError(f"--seed {args.seed} conflicts with the checkpoint seed {config.seed}")
        if args.epochs is not None:
            config.max_epochs = args.epochs
        split = make_split(dataset, tuple(meta["split"]["fractions"]), meta["split"]["seed"])
    else:
        if args.seed is None:
            raise UsageError("--seed is required for train")
        if args.epochs is None:
            args.epochs = TrainConfig.max_epochs
        config = _train_config(args)
        split = make_split(dataset, config.split_fractions, config.seed)
        state = None
    if state is None:
        state = new_state(dataset, config)
    _, report = fit(dataset, config, split, state)
    save_training_checkpoint(ckpt_path, state, config, split)
    scores = ", ".join(f"{s:.4f}" for s in report["final_fidelity_scores"])
    print(f"epochs {report['epochs_run']} best {report['best_epoch']} "
          f"val {report['best_val_loss']} scores [{scores}]")
    if report_path:
        _emit_json(report, str(report_path))
    return EXIT_OK


def cmd_predict(args) -> int:
    params, _, _ = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    dataset = load_csv(_existing(args.data, "dataset"))
    if args.locations:
        locs = _read_locations(_existing(args.locations, "locations file"))
    elif args.grid:
        locs = _grid_locations(dataset, args.grid)
    else:
        raise UsageError("predict needs --locations or --grid")
    out = _writable(args.out)
    rows = predict_rows(params, dataset, locs, args.mask_observed)
    header = ["x", "y", "timestamp"] + [f"pred_{i}" for i in range(params.N)] + ["fused"]
    missing = 0
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            pred = r["pred"]
            if pred is None:
                missing += 1
                vals = [""] * (params.N + 1)
            else:
                vals = ["" if np.isnan(v) else repr(float(v)) for v in pred.per_source] + [repr(pred.fused)]
            w.writerow([repr(r["x"]), repr(r["y"]), r["timestamp"]] + vals)
    print(f"wrote {len(rows)} predictions to {out}" + (f" ({missing} without a usable source)" if missing else ""))
    return EXIT_OK


def cmd_eval(args) -> int:
    params, _, state = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    dataset = load_csv(_existing(args.data, "dataset"))
    reference = _reference(args.reference, dataset)
    split = _split_for(state, dataset, args.split_seed)
    rows = predict_split(params, dataset, split, reference, args.part)
    report = evaluate(rows.fused, rows.reference)
    if args.residuals:
        with open(_writable(args.residuals), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["source_id", "index", "x", "y", "prediction", "reference", "residual"])
            for s, j, loc, p, r in zip(rows.source, rows.index, rows.locations, rows.fused, rows.reference):
                w.writerow([int(s), int(j), repr(float(loc[0])), repr(float(loc[1])), repr(float(p)),
                            repr(float(r)), repr(float(p - r))])
    _emit_json(report.to_json(), args.out)
    return EXIT_OK


def cmd_inspect_fidelity(args) -> int:
    params, _, _ = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    out = [{"source_id": i, "logit": float(z), "score": float(c)}
           for i, (z, c) in enumerate(zip(params.logits, params.scores))]
    _emit_json(out, args.out)
    return EXIT_OK


def cmd_plot(args) -> int:
    params, _, state = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    out_dir = Path(args.out_dir)
    written = []
    fid = _writable(str(out_dir / "fidelity.svg"))
    fid.write_text(svg.bar_chart([f"source {i}" for i in range(params.N)], params.scores,
                                 "Fidelity scores", "score"), encoding="utf-8")
    written.append(fid)
    if args.data:
        dataset = load_csv(_existing(args.data, "dataset"))
        reference = _reference(args.reference, dataset) if args.reference else 0
        split = _split_for(state, dataset, args.split_seed)
        rows = predict_split(params, dataset, split, reference, "test")
        path = _writable(str(out_dir / "prediction_vs_reference.svg"))
        path.write_text(svg.scatter(rows.reference, rows.fused, "Fused prediction vs reference",
                                    "reference", "prediction", diagonal=True, groups=rows.source),
                        encoding="utf-8")
        written.append(path)
        if args.grid:
            locs = _grid_locations(dataset, args.grid)
            preds = predict_rows(params, dataset, locs)
            vals = np.array([r["pred"].fused if r["pred"] is not None else np.nan for r in preds])
            vals = np.where(np.isnan(vals), np.nanmean(vals), vals).reshape(args.grid, args.grid)
            ext = (locs[0, 0], locs[-1, 0], locs[0, 1], locs[-1, 1])
            path = _writable(str(out_dir / "prediction_map.svg"))
            path.write_text(svg.heatmap(vals, "Fused prediction", ext), encoding="utf-8")
            written.append(path)
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


def cmd_bench(args) -> int:
    scales = [int(s) for s in args.scales.split(",")]
    config = TrainConfig(seed=args.seed, k_neighbors=args.k, hidden_dim=args.hidden_dim,
                         num_layers=args.layers)
    results = []
    for s in scales:
        cfg = ScrConfig(n_high=args.n_high * s, n_low=args.n_low * s)
        dataset, _ = generate_scr(cfg, args.seed)
        seconds = bench_epoch(dataset, config)
        results.append({"scale": s, "samples": cfg.n_high + cfg.n_low, "epoch_seconds": seconds})
        log.info("scale %d: %.2fs", s, seconds)
    _emit_json(results, args.out)
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dmsp", description="Multi-source spatial prediction with learned fidelity scores.")
    p.add_argument("--json-errors", action="store_true", help="report failures as JSON on stderr")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-scr", help="generate the synthetic two-source dataset")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out-dir", default=".")
    g.add_argument("--dataset-name", default="scr.csv")
    g.add_argument("--truth-name", default="scr_truth.csv")
    g.add_argument("--grid-size", type=int, default=ScrConfig.grid_size)
    g.add_argument("--length-scale", type=float, default=ScrConfig.length_scale)
    g.add_argument("--n-high", type=int, default=ScrConfig.n_high)
    g.add_argument("--n-low", type=int, default=ScrConfig.n_low)
    g.add_argument("--noise-sigma", type=float, default=ScrConfig.noise_sigma)
    g.add_argument("--identical-sources", action="store_true",
                   help="low source reuses the high source's locations and features")
    g.set_defaults(func=cmd_gen_scr)

    t = sub.add_parser("train", help="train with masked self-supervision and early stopping")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--report", help="training report JSON path")
    t.add_argument("--seed", type=int)
    t.add_argument("--mode", default="full", help="full | single-source=<i> | frozen-fidelity")
    t.add_argument("--strict-order", action="store_true", help="visit samples in file order")
    t.add_argument("--resume", help="continue from a training checkpoint")
    t.add_argument("--epochs", type=int, help="maximum epochs (default 500)")
    t.add_argument("--patience", type=int, default=TrainConfig.patience)
    t.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    t.add_argument("--k", type=int, default=TrainConfig.k_neighbors)
    t.add_argument("--hidden-dim", type=int, default=TrainConfig.hidden_dim)
    t.add_argument("--layers", type=int, default=TrainConfig.num_layers)
    t.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    t.add_argument("--split", default="0.6,0.2,0.2", help="train,validation,test fractions")
    t.add_argument("--activation", choices=("tanh", "identity"), default="tanh")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="predict at new locations")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--locations", help="CSV with x, y[, timestamp]")
    pr.add_argument("--grid", type=int, help="predict on an n x n grid over the data extent")
    pr.add_argument("--mask-observed", action="store_true",
                    help="hide the target of an observed sample at the same location")
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="score held-out predictions")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--reference", default="source=0", help="source=<i> or truth=<csv>")
    e.add_argument("--part", choices=("train", "validation", "test"), default="test")
    e.add_argument("--split-seed", type=int, help="override the split recorded in the checkpoint")
    e.add_argument("--residuals", help="write per-sample residuals CSV")
    e.add_argument("--out", help="report JSON path (default stdout)")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("inspect-fidelity", help="print fidelity logits and scores")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--out")
    f.set_defaults(func=cmd_inspect_fidelity)

    pl = sub.add_parser("plot", help="write SVG charts")
    pl.add_argument("--checkpoint", required=True)
    pl.add_argument("--data")
    pl.add_argument("--reference", help="source=<i> or truth=<csv> (default source=0)")
    pl.add_argument("--split-seed", type=int)
    pl.add_argument("--grid", type=int, default=0, help="also draw an n x n prediction map")
    pl.add_argument("--out-dir", default=".")
    pl.set_defaults(func=cmd_plot)

    b = sub.add_parser("bench", help="time one training epoch at several data sizes")
    b.add_argument("--seed", type=int, required=True)
    b.add_argument("--scales", default="1,4,16")
    b.add_argument("--n-high", type=int, default=ScrConfig.n_high)
    b.add_argument("--n-low", type=int, default=ScrConfig.n_low)
    b.add_argument("--k", type=int, default=TrainConfig.k_neighbors)
    b.add_argument("--hidden-dim", type=int, default=TrainConfig.hidden_dim)
    b.add_argument("--layers", type=int, default=TrainConfig.num_layers)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def _fail(code: int, kind: str, message: str, as_json: bool) -> int:
    if as_json:
        sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    else:
        sys.stderr.write(f"dmsp: {kind}: {message}\n")
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    as_json = "--json-errors" in argv
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc), as_json)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc), as_json)
    except (DataError, GeometryError, EvaluationError, ModelError, OSError) as exc:
        return _fail(EXIT_DATA, "data", str(exc), as_json)
    except (TrainingError, FidelityError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, "numeric", str(exc), as_json)
    except ValueError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc), as_json)


if __name__ == "__main__":
    sys.exit(main())
