"""Experiment driver: synthetic benchmark, pipeline, ROI extraction, grids.

Subcommands
-----------
synth-bench   three-distribution Gaussian-bag benchmark plus imbalance sweep
pipeline      pretrain -> embed -> MIL training -> evaluation, one dataset
pretrain      encoder pretraining only, persists the stack
roi-extract   segmentation mask -> ROI mask PNG + tile manifest CSV
grid-search   hyperparameter grid over the admissible value lists
eval          evaluate a saved model on a dataset, optional attention dump

Common flags: ``--config PATH`` (JSON), ``--seed N``, ``--jobs N``,
``--out DIR``, ``--dry-run``. Flag values override config-file values.
Reports are key-sorted JSON without timestamps, so a rerun with the same
config and seed is byte-identical. ``NMIL_LOG`` picks the log level from
{error, info, debug}. Exit codes: 0 ok, 2 config error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .autodiff import NumericError, ShapeError
from .data import (
    CLASS1_MINOR,
    CLASS1_PARTIAL,
    CLASS1_SIGNIFICANT,
    Dataset,
    SynthSpec,
    gen_synth_bags,
    load_embeddings,
    split_into_regions,
)
from .encoder import EncoderDims, EncoderStack, PretrainConfig, embed_dataset, pretrain
from .errors import ConfigError, DataError
from .metrics import (
    auc,
    export_attention,
    mc_dropout_auc,
    roc_csv,
    summarize_runs,
    write_report,
)
from .mil import MilModel, TrainConfig, grid_search, grid_size, train_mil
from .roi import PLANS, ROI_KINDS, RoiMask, SegMask, derive_roi, extract_tiles
from .seeding import fold_seed

log = logging.getLogger(__name__)

# CLI vocabulary -> internal names
AGGREGATOR_NAMES = {
    "vote": "vote",
    "mean": "mean",
    "max": "max",
    "abmil": "attention",
    "nmia": "nested",
}
FUSION_NAMES = {"image": "off", "clinical": "only", "both": "concat"}
MODE_NAMES = {
    "i": "init",
    "c": "contrastive",
    "sc": "supcon",
    "ce": "ce",
    "multi": "multi",
}

DISTRIBUTIONS = [
    ("minor", CLASS1_MINOR),
    ("partial", CLASS1_PARTIAL),
    ("significant", CLASS1_SIGNIFICANT),
]
SWEEP_FRACTIONS = (0.25, 0.40, 0.50)
SWEEP_RHO_RANGES = ((0.0, 0.5), (0.0, 0.75))


def _lookup(table: dict[str, str], value: str, what: str) -> str:
    key = str(value).lower()
    if key not in table:
        raise ConfigError(f"unknown {what} {value!r}; choose from {sorted(table)}")
    return table[key]


def _dataclass_from(cls, doc: dict, what: str):
    field_names = {f.name for f in dataclasses.fields(cls)}
    bad = sorted(set(doc) - field_names)
    if bad:
        raise ConfigError(f"unknown {what} keys {bad}; valid keys: {sorted(field_names)}")
    fixed = {
        key: tuple(value) if isinstance(value, list) else value
        for key, value in doc.items()
    }
    return cls(**fixed)


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return doc


def resolve_dataset(cfg: dict, seed: int) -> Dataset:
    """Dataset from the config's source section (synthetic or manifest)."""
    source = cfg.get("source", "synth")
    if source == "synth":
        spec = _dataclass_from(SynthSpec, dict(cfg.get("synth", {}), seed=seed), "synth")
        return gen_synth_bags(spec)
    if source == "manifest":
        if "manifest" not in cfg:
            raise ConfigError("source 'manifest' needs a 'manifest' path in the config")
        return load_embeddings(cfg["manifest"])
    raise ConfigError(f"unknown source {source!r}; choose 'synth' or 'manifest'")


def _regionize(dataset: Dataset, seed: int) -> Dataset:
    """Partition single-region bags into synthetic contiguous regions."""
    def conv(bags):
        return [
            split_into_regions(nb, fold_seed(seed, "regions", nb.bag_id))
            if len(nb.regions) == 1 else nb
            for nb in bags
        ]

    return Dataset(conv(dataset.train), conv(dataset.val), conv(dataset.test),
                   dataset.dim, dict(dataset.provenance))


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# one training run (top level so process pools can pickle it)
# ---------------------------------------------------------------------------


def _bench_run(task: tuple) -> tuple:
    """(key, synth kwargs, train kwargs, run seed) -> (key, test AUC)."""
    key, synth_kwargs, train_kwargs, run_seed = task
    spec = _dataclass_from(SynthSpec, synth_kwargs, "synth")
    dataset = gen_synth_bags(spec)
    config = _dataclass_from(TrainConfig, train_kwargs, "train")
    result = train_mil(dataset, "attention", config, seed=run_seed)
    scores = [result.model.predict(nb) for nb in dataset.test]
    return key, auc(scores, [nb.label for nb in dataset.test])


def _parallel(fn, tasks: list, jobs: int) -> list:
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth_bench(cfg: dict, out: Path, seed: int, jobs: int, dry_run: bool) -> int:
    train_kwargs = dict(cfg.get("train", {}))
    runs = train_kwargs.pop("runs", TrainConfig().runs)
    base_synth = dict(cfg.get("synth", {}))

    tasks = []
    for name, class1 in DISTRIBUTIONS:
        for r in range(runs):
            synth = dict(base_synth, class1=class1, seed=fold_seed(seed, "data", name, r))
            tasks.append(((("table", name), r),
                          synth, train_kwargs, fold_seed(seed, "run", name, r)))
    for frac in SWEEP_FRACTIONS:
        for rho in SWEEP_RHO_RANGES:
            for r in range(runs):
                synth = dict(
                    base_synth,
                    class1=CLASS1_PARTIAL,
                    positive_bag_fraction=frac,
                    positive_instance_fraction_range=rho,
                    seed=fold_seed(seed, "data", "sweep", frac, rho, r),
                )
                tasks.append(((("sweep", frac, rho), r),
                              synth, train_kwargs, fold_seed(seed, "run", "sweep", frac, rho, r)))

    if dry_run:
        print(f"synth-bench: {len(tasks)} planned runs "
              f"({len(DISTRIBUTIONS)} distributions + "
              f"{len(SWEEP_FRACTIONS) * len(SWEEP_RHO_RANGES)} sweep cells, {runs} runs each)")
        for key, synth, _, run_seed in tasks:
            print(f"  {key[0]} run {key[1]} seed {run_seed}")
        print("dry run: nothing written")
        return 0

    results = dict(_parallel(_bench_run, tasks, jobs))

    def collect(group_key) -> dict:
        aucs = [results[(group_key, r)] for r in range(runs)]
        s = summarize_runs(aucs)
        return {"runs": [round(a, 6) for a in aucs],
                "mean": round(s.mean, 6), "std": round(s.std, 6)}

    table = []
    for name, class1 in DISTRIBUTIONS:
        row = {"class1": list(class1), "overlap": name}
        row.update(collect(("table", name)))
        table.append(row)
    sweep = []
    for frac in SWEEP_FRACTIONS:
        for rho in SWEEP_RHO_RANGES:
            row = {"positive_bag_fraction": frac, "rho_range": list(rho)}
            row.update(collect(("sweep", frac, rho)))
            sweep.append(row)

    doc = {
        "task": "synth-bench",
        "seed": seed,
        "config": {"train": train_kwargs, "synth": base_synth, "runs": runs},
        "table": table,
        "sweep": sweep,
    }
    _write_json(out / "synth_bench.json", doc)

    print(f"{'class 1':>14}  {'mean AUC':>8}  {'std':>6}  runs")
    for row in table:
        print(f"{row['overlap']:>14}  {row['mean']:8.3f}  {row['std']:6.3f}  {row['runs']}")
    print(f"report: {out / 'synth_bench.json'}")
    return 0


def cmd_pipeline(cfg: dict, out: Path, seed: int, jobs: int, dry_run: bool) -> int:
    mode = _lookup(MODE_NAMES, cfg.get("mode", "c"), "pretrain mode")
    aggregator = _lookup(AGGREGATOR_NAMES, cfg.get("aggregator", "abmil"), "aggregator")
    fusion = _lookup(FUSION_NAMES, cfg.get("fusion", "image"), "fusion")
    train_kwargs = dict(cfg.get("train", {}))
    pre_kwargs = dict(cfg.get("pretrain", {}))

    if dry_run:
        config = _dataclass_from(TrainConfig, dict(train_kwargs, seed=seed), "train")
        print(f"pipeline: mode={mode} aggregator={aggregator} fusion={fusion} "
              f"runs={config.runs} out={out}")
        print("dry run: nothing written")
        return 0

    dataset = resolve_dataset(cfg, fold_seed(seed, "data"))
    if fusion != "only":
        pre_config = _dataclass_from(
            PretrainConfig, dict(pre_kwargs, seed=fold_seed(seed, "pretrain")), "pretrain")
        dims = _dataclass_from(EncoderDims, dict(cfg.get("dims", {}), input=dataset.dim), "dims")
        if mode == "init":
            stack = EncoderStack.init(dims, pre_config.seed)
        else:
            stack = pretrain(dataset, mode, pre_config, dims=dims).stack
        dataset = embed_dataset(dataset, stack)
    if aggregator == "nested":
        dataset = _regionize(dataset, fold_seed(seed, "regions"))

    config = _dataclass_from(TrainConfig, dict(train_kwargs, seed=seed), "train")
    results = [
        train_mil(dataset, aggregator, config, fusion, seed=fold_seed(seed, "run", r))
        for r in range(config.runs)
    ]
    test_labels = [nb.label for nb in dataset.test]
    run_aucs = [
        auc([res.model.predict(nb) for nb in dataset.test], test_labels)
        for res in results
    ]
    mc_aucs = [
        mc_dropout_auc(res.model, dataset.test, seed=fold_seed(seed, "mc", r))
        for r, res in enumerate(results)
    ]
    summary = summarize_runs(run_aucs, mc_aucs)

    out.mkdir(parents=True, exist_ok=True)
    best = results[int(np.argmax(run_aucs))]
    best.model.to_json(out / "model.json")
    best.history_csv(out / "history.csv")
    if fusion != "only":
        stack.to_json(out / "encoder.json")
    write_report(
        out / "report.json",
        task="pipeline",
        aggregator=aggregator,
        pretrain_mode=mode,
        roi="none",
        run_aucs=run_aucs,
        summary=summary,
        extra={"seed": seed, "fusion": fusion,
               "config": {"train": train_kwargs, "pretrain": pre_kwargs}},
    )
    print(f"test AUC best {summary.best:.3f}  mean {summary.mean:.3f} ({summary.std:.3f})  "
          f"MC {summary.mc_mean:.3f} ({summary.mc_std:.3f})")
    print(f"artifacts: {out}")
    return 0


def cmd_pretrain(cfg: dict, out: Path, seed: int, jobs: int, dry_run: bool) -> int:
    mode = _lookup(MODE_NAMES, cfg.get("mode", "c"), "pretrain mode")
    pre_kwargs = dict(cfg.get("pretrain", {}))
    if dry_run:
        print(f"pretrain: mode={mode} out={out}")
        print("dry run: nothing written")
        return 0
    dataset = resolve_dataset(cfg, fold_seed(seed, "data"))
    pre_config = _dataclass_from(
        PretrainConfig, dict(pre_kwargs, seed=fold_seed(seed, "pretrain")), "pretrain")
    dims = _dataclass_from(EncoderDims, dict(cfg.get("dims", {}), input=dataset.dim), "dims")
    if mode == "init":
        stack, history = EncoderStack.init(dims, pre_config.seed), []
    else:
        result = pretrain(dataset, mode, pre_config, dims=dims)
        stack, history = result.stack, result.history
    out.mkdir(parents=True, exist_ok=True)
    stack.to_json(out / "encoder.json")
    lines = ["epoch,loss"] + [f"{i},{loss!r}" for i, loss in enumerate(history)]
    (out / "pretrain_history.csv").write_text("\n".join(lines) + "\n")
    _write_json(out / "pretrain.json", {
        "task": "pretrain", "mode": mode, "seed": seed,
        "config": pre_kwargs, "final_loss": history[-1] if history else None,
    })
    print(f"mode {mode}: {len(history)} epochs"
          + (f", final loss {history[-1]:.4f}" if history else " (no training)"))
    print(f"artifacts: {out}")
    return 0


def cmd_roi_extract(cfg: dict, out: Path, seed: int, jobs: int, dry_run: bool) -> int:
    for key in ("mask", "kind"):
        if key not in cfg:
            raise ConfigError(f"roi-extract needs {key!r} (flag or config)")
    kind = str(cfg["kind"]).lower()
    if kind not in ROI_KINDS:
        raise ConfigError(f"unknown ROI kind {cfg['kind']!r}; choose from {list(ROI_KINDS)}")
    plan = cfg.get("plan", "mono10x")
    if plan not in PLANS:
        raise ConfigError(f"unknown tiling plan {plan!r}; choose from {sorted(PLANS)}")
    threshold = float(cfg.get("threshold", 0.25))

    if dry_run:
        print(f"roi-extract: mask={cfg['mask']} kind={kind} plan={plan} "
              f"threshold={threshold} out={out}")
        print("dry run: nothing written")
        return 0

    seg = SegMask.load(cfg["mask"], cfg.get("sidecar"))
    roi = derive_roi(seg, kind)
    manifest = extract_tiles(roi, plan, threshold)

    out.mkdir(parents=True, exist_ok=True)
    stem = Path(cfg["mask"]).stem
    roi_path = out / f"{stem}_{kind}.png"
    manifest_path = out / f"{stem}_{kind}_tiles.csv"
    roi.save(roi_path)
    manifest.to_csv(manifest_path)

    n_px = int(roi.mask.sum())
    print(f"{kind}: {n_px} ROI pixels, {len(manifest.entries)} tiles "
          f"(plan {plan}, coverage >= {threshold})")
    if n_px == 0:
        log.warning("ROI %r is empty for %s; manifest has no tiles", kind, cfg["mask"])
        print(f"warning: empty ROI, empty manifest written")
    print(f"wrote {roi_path} and {manifest_path}")
    return 0


def cmd_grid_search(cfg: dict, out: Path, seed: int, jobs: int, dry_run: bool) -> int:
    if "grid" not in cfg or not isinstance(cfg["grid"], dict) or not cfg["grid"]:
        raise ConfigError("grid-search needs a non-empty 'grid' object in the config")
    grid = {key: list(values) for key, values in cfg["grid"].items()}
    n = grid_size(grid)
    aggregator = _lookup(AGGREGATOR_NAMES, cfg.get("aggregator", "abmil"), "aggregator")
    train_kwargs = dict(cfg.get("train", {}))
    base = _dataclass_from(TrainConfig, dict(train_kwargs, seed=seed), "train")

    if dry_run:
        print(f"grid-search: {n} combinations x {base.runs} runs "
              f"({n * base.runs} trainings), aggregator={aggregator}")
        print("dry run: nothing written")
        return 0

    dataset = resolve_dataset(cfg, fold_seed(seed, "data"))
    rows = grid_search(dataset, grid, base, aggregator=aggregator)

    out.mkdir(parents=True, exist_ok=True)
    keys = sorted(grid)
    lines = [",".join(["rank", *keys, "mean_val_auc", "std_val_auc", "run_val_aucs"])]
    for row in rows:
        combo = row["combo"]
        lines.append(",".join(
            [str(row["rank"]), *(str(combo[k]) for k in keys),
             repr(row["mean_val_auc"]), repr(row["std_val_auc"]),
             "|".join(repr(a) for a in row["val_aucs"])]
        ))
    (out / "grid.csv").write_text("\n".join(lines) + "\n")
    _write_json(out / "grid.json", {
        "task": "grid-search", "seed": seed, "aggregator": aggregator,
        "config": {"train": train_kwargs}, "grid": {k: list(v) for k, v in grid.items()},
        "rows": rows,
    })
    best = rows[0]
    print(f"{n} combinations ranked; best mean val AUC {best['mean_val_auc']:.3f} at {best['combo']}")
    print(f"full table: {out / 'grid.csv'}")
    return 0


def cmd_eval(cfg: dict, out: Path, seed: int, jobs: int, dry_run: bool) -> int:
    if "model" not in cfg:
        raise ConfigError("eval needs a 'model' path (flag or config)")
    if dry_run:
        print(f"eval: model={cfg['model']} out={out}")
        print("dry run: nothing written")
        return 0
    model = MilModel.from_json(cfg["model"])
    dataset = resolve_dataset(cfg, fold_seed(seed, "data"))
    if cfg.get("encoder"):
        dataset = embed_dataset(dataset, EncoderStack.from_json(cfg["encoder"]))
    if model.aggregator == "nested":
        dataset = _regionize(dataset, fold_seed(seed, "regions"))
    bags = dataset.split(cfg.get("split", "test"))
    labels = [nb.label for nb in bags]
    scores = [model.predict(nb) for nb in bags]
    test_auc = auc(scores, labels)
    mc = mc_dropout_auc(model, bags, runs=int(cfg.get("mc_runs", 5)),
                        rate=float(cfg.get("mc_rate", 0.05)), seed=fold_seed(seed, "mc"))

    out.mkdir(parents=True, exist_ok=True)
    roc_csv(out / "roc.csv", scores, labels)
    extra = {"seed": seed, "mc_auc": mc, "n_bags": len(bags), "split": cfg.get("split", "test")}
    if cfg.get("attention_bag") is not None:
        wanted = str(cfg["attention_bag"])
        match = [nb for nb in bags if nb.bag_id == wanted]
        if not match:
            raise DataError(f"bag {wanted!r} not in the evaluated split")
        export_attention(match[0], model, out / "attention.csv")
        extra["attention_bag"] = wanted
    summary = summarize_runs([test_auc], [mc])
    write_report(out / "report.json", task="eval", aggregator=model.aggregator,
                 pretrain_mode="none", roi="none", run_aucs=[test_auc],
                 summary=summary, extra=extra)
    print(f"AUC {test_auc:.3f} (MC {mc:.3f}) on {len(bags)} bags")
    print(f"artifacts: {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

COMMANDS = {
    "synth-bench": cmd_synth_bench,
    "pipeline": cmd_pipeline,
    "pretrain": cmd_pretrain,
    "roi-extract": cmd_roi_extract,
    "grid-search": cmd_grid_search,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nmil",
        description="weakly supervised nested-MIL experiment driver",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int, default=None, help="global seed (default 0)")
        p.add_argument("--jobs", type=int, default=1, help="parallel runs")
        p.add_argument("--out", default=None, help="output directory (default ./nmil-out)")
        p.add_argument("--dry-run", action="store_true", help="print the plan, write nothing")

    common(sub.add_parser("synth-bench", help="Gaussian-bag benchmark + imbalance sweep"))

    p = sub.add_parser("pipeline", help="pretrain, embed, train and evaluate")
    common(p)
    p.add_argument("--mode", help="pretrain mode: I, C, SC, CE or MULTI")
    p.add_argument("--aggregator", help="vote, mean, max, abmil or nmia")
    p.add_argument("--fusion", help="image, clinical or both")
    p.add_argument("--manifest", help="embedding manifest JSON (sets source=manifest)")

    p = sub.add_parser("pretrain", help="encoder pretraining only")
    common(p)
    p.add_argument("--mode", help="pretrain mode: I, C, SC, CE or MULTI")
    p.add_argument("--manifest", help="embedding manifest JSON (sets source=manifest)")

    p = sub.add_parser("roi-extract", help="derive an ROI mask and tile manifest")
    common(p)
    p.add_argument("mask", nargs="?", help="segmentation mask PNG")
    p.add_argument("--sidecar", help="metadata JSON (default: mask path with .json)")
    p.add_argument("--kind", help=f"ROI kind: one of {list(ROI_KINDS)}")
    p.add_argument("--plan", help=f"tiling plan: one of {sorted(PLANS)}")
    p.add_argument("--threshold", type=float, help="minimum tile coverage (default 0.25)")

    p = sub.add_parser("grid-search", help="hyperparameter grid search")
    common(p)
    p.add_argument("--aggregator", help="vote, mean, max, abmil or nmia")

    p = sub.add_parser("eval", help="evaluate a saved model")
    common(p)
    p.add_argument("--model", help="model JSON path")
    p.add_argument("--encoder", help="encoder JSON; embeds the dataset before scoring")
    p.add_argument("--split", help="dataset split to score (default test)")
    p.add_argument("--manifest", help="embedding manifest JSON (sets source=manifest)")
    p.add_argument("--attention-bag", help="bag id whose attention map to export")

    return parser


_FLAG_KEYS = ("mode", "aggregator", "fusion", "manifest", "mask", "sidecar",
              "kind", "plan", "threshold", "model", "encoder", "split", "attention_bag")


def _merge(args: argparse.Namespace) -> dict:
    cfg = load_config(args.config)
    for key in _FLAG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if cfg.get("manifest") and "source" not in cfg:
        cfg["source"] = "manifest"
    return cfg


def _setup_logging() -> None:
    level = os.environ.get("NMIL_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"NMIL_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level],
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        cfg = _merge(args)
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        out = Path(args.out if args.out is not None else cfg.get("out", "nmil-out"))
        return COMMANDS[args.command](cfg, out, seed, args.jobs, args.dry_run)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except (NumericError, ShapeError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
