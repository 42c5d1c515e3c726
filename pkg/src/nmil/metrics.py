"""Evaluation: ROC/AUC, multi-run summaries, MC-dropout, attention export.

AUC is the Mann-Whitney statistic P(s+ > s-) + 0.5 P(tie), computed from
midranks, which equals the trapezoidal area under the ROC staircase.
Monte-Carlo dropout averages several stochastic forward passes (dropout
active in the classifier head only). Attention maps are exported as CSV
and, when tile coordinates are available, as a grayscale raster.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .data import NestedBag
from .errors import ConfigError, DataError
from .seeding import rng_for


def _scored(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape or s.size == 0:
        raise DataError(f"scores and labels must be equal-length and non-empty, got {s.shape} vs {y.shape}")
    if not np.all(np.isfinite(s)):
        raise DataError("scores contain non-finite values")
    if not np.isin(y, (0, 1)).all():
        raise DataError("labels must be 0/1")
    return s, y.astype(np.int64)


def auc(scores, labels) -> float:
    """Probability a positive outranks a negative, ties counted half.

    Uses midranks: sum of positive ranks minus the minimal positive rank
    mass, divided by n+ * n-. Requires both classes.
    """
    s, y = _scored(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs at least one positive and one negative label")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_points(scores, labels) -> np.ndarray:
    """ROC staircase as rows of (fpr, tpr, threshold), thresholds descending.

    Starts at (0, 0, inf) and ends at (1, 1, min score); one point per
    distinct score. Trapezoidal area under these points equals ``auc``.
    """
    s, y = _scored(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC needs at least one positive and one negative label")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    distinct = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y)[distinct]
    fps = (distinct + 1) - tps
    rows = [(0.0, 0.0, np.inf)]
    rows.extend((fp / n_neg, tp / n_pos, s[i]) for fp, tp, i in zip(fps, tps, distinct))
    return np.array(rows, dtype=np.float64)


def roc_csv(path: str | Path, scores, labels) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fpr", "tpr", "threshold"])
        writer.writerows(
            (repr(float(f)), repr(float(t)), repr(float(th)))
            for f, t, th in roc_points(scores, labels)
        )


def mc_dropout_predict(model, nb: NestedBag, runs: int = 5, rate: float = 0.05,
                       seed: int = 0) -> float:
    """Mean of ``runs`` stochastic passes with inference-time dropout.

    Deterministic per (seed, bag id); rate 0 falls back to the plain
    deterministic prediction.
    """
    if not (0.0 <= rate < 1.0):
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if runs < 1:
        raise ConfigError(f"runs must be >= 1, got {runs}")
    if rate == 0.0:
        return model.predict(nb)
    rng = rng_for(seed, "mc", nb.bag_id)
    return float(np.mean([model.predict(nb, dropout_rate=rate, rng=rng) for _ in range(runs)]))


def mc_dropout_auc(model, bags: list[NestedBag], runs: int = 5, rate: float = 0.05,
                   seed: int = 0) -> float:
    """AUC over per-bag MC-dropout mean scores against the bag labels."""
    scores = [mc_dropout_predict(model, nb, runs, rate, seed) for nb in bags]
    return auc(scores, [nb.label for nb in bags])


@dataclass
class RunSummary:
    best: float
    mean: float
    std: float                    # population std over runs
    mc_mean: float | None = None
    mc_std: float | None = None
    seeds: list[int] | None = None


def summarize_runs(aucs, mc_aucs=None, seeds=None) -> RunSummary:
    """Best/mean/population-std over repeated runs, MC column analogous."""
    aucs = [float(a) for a in aucs]
    if not aucs:
        raise DataError("summarize_runs needs at least one run")
    if mc_aucs is not None and len(mc_aucs) != len(aucs):
        raise DataError(f"got {len(aucs)} AUCs but {len(mc_aucs)} MC AUCs")
    mc_mean = mc_std = None
    if mc_aucs is not None:
        mc_mean = float(np.mean(mc_aucs))
        mc_std = float(np.std(mc_aucs))
    return RunSummary(best=max(aucs), mean=float(np.mean(aucs)), std=float(np.std(aucs)),
                      mc_mean=mc_mean, mc_std=mc_std,
                      seeds=None if seeds is None else list(seeds))


def attention_rows(nb: NestedBag, model) -> list[tuple[str, str, float]]:
    """(region_id, instance_id, weight) rows; weights sum to 1 per bag."""
    region_w, instance_w = model.attention_map(nb)
    rows = []
    for region, rw, iw in zip(nb.regions, region_w, instance_w):
        for instance_id, w in zip(region.ids, iw):
            rows.append((region.region_id, instance_id, float(rw * w)))
    return rows


def export_attention(nb: NestedBag, model, csv_path: str | Path,
                     coords: np.ndarray | None = None, tile_size: int = 1,
                     png_path: str | Path | None = None) -> list[tuple[str, str, float]]:
    """Write per-instance attention weights as CSV and optionally a raster.

    ``coords`` gives one (x, y) tile origin per instance in flattened bag
    order; the raster paints each tile with its weight scaled so the
    strongest tile is white. Aggregators without attention are rejected.
    """
    rows = attention_rows(nb, model)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["region_id", "instance_id", "weight"])
        writer.writerows((r, i, repr(w)) for r, i, w in rows)
    if png_path is not None:
        if coords is None:
            raise ConfigError("rendering a raster needs per-instance tile coordinates")
        from PIL import Image

        coords = np.asarray(coords, dtype=np.int64)
        weights = np.array([w for _, _, w in rows])
        if coords.shape != (weights.size, 2):
            raise DataError(f"expected {weights.size} (x, y) coordinates, got {coords.shape}")
        scale = weights.max()
        shade = np.rint(255.0 * weights / scale).astype(np.uint8) if scale > 0 else \
            np.zeros(weights.size, dtype=np.uint8)
        width = int(coords[:, 0].max()) + tile_size
        height = int(coords[:, 1].max()) + tile_size
        canvas = np.zeros((height, width), dtype=np.uint8)
        for (x, y), value in zip(coords, shade):
            canvas[y : y + tile_size, x : x + tile_size] = value
        Image.fromarray(canvas, mode="L").save(png_path)
    return rows


def write_report(path: str | Path, *, task: str, aggregator: str, pretrain_mode: str,
                 roi: str, run_aucs, summary: RunSummary, extra: dict | None = None) -> None:
    """Emit the evaluation report JSON; key-sorted, no timestamps."""
    doc = {
        "task": task,
        "aggregator": aggregator,
        "pretrain_mode": pretrain_mode,
        "roi": roi,
        "runs": [float(a) for a in run_aucs],
        "best": summary.best,
        "mean": summary.mean,
        "std": summary.std,
        "mc": None if summary.mc_mean is None else {"mean": summary.mc_mean, "std": summary.mc_std},
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
