"""Attention-based multiple-instance models and their training loop.

Five bag aggregators over instance embeddings H (L, h):

    vote       per-instance classifier head; bag score is the fraction
               of instances voting positive (trained with the bag label
               broadcast to every instance)
    mean, max  coordinate-wise embedding pooling, then the classifier
    attention  gated attention: a = softmax(w^T (tanh(V h^T) * sigm(U h^T))),
               z = a . H, then the classifier
    nested     gated attention applied twice: shared region-level
               attention produces one embedding per region, bag-level
               attention pools the region embeddings

The bag classifier is an MLP with dropout on its hidden layers and a
sigmoid output. Clinical fusion concatenates a standardized clinical
vector onto the bag embedding (``concat``) or feeds it alone (``only``).
Training minimises the focal Tversky loss over mini-batches of bag
scores, subsamples each bag once per epoch, tracks validation AUC, and
early-stops with a fixed patience, keeping the earliest best epoch.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import itertools
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Ref, Tape, backward, forward
from .data import Dataset, NestedBag, subsample_bag
from .errors import ConfigError, DataError
from .losses import TverskyParams, focal_tversky_symmetric_graph
from .metrics import auc
from .nn import bind_params, dropout_masks, glorot_uniform, init_mlp, mlp_graph
from .optim import make_optimizer
from .seeding import fold_seed, rng_for

log = logging.getLogger(__name__)

AGGREGATORS = ("vote", "mean", "max", "attention", "nested")
FUSIONS = ("off", "concat", "only")

# admissible hyperparameter values for grid searches
GRID_VALUES = {
    "lr": (1e-1, 1e-2, 1e-3, 1e-4),
    "optimizer": ("sgd", "adam"),
    "n_b": (4, 16, 64, 256, None),          # None keeps the full bag
    "dropout": (0.1, 0.2, 0.3, 0.4, 0.5),
    "alpha": (0.0, 0.3, 0.6, 0.9),
    "gamma": (0.5, 1.0, 2.0),
    "classifier_width": (128, 512, 1024, 4096),  # expands to (w, w // 2)
    "attention_dim": (128, 512, 1024, 4096),
}


@dataclass
class GatedAttentionParams:
    V: np.ndarray    # (n_att, h)
    U: np.ndarray    # (n_att, h)
    w: np.ndarray    # (n_att, 1)


@dataclass
class TrainConfig:
    lr: float = 1e-2
    optimizer: str = "sgd"
    n_b: int | None = 64
    dropout: float = 0.2
    alpha: float = 0.9
    gamma: float = 2.0
    classifier_widths: tuple[int, ...] = (256, 128)
    attention_dim: int = 128
    max_epochs: int = 80
    patience: int = 30
    runs: int = 5
    seed: int = 0
    bags_per_step: int = 16
    val_instances: int | None = None   # subsample validation bags for speed

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.n_b is not None and self.n_b < 1:
            raise ConfigError(f"n_b must be >= 1 or None, got {self.n_b}")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.max_epochs < 1 or self.patience < 1 or self.runs < 1 or self.bags_per_step < 1:
            raise ConfigError("max_epochs, patience, runs and bags_per_step must be >= 1")
        try:
            TverskyParams(self.alpha, self.gamma).validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None


def gated_attention_graph(tape: Tape, H: Ref, refs: dict[str, Ref], prefix: str) -> tuple[Ref, Ref]:
    """Eq-style gated attention over instance rows; returns (a, z).

    a is (1, L) softmax weights, z = a @ H is the (1, h) bag embedding.
    """
    vt = tape.tanh(tape.matmul(refs[f"{prefix}.V"], H, transpose_b=True))
    ug = tape.sigmoid(tape.matmul(refs[f"{prefix}.U"], H, transpose_b=True))
    scores = tape.matmul(refs[f"{prefix}.w"], vt * ug, transpose_a=True)
    a = tape.softmax(scores, axis=1)
    return a, tape.matmul(a, H)


def gated_attention(H: np.ndarray, params: GatedAttentionParams) -> tuple[np.ndarray, np.ndarray]:
    """Numeric gated attention: weights (L,) summing to 1 and embedding (h,)."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2:
        raise DataError(f"H must be (L, h), got {H.shape}")
    p = {"att.V": params.V, "att.U": params.U, "att.w": params.w}
    tape = Tape()
    refs = bind_params(tape, p)
    a_ref, z_ref = gated_attention_graph(tape, tape.input("H"), refs, "att")
    tape.set_output(z_ref)
    z = forward(tape, {**p, "H": H}).data[0]
    a = tape._values[a_ref.index][0]
    return a, z


def pool(H: np.ndarray, kind: str) -> np.ndarray:
    """Coordinate-wise mean or max over instance rows."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] == 0:
        raise DataError(f"H must be a non-empty (L, h) matrix, got {H.shape}")
    if kind == "mean":
        return H.mean(axis=0)
    if kind == "max":
        return H.max(axis=0)
    raise ConfigError(f"unknown pooling {kind!r}")


def fuse_clinical(z: np.ndarray, h_var: np.ndarray) -> np.ndarray:
    """Concatenate a bag embedding with a standardized clinical vector."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    h_var = np.asarray(h_var, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(h_var)):
        raise DataError("clinical vector contains non-finite values")
    return np.concatenate([z, h_var])


class MilModel:
    def __init__(self, aggregator: str, h_dim: int, config: TrainConfig,
                 fusion: str = "off", clinical_dim: int = 0, seed: int = 0,
                 params: dict[str, np.ndarray] | None = None):
        if aggregator not in AGGREGATORS:
            raise ConfigError(f"unknown aggregator {aggregator!r}; choose from {AGGREGATORS}")
        if fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion {fusion!r}; choose from {FUSIONS}")
        if fusion != "off" and clinical_dim < 1:
            raise ConfigError(f"fusion {fusion!r} needs a clinical dimension")
        if aggregator == "vote" and fusion != "off":
            raise ConfigError("the vote aggregator has no bag embedding to fuse clinical data into")
        self.aggregator = aggregator
        self.h_dim = h_dim
        self.fusion = fusion
        self.clinical_dim = clinical_dim
        self.attention_dim = config.attention_dim
        self.classifier_widths = tuple(config.classifier_widths)
        self.dropout = config.dropout
        self.seed = seed
        self.params = params if params is not None else self._init_params()

    def _clf_input_dim(self) -> int:
        if self.fusion == "only":
            return self.clinical_dim
        return self.h_dim + (self.clinical_dim if self.fusion == "concat" else 0)

    def _init_params(self) -> dict[str, np.ndarray]:
        rng = rng_for(self.seed, "mil-init")
        params: dict[str, np.ndarray] = {}
        n_att, h = self.attention_dim, self.h_dim
        if self.aggregator in ("attention", "nested"):
            for prefix in ("att",) if self.aggregator == "attention" else ("att", "att2"):
                params[f"{prefix}.V"] = glorot_uniform(rng, h, n_att, (n_att, h))
                params[f"{prefix}.U"] = glorot_uniform(rng, h, n_att, (n_att, h))
                params[f"{prefix}.w"] = glorot_uniform(rng, n_att, 1, (n_att, 1))
        if self.aggregator == "vote":
            params.update(init_mlp(rng, [h, *self.classifier_widths, 1], "inst"))
        else:
            params.update(init_mlp(rng, [self._clf_input_dim(), *self.classifier_widths, 1], "clf"))
        return params

    # -- graph ------------------------------------------------------------

    def _classifier(self, tape: Tape, z: Ref, refs, masks) -> Ref:
        return mlp_graph(tape, z, refs, "clf", len(self.classifier_widths) + 1,
                         final_activation="sigmoid", dropout_masks=masks)

    def bag_graph(self, tape: Tape, refs: dict[str, Ref], nb: NestedBag,
                  masks: list[np.ndarray] | None = None) -> tuple[Ref, dict]:
        """Score one bag; returns (prob ref, attention refs for inspection).

        For ``vote`` the returned ref is the (L, 1) column of instance
        probabilities; for everything else a (1, 1) bag probability.
        """
        aux: dict = {}
        if self.fusion != "off" and nb.clinical is None:
            raise DataError(f"bag {nb.bag_id}: fusion {self.fusion!r} needs a clinical vector")
        if self.aggregator == "vote":
            H = tape.const(nb.flatten().values)
            return mlp_graph(tape, H, refs, "inst", len(self.classifier_widths) + 1,
                             final_activation="sigmoid", dropout_masks=masks), aux
        if self.fusion == "only":
            return self._classifier(tape, tape.const(np.asarray(nb.clinical).reshape(1, -1)), refs, masks), aux
        if self.aggregator in ("mean", "max"):
            H = tape.const(nb.flatten().values)
            reduce = tape.reduce_mean if self.aggregator == "mean" else tape.reduce_max
            z = reduce(H, axis=0, keepdims=True)
        elif self.aggregator == "attention":
            H = tape.const(nb.flatten().values)
            a, z = gated_attention_graph(tape, H, refs, "att")
            aux["instance"] = [a]
        else:  # nested
            region_embeddings, region_attn = [], []
            for r in nb.regions:
                a_r, z_r = gated_attention_graph(tape, tape.const(r.values), refs, "att")
                region_embeddings.append(z_r)
                region_attn.append(a_r)
            Z = region_embeddings[0] if len(region_embeddings) == 1 else tape.concatenate(region_embeddings, axis=0)
            a_b, z = gated_attention_graph(tape, Z, refs, "att2")
            aux["instance"] = region_attn
            aux["region"] = a_b
        if self.fusion == "concat":
            z = tape.concatenate([z, tape.const(np.asarray(nb.clinical).reshape(1, -1))], axis=1)
        return self._classifier(tape, z, refs, masks), aux

    # -- inference ----------------------------------------------------------

    def _mask_widths(self) -> list[int]:
        return list(self.classifier_widths)

    def predict(self, nb: NestedBag, dropout_rate: float = 0.0,
                rng: np.random.Generator | None = None) -> float:
        """Bag score in [0, 1]; deterministic when dropout_rate is 0."""
        masks = None
        if dropout_rate > 0.0:
            if rng is None:
                raise ValueError("stochastic predict needs an rng")
            masks = dropout_masks(rng, self._mask_widths(), dropout_rate)
        tape = Tape()
        refs = bind_params(tape, self.params)
        out, _ = self.bag_graph(tape, refs, nb, masks)
        tape.set_output(out)
        scores = forward(tape, self.params).data
        if self.aggregator == "vote":
            return float((scores > 0.5).mean())
        return float(scores[0, 0])

    def attention_map(self, nb: NestedBag) -> tuple[np.ndarray, list[np.ndarray]]:
        """(region weights (K,), per-region instance weights), each summing to 1."""
        if self.aggregator not in ("attention", "nested"):
            raise ConfigError(f"aggregator {self.aggregator!r} has no attention weights")
        tape = Tape()
        refs = bind_params(tape, self.params)
        out, aux = self.bag_graph(tape, refs, nb)
        tape.set_output(out)
        forward(tape, self.params)
        vals = tape._values
        instance = [vals[a.index][0] for a in aux["instance"]]
        if self.aggregator == "attention":
            region = np.ones(1)
            instance = [instance[0]]
        else:
            region = vals[aux["region"].index][0]
        return region, instance

    # -- serialization --------------------------------------------------------

    def to_json(self, path: str | Path) -> None:
        doc = {
            "aggregator": self.aggregator,
            "h_dim": self.h_dim,
            "fusion": self.fusion,
            "clinical_dim": self.clinical_dim,
            "attention_dim": self.attention_dim,
            "classifier_widths": list(self.classifier_widths),
            "dropout": self.dropout,
            "seed": self.seed,
            "params": {
                name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
                for name, arr in sorted(self.params.items())
            },
        }
        Path(path).write_text(json.dumps(doc, sort_keys=True))

    @classmethod
    def from_json(cls, path: str | Path) -> "MilModel":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read model {path}: {e}") from None
        config = TrainConfig(
            attention_dim=doc["attention_dim"],
            classifier_widths=tuple(doc["classifier_widths"]),
            dropout=doc["dropout"],
        )
        params = {
            name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in doc["params"].items()
        }
        return cls(doc["aggregator"], doc["h_dim"], config, doc["fusion"],
                   doc["clinical_dim"], doc["seed"], params)


@dataclass
class TrainResult:
    model: MilModel
    history: list[tuple[int, float, float]]   # (epoch, train_loss, val_auc)
    best_epoch: int
    best_val_auc: float

    def history_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_auc"])
            writer.writerows((e, repr(l), repr(a)) for e, l, a in self.history)


def _clinical_dim(dataset: Dataset) -> int:
    dims = {0 if nb.clinical is None else len(nb.clinical) for nb in dataset.all_bags()}
    if len(dims) != 1:
        raise DataError("bags disagree on clinical vector availability")
    return dims.pop()


def train_mil(dataset: Dataset, aggregator: str, config: TrainConfig,
              fusion: str = "off", seed: int | None = None) -> TrainResult:
    """Train one model; early-stops on validation AUC with fixed patience.

    Deterministic per (dataset, config, seed): bag subsampling is keyed by
    (seed, epoch, bag_id), dropout and batch order by (seed, epoch).
    Returns the weights of the earliest best-validation epoch.
    """
    config.validate()
    seed = config.seed if seed is None else seed
    clinical_dim = _clinical_dim(dataset) if fusion != "off" else 0
    if fusion != "off" and clinical_dim == 0:
        raise ConfigError(f"fusion {fusion!r} needs a clinical vector on every bag")
    model = MilModel(aggregator, dataset.dim, config, fusion, clinical_dim, seed=seed)
    opt = make_optimizer(config.optimizer, config.lr)
    params = model.params
    val_labels = [nb.label for nb in dataset.val]
    if len(set(val_labels)) < 2:
        raise DataError("validation split needs both classes to track AUC")
    tversky = TverskyParams(config.alpha, config.gamma)
    val_bags = dataset.val
    if config.val_instances is not None:
        val_seed = fold_seed(seed, "val-subsample")
        val_bags = [subsample_bag(nb, config.val_instances, val_seed) for nb in dataset.val]

    history: list[tuple[int, float, float]] = []
    best_auc, best_epoch, best_params = -np.inf, 0, None
    for epoch in range(1, config.max_epochs + 1):
        epoch_seed = fold_seed(seed, "epoch", epoch)
        sampled = [subsample_bag(nb, config.n_b, epoch_seed) for nb in dataset.train]
        order = rng_for(seed, "order", epoch).permutation(len(sampled))
        mask_rng = rng_for(seed, "dropout", epoch)
        losses, weights = [], []
        for start in range(0, len(order), config.bags_per_step):
            chunk = [sampled[i] for i in order[start : start + config.bags_per_step]]
            loss_val, grads = _step(model, chunk, tversky, mask_rng)
            opt.step(params, grads)
            losses.append(loss_val)
            weights.append(len(chunk))
        train_loss = float(np.average(losses, weights=weights))
        val_auc = auc([model.predict(nb) for nb in val_bags], val_labels)
        history.append((epoch, train_loss, val_auc))
        if val_auc > best_auc:
            best_auc, best_epoch = val_auc, epoch
            best_params = copy.deepcopy(params)
        elif epoch - best_epoch >= config.patience:
            break
    model.params = best_params if best_params is not None else params
    return TrainResult(model, history, best_epoch, best_auc)


def _step(model: MilModel, bags: list[NestedBag], tversky: TverskyParams,
          mask_rng: np.random.Generator) -> tuple[float, dict]:
    tape = Tape()
    refs = bind_params(tape, model.params)
    prob_refs, label_parts = [], []
    for nb in bags:
        masks = dropout_masks(mask_rng, model._mask_widths(), model.dropout)
        out, _ = model.bag_graph(tape, refs, nb, masks)
        if model.aggregator == "vote":
            prob_refs.append(out)                                  # (L, 1)
            label_parts.append(np.full((nb.n_instances, 1), float(nb.label)))
        else:
            prob_refs.append(out)                                  # (1, 1)
            label_parts.append(np.array([[float(nb.label)]]))
    axis = 0 if model.aggregator == "vote" else 1
    probs = prob_refs[0] if len(prob_refs) == 1 else tape.concatenate(prob_refs, axis=axis)
    labels = np.concatenate(label_parts, axis=axis)
    focal_tversky_symmetric_graph(tape, probs, labels, tversky)
    loss_val = forward(tape, model.params).item()
    return loss_val, backward(tape)


def train_mil_runs(dataset: Dataset, aggregator: str, config: TrainConfig,
                   fusion: str = "off") -> list[TrainResult]:
    """Repeat training with per-run RNG streams derived from (seed, run)."""
    return [
        train_mil(dataset, aggregator, config, fusion, seed=fold_seed(config.seed, "run", r))
        for r in range(config.runs)
    ]


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------


def grid_size(grid: dict[str, list]) -> int:
    _check_grid(grid)
    return int(np.prod([len(v) for v in grid.values()])) if grid else 0


def _check_grid(grid: dict[str, list]) -> None:
    for key, values in grid.items():
        if key not in GRID_VALUES:
            raise ConfigError(f"unknown grid key {key!r}; choose from {sorted(GRID_VALUES)}")
        if not values:
            raise ConfigError(f"grid key {key!r} has no values")
        bad = [v for v in values if v not in GRID_VALUES[key]]
        if bad:
            raise ConfigError(f"grid key {key!r}: {bad} not among admissible {GRID_VALUES[key]}")


def grid_combinations(grid: dict[str, list]):
    """Deterministic (combo dict) sequence, keys sorted, values in given order."""
    _check_grid(grid)
    keys = sorted(grid)
    for combo in itertools.product(*(grid[k] for k in keys)):
        yield dict(zip(keys, combo))


def _apply_combo(base: TrainConfig, combo: dict) -> TrainConfig:
    cfg = dataclasses.replace(base)
    for key, value in combo.items():
        if key == "classifier_width":
            cfg.classifier_widths = (value, value // 2)
        else:
            setattr(cfg, key, value)
    return cfg


def grid_search(dataset: Dataset, grid: dict[str, list], base: TrainConfig,
                aggregator: str = "attention", fusion: str = "off",
                runs: int | None = None, seed: int | None = None) -> list[dict]:
    """Mean validation AUC for every grid combination, best first.

    Values must come from the admissible lists in ``GRID_VALUES``. Each
    combination is trained ``runs`` times with per-run seeds; rows carry
    the combo, per-run best validation AUCs, their mean/std, and the rank.
    """
    runs = base.runs if runs is None else runs
    seed = base.seed if seed is None else seed
    rows = []
    for ci, combo in enumerate(grid_combinations(grid)):
        cfg = _apply_combo(base, combo)
        aucs = []
        for r in range(runs):
            result = train_mil(dataset, aggregator, cfg, fusion,
                               seed=fold_seed(seed, "grid", ci, r))
            aucs.append(result.best_val_auc)
        rows.append({
            "combo": combo,
            "val_aucs": aucs,
            "mean_val_auc": float(np.mean(aucs)),
            "std_val_auc": float(np.std(aucs)),
        })
        log.info("grid %d/%s: %s -> %.4f", ci + 1, grid_size(grid), combo, rows[-1]["mean_val_auc"])
    rows.sort(key=lambda r: (-r["mean_val_auc"], json.dumps(r["combo"], sort_keys=True)))
    for rank, row in enumerate(rows, start=1):
        row["rank"] = rank
    return rows
