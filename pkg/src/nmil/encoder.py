"""Instance encoder stack and contrastive pretraining.

The stack has three heads on a shared trunk:

    trunk  G: instance vector (M) -> feature embedding (feature dim)
    proj   F: feature -> projection (l2-normalized), for contrastive loss
    clf    C: feature -> class logits, for the cross-entropy head

Weight regimes: ``init`` (seeded random trunk, untouched), ``contrastive``
(paired-view loss), ``supcon`` (label-aware contrastive, needs instance
labels), ``ce`` (instance cross entropy), ``multi`` (weighted contrastive
+ cross entropy). After pretraining the trunk is used frozen; ``embed``
is deterministic.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape, forward, backward
from .data import Dataset, NestedBag, Region, pooled_instances
from .errors import ConfigError, DataError
from .losses import cross_entropy_logits_graph, nt_xent_graph, sup_con_graph
from .nn import bind_params, init_mlp, mlp_graph
from .optim import make_optimizer
from .seeding import rng_for

log = logging.getLogger(__name__)

MODES = ("init", "contrastive", "supcon", "ce", "multi")
_LABELED_MODES = ("supcon", "ce", "multi")


@dataclass
class EncoderDims:
    input: int = 1
    hidden: int = 256
    feature: int = 128
    proj_hidden: int = 128
    proj: int = 64
    classes: int = 2


@dataclass
class PretrainConfig:
    tau: float = 0.07
    batch_size: int = 128
    lr: float = 1e-4
    epochs: int = 10
    alpha_c: float = 1.0
    alpha_ce: float = 0.5
    optimizer: str = "adam"
    max_items: int | None = None   # per-epoch cap on pool items (desk-scale runs)
    seed: int = 0

    def validate(self) -> None:
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.epochs < 0 or self.lr <= 0:
            raise ConfigError("epochs must be >= 0 and lr positive")
        if self.alpha_c < 0 or self.alpha_ce < 0:
            raise ConfigError("loss weights must be non-negative")


class EncoderStack:
    """Trunk + projection + classifier heads over named parameters."""

    def __init__(self, dims: EncoderDims, params: dict[str, np.ndarray], mode: str, seed: int):
        if mode not in MODES:
            raise ConfigError(f"unknown pretrain mode {mode!r}")
        self.dims = dims
        self.params = params
        self.mode = mode
        self.seed = seed

    @classmethod
    def init(cls, dims: EncoderDims, seed: int) -> "EncoderStack":
        rng = rng_for(seed, "encoder-init")
        params = {}
        params.update(init_mlp(rng, [dims.input, dims.hidden, dims.feature], "g"))
        params.update(init_mlp(rng, [dims.feature, dims.proj_hidden, dims.proj], "f"))
        params.update(init_mlp(rng, [dims.feature, 64, dims.classes], "c"))
        return cls(dims, params, "init", seed)

    # -- graph builders -------------------------------------------------

    def trunk_graph(self, tape: Tape, x, refs):
        return mlp_graph(tape, x, refs, "g", 2)

    def proj_graph(self, tape: Tape, h, refs):
        return tape.l2_normalize(mlp_graph(tape, h, refs, "f", 2), axis=1)

    def logits_graph(self, tape: Tape, h, refs):
        return mlp_graph(tape, h, refs, "c", 2)

    # -- inference -------------------------------------------------------

    def embed_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dims.input:
            raise DataError(f"encoder expects dim {self.dims.input}, got {x.shape[1]}")
        tape = Tape()
        refs = bind_params(tape, self.params)
        self.trunk_graph(tape, tape.input("x"), refs)
        return forward(tape, {**self.params, "x": x}).data

    def embed(self, x: np.ndarray) -> np.ndarray:
        return self.embed_batch(np.asarray(x).reshape(1, -1))[0]

    def project_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        tape = Tape()
        refs = bind_params(tape, self.params)
        self.proj_graph(tape, self.trunk_graph(tape, tape.input("x"), refs), refs)
        return forward(tape, {**self.params, "x": x}).data

    # -- serialization ----------------------------------------------------

    def to_json(self, path: str | Path) -> None:
        doc = {
            "mode": self.mode,
            "seed": self.seed,
            "dims": vars(self.dims),
            "params": {
                name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
                for name, arr in sorted(self.params.items())
            },
        }
        Path(path).write_text(json.dumps(doc, sort_keys=True))

    @classmethod
    def from_json(cls, path: str | Path) -> "EncoderStack":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read encoder {path}: {e}") from None
        dims = EncoderDims(**doc["dims"])
        params = {
            name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in doc["params"].items()
        }
        return cls(dims, params, doc["mode"], doc["seed"])


@dataclass
class VectorAugmenter:
    """Stochastic vector views: additive noise, coordinate dropout, jitter.

    A view is ((x + noise) * scale) * mask / (1 - dropout_rate) with
    noise ~ N(0, sigma), scale ~ U(1 - jitter, 1 + jitter) and a Bernoulli
    keep mask; the inverted dropout keeps each view's expectation at x.
    Draws are deterministic per (seed, item_index, view order).
    """

    sigma: float | np.ndarray = 0.05
    dropout_rate: float = 0.1
    jitter: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if not (0.0 <= self.jitter < 1.0):
            raise ConfigError(f"jitter must lie in [0, 1), got {self.jitter}")

    @classmethod
    def for_data(cls, values: np.ndarray, seed: int, noise_scale: float = 0.05,
                 dropout_rate: float = 0.1, jitter: float = 0.1) -> "VectorAugmenter":
        """Noise sigma tied to the per-feature spread of the data."""
        sigma = noise_scale * values.std(axis=0)
        return cls(sigma=sigma, dropout_rate=dropout_rate, jitter=jitter, seed=seed)

    def _view(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        noisy = x + rng.normal(0.0, 1.0, size=x.shape) * self.sigma
        scaled = noisy * rng.uniform(1.0 - self.jitter, 1.0 + self.jitter)
        if self.dropout_rate > 0.0:
            keep = rng.random(x.shape) >= self.dropout_rate
            scaled = scaled * keep / (1.0 - self.dropout_rate)
        return scaled


def augment_pair(x, aug: VectorAugmenter, item_index: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Two stochastic views of one vector; deterministic per (seed, item)."""
    vec = np.asarray(getattr(x, "values", x), dtype=np.float64).reshape(-1)
    rng = rng_for(aug.seed, "augment", item_index)
    return aug._view(vec, rng), aug._view(vec, rng)


@dataclass
class PretrainResult:
    stack: EncoderStack
    history: list[float] = field(default_factory=list)


def pretrain(
    dataset: Dataset,
    mode: str,
    config: PretrainConfig,
    dims: EncoderDims | None = None,
    augmenter: VectorAugmenter | None = None,
) -> PretrainResult:
    """Pretrain the encoder on the train-split instance pool.

    ``init`` returns the seeded initialisation untouched. Label-dependent
    modes need instance-level source flags on every region. The epoch
    history holds the mean step loss.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown pretrain mode {mode!r}; choose from {MODES}")
    config.validate()
    dims = dims or EncoderDims(input=dataset.dim)
    if dims.input != dataset.dim:
        raise ConfigError(f"encoder input dim {dims.input} != dataset dim {dataset.dim}")
    stack = EncoderStack.init(dims, config.seed)
    if mode == "init":
        return PretrainResult(stack)

    values, flags = pooled_instances(dataset.train)
    labels = None
    if mode in _LABELED_MODES:
        if flags is None:
            raise DataError(f"mode {mode!r} needs instance labels, which this dataset lacks")
        labels = flags.astype(np.int64)
    if augmenter is None:
        augmenter = VectorAugmenter.for_data(values, seed=config.seed)

    trained = _trained_prefixes(mode, config)
    subset = {k: v for k, v in stack.params.items() if k.split(".")[0] in trained}
    opt = make_optimizer(config.optimizer, config.lr)
    n_pool = values.shape[0]

    history = []
    for epoch in range(config.epochs):
        order = rng_for(config.seed, "order", epoch).permutation(n_pool)
        if config.max_items is not None:
            order = order[: config.max_items]
        losses = []
        for start in range(0, len(order) - len(order) % config.batch_size, config.batch_size):
            idx = order[start : start + config.batch_size]
            views = np.empty((2 * len(idx), dims.input))
            for k, item in enumerate(idx):
                v1, v2 = augment_pair(values[item], augmenter, item_index=int(epoch * n_pool + item))
                views[2 * k] = v1
                views[2 * k + 1] = v2
            # coordinate dropout can zero out an entire low-dimensional
            # view; such views carry no signal and cannot be normalized,
            # so the whole pair is dropped from the step
            norms = np.linalg.norm(views, axis=1)
            dead = (norms[0::2] == 0.0) | (norms[1::2] == 0.0)
            if dead.any():
                log.debug("dropping %d zero pairs from a batch of %d", int(dead.sum()), len(idx))
                views = views[np.repeat(~dead, 2)]
                idx = idx[~dead]
                if len(idx) < 2:
                    continue
            pair = np.arange(2 * len(idx))
            pair = pair + 1 - 2 * (pair % 2)
            view_labels = None if labels is None else np.repeat(labels[idx], 2)

            tape = Tape()
            refs = bind_params(tape, subset)
            x = tape.input("x")
            h = stack.trunk_graph(tape, x, refs)
            loss = None
            if mode == "contrastive" or (mode == "multi" and config.alpha_c != 0.0):
                z = stack.proj_graph(tape, h, refs)
                loss = nt_xent_graph(tape, z, pair, config.tau)
                if mode == "multi":
                    loss = loss * config.alpha_c
            elif mode == "supcon":
                z = stack.proj_graph(tape, h, refs)
                loss = sup_con_graph(tape, z, pair, view_labels, config.tau)
            if mode == "ce" or (mode == "multi" and config.alpha_ce != 0.0):
                ce = cross_entropy_logits_graph(
                    tape, stack.logits_graph(tape, h, refs), view_labels, dims.classes
                )
                ce = ce * config.alpha_ce if mode == "multi" else ce
                loss = ce if loss is None else loss + ce
            tape.set_output(loss)

            losses.append(forward(tape, {**subset, "x": views}).item())
            opt.step(subset, backward(tape))
        history.append(float(np.mean(losses)) if losses else float("nan"))

    stack.params.update(subset)
    stack.mode = mode
    return PretrainResult(stack, history)


def embed_dataset(dataset: Dataset, stack: EncoderStack) -> Dataset:
    """Replace every instance vector with its trunk embedding.

    Bag structure, labels, flags and clinical vectors are untouched; only
    the feature dimension changes (to ``stack.dims.feature``).
    """
    def convert(nb: NestedBag) -> NestedBag:
        regions = [
            Region(r.region_id, r.ids, stack.embed_batch(r.values), r.flags)
            for r in nb.regions
        ]
        return NestedBag(nb.bag_id, regions, nb.label, nb.clinical)

    return Dataset(
        train=[convert(nb) for nb in dataset.train],
        val=[convert(nb) for nb in dataset.val],
        test=[convert(nb) for nb in dataset.test],
        dim=stack.dims.feature,
        provenance=dict(dataset.provenance),
    )


def _trained_prefixes(mode: str, config: PretrainConfig) -> set[str]:
    if mode == "contrastive":
        return {"g", "f"}
    if mode == "supcon":
        return {"g", "f"}
    if mode == "ce":
        return {"g", "c"}
    # multi: zero-weighted heads are skipped entirely so the parameter
    # trajectory with alpha_ce=0 is bit-identical to plain contrastive
    prefixes = {"g"}
    if config.alpha_c != 0.0:
        prefixes.add("f")
    if config.alpha_ce != 0.0:
        prefixes.add("c")
    return prefixes
