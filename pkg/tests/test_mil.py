"""Bag aggregators, the training loop, and grid-search plumbing."""

import dataclasses

import numpy as np
import pytest

from nmil.data import CLASS1_MINOR, Dataset, NestedBag, Region, SynthSpec, gen_synth_bags
from nmil.errors import ConfigError, DataError
from nmil.mil import (
    GRID_VALUES,
    GatedAttentionParams,
    MilModel,
    TrainConfig,
    fuse_clinical,
    gated_attention,
    grid_combinations,
    grid_search,
    grid_size,
    pool,
    train_mil,
    train_mil_runs,
)

TINY = TrainConfig(classifier_widths=(8, 4), attention_dim=4)


def bag_from(values, label=1, clinical=None, bag_id="b0"):
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    ids = [f"i{k}" for k in range(values.shape[0])]
    return NestedBag(bag_id, [Region("r0", ids, values)], label, clinical)


def easy_dataset(seed=0, **kw):
    spec = dict(n_bags=24, split=(16, 4, 4), bag_size_range=(30, 60),
                class1=CLASS1_MINOR, seed=seed)
    spec.update(kw)
    return gen_synth_bags(SynthSpec(**spec))


def quick_train(**kw):
    base = dict(max_epochs=12, patience=8, n_b=16, bags_per_step=8,
                classifier_widths=(32, 16), attention_dim=16, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# --- gated attention ----------------------------------------------------------


def reference_attention(H, p):
    # independent numpy route for a = softmax(w^T (tanh(VH^T) * sigm(UH^T)))
    gate = np.tanh(p.V @ H.T) * (1.0 / (1.0 + np.exp(-(p.U @ H.T))))
    s = (p.w.T @ gate).reshape(-1)
    e = np.exp(s - s.max())
    a = e / e.sum()
    return a, a @ H


def test_gated_attention_matches_reference_route():
    rng = np.random.default_rng(17)
    for _ in range(20):
        L, h, d = rng.integers(1, 7), rng.integers(1, 5), rng.integers(1, 6)
        H = rng.normal(size=(L, h))
        p = GatedAttentionParams(rng.normal(size=(d, h)), rng.normal(size=(d, h)),
                                 rng.normal(size=(d, 1)))
        a, z = gated_attention(H, p)
        a_ref, z_ref = reference_attention(H, p)
        np.testing.assert_allclose(a, a_ref, atol=1e-12)
        np.testing.assert_allclose(z, z_ref, atol=1e-12)
        assert a.shape == (L,) and z.shape == (h,)
        np.testing.assert_allclose(a.sum(), 1.0, atol=1e-12)


def test_gated_attention_single_instance_weight_is_one():
    p = GatedAttentionParams(np.ones((3, 2)), np.ones((3, 2)), np.ones((3, 1)))
    a, z = gated_attention(np.array([[0.4, -1.2]]), p)
    assert a[0] == 1.0
    np.testing.assert_array_equal(z, [0.4, -1.2])


def test_gated_attention_uniform_over_identical_instances():
    p = GatedAttentionParams(*(np.random.default_rng(3).normal(size=s)
                               for s in [(4, 2), (4, 2), (4, 1)]))
    a, _ = gated_attention(np.tile([[1.0, 2.0]], (5, 1)), p)
    np.testing.assert_allclose(a, 0.2, atol=1e-15)
    with pytest.raises(DataError):
        gated_attention(np.zeros(3), p)


def test_pool_mean_max_and_validation():
    H = np.array([[1.0, -2.0], [3.0, 0.0]])
    np.testing.assert_array_equal(pool(H, "mean"), [2.0, -1.0])
    np.testing.assert_array_equal(pool(H, "max"), [3.0, 0.0])
    with pytest.raises(ConfigError):
        pool(H, "median")
    with pytest.raises(DataError):
        pool(np.zeros((0, 2)), "mean")


# --- model predictions ---------------------------------------------------------


@pytest.mark.parametrize("aggregator", ["vote", "mean", "max", "attention", "nested"])
def test_predict_is_permutation_invariant(aggregator):
    rng = np.random.default_rng(11)
    values = rng.normal(size=(9, 3))
    nb = bag_from(values)
    model = MilModel(aggregator, 3, TINY, seed=2)
    base = model.predict(nb)
    assert 0.0 <= base <= 1.0
    perm = rng.permutation(9)
    shuffled = bag_from(values[perm])
    assert abs(model.predict(shuffled) - base) <= 1e-9


def test_nested_region_permutation_invariance():
    rng = np.random.default_rng(4)
    regions = [Region(f"r{k}", [f"{k}-{i}" for i in range(4)], rng.normal(size=(4, 3)))
               for k in range(3)]
    model = MilModel("nested", 3, TINY, seed=5)
    a = model.predict(NestedBag("b", regions, 1))
    b = model.predict(NestedBag("b", regions[::-1], 1))
    assert abs(a - b) <= 1e-9


@pytest.mark.parametrize("aggregator", ["vote", "mean", "max", "attention"])
def test_duplicating_every_instance_changes_nothing(aggregator):
    values = np.random.default_rng(6).normal(size=(5, 2))
    model = MilModel(aggregator, 2, TINY, seed=1)
    a = model.predict(bag_from(values))
    b = model.predict(bag_from(np.repeat(values, 2, axis=0)))
    assert abs(a - b) <= 1e-12


def test_nested_single_region_equals_flat_attention():
    values = np.random.default_rng(8).normal(size=(7, 3))
    flat = MilModel("attention", 3, TINY, seed=9)
    nested = MilModel("nested", 3, TINY, seed=9)
    for k in ("att.V", "att.U", "att.w"):
        nested.params[k] = flat.params[k].copy()
    for k in list(nested.params):
        if k.startswith("clf."):
            nested.params[k] = flat.params[k].copy()
    nb = bag_from(values)
    assert abs(nested.predict(nb) - flat.predict(nb)) <= 1e-12


def test_vote_score_is_fraction_of_positive_instances():
    model = MilModel("vote", 2, TINY, seed=3)
    nb = bag_from(np.random.default_rng(0).normal(size=(8, 2)))
    score = model.predict(nb)
    assert score in {k / 8 for k in range(9)}


def test_attention_map_shapes():
    model = MilModel("nested", 2, TINY, seed=0)
    rng = np.random.default_rng(1)
    regions = [Region(f"r{k}", [f"{k}-{i}" for i in range(3)], rng.normal(size=(3, 2)))
               for k in range(2)]
    region_w, instance_w = model.attention_map(NestedBag("b", regions, 1))
    assert region_w.shape == (2,)
    np.testing.assert_allclose(region_w.sum(), 1.0, atol=1e-12)
    assert len(instance_w) == 2
    for w in instance_w:
        np.testing.assert_allclose(w.sum(), 1.0, atol=1e-12)

    flat = MilModel("attention", 2, TINY, seed=0)
    region_w, instance_w = flat.attention_map(bag_from(rng.normal(size=(4, 2))))
    np.testing.assert_array_equal(region_w, [1.0])
    assert instance_w[0].shape == (4,)
    with pytest.raises(ConfigError):
        MilModel("mean", 2, TINY).attention_map(bag_from([[0.0, 0.0]]))


def test_stochastic_predict_needs_rng():
    model = MilModel("attention", 2, TINY, seed=0)
    nb = bag_from([[0.5, 1.0]])
    with pytest.raises(ValueError):
        model.predict(nb, dropout_rate=0.5)
    rng = np.random.default_rng(0)
    assert 0.0 <= model.predict(nb, dropout_rate=0.5, rng=rng) <= 1.0


# --- clinical fusion ------------------------------------------------------------


def test_fuse_clinical_concat_and_validation():
    np.testing.assert_array_equal(fuse_clinical([1.0, 2.0], [3.0]), [1.0, 2.0, 3.0])
    with pytest.raises(DataError):
        fuse_clinical([1.0], [np.nan])


def test_fusion_model_wiring():
    model = MilModel("attention", 3, TINY, fusion="concat", clinical_dim=2, seed=0)
    nb = bag_from(np.ones((4, 3)), clinical=np.array([0.5, -0.5]))
    assert 0.0 <= model.predict(nb) <= 1.0
    with pytest.raises(DataError, match="clinical"):
        model.predict(bag_from(np.ones((4, 3))))
    only = MilModel("mean", 3, TINY, fusion="only", clinical_dim=2, seed=0)
    assert 0.0 <= only.predict(nb) <= 1.0
    with pytest.raises(ConfigError):
        MilModel("vote", 3, TINY, fusion="concat", clinical_dim=2)
    with pytest.raises(ConfigError):
        MilModel("attention", 3, TINY, fusion="concat", clinical_dim=0)


def test_train_rejects_fusion_without_clinical_vectors():
    with pytest.raises(ConfigError, match="clinical"):
        train_mil(easy_dataset(), "attention", quick_train(), fusion="concat")


# --- training loop ---------------------------------------------------------------


def test_training_learns_separable_bags():
    result = train_mil(easy_dataset(), "attention", quick_train())
    assert result.best_val_auc >= 0.95
    assert result.history[0][2] <= 1.0 and result.best_epoch >= 1


def test_training_is_deterministic():
    a = train_mil(easy_dataset(), "attention", quick_train(max_epochs=3, patience=2))
    b = train_mil(easy_dataset(), "attention", quick_train(max_epochs=3, patience=2))
    assert a.history == b.history
    for k in a.model.params:
        np.testing.assert_array_equal(a.model.params[k], b.model.params[k])


def test_patience_stops_exactly_after_no_improvement():
    cfg = quick_train(max_epochs=50, patience=3)
    result = train_mil(easy_dataset(), "attention", cfg)
    if len(result.history) < cfg.max_epochs:
        assert len(result.history) == result.best_epoch + cfg.patience
    assert result.best_val_auc == max(h[2] for h in result.history)
    assert result.best_epoch == min(e for e, _, a in result.history
                                    if a == result.best_val_auc)


def test_validation_needs_both_classes():
    ds = easy_dataset()
    flipped = Dataset(train=ds.train,
                      val=[NestedBag(nb.bag_id, nb.regions, 0, nb.clinical) for nb in ds.val],
                      test=ds.test, dim=ds.dim, provenance={})
    with pytest.raises(DataError, match="both classes"):
        train_mil(flipped, "attention", quick_train())


def test_runs_use_distinct_seeds():
    cfg = quick_train(max_epochs=2, patience=1, runs=3)
    results = train_mil_runs(easy_dataset(), "attention", cfg)
    assert len(results) == 3
    first = [r.model.params["att.V"] for r in results]
    assert not np.array_equal(first[0], first[1])


def test_history_csv(tmp_path):
    result = train_mil(easy_dataset(), "mean", quick_train(max_epochs=2, patience=1))
    path = tmp_path / "history.csv"
    result.history_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "epoch,train_loss,val_auc"
    assert len(lines) == len(result.history) + 1


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(n_b=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(dropout=1.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(patience=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(alpha=1.5).validate()
    with pytest.raises(ConfigError):
        TrainConfig(gamma=0.0).validate()
    TrainConfig().validate()


def test_model_json_roundtrip(tmp_path):
    model = MilModel("nested", 3, TINY, seed=7)
    path = tmp_path / "model.json"
    model.to_json(path)
    loaded = MilModel.from_json(path)
    assert loaded.aggregator == "nested" and loaded.h_dim == 3
    assert loaded.classifier_widths == model.classifier_widths
    rng = np.random.default_rng(2)
    regions = [Region(f"r{k}", [f"{k}-{i}" for i in range(3)], rng.normal(size=(3, 3)))
               for k in range(2)]
    nb = NestedBag("b", regions, 1)
    assert loaded.predict(nb) == model.predict(nb)


# --- grid search ------------------------------------------------------------------


def test_grid_size_counts_the_full_table():
    full = {k: list(v) for k, v in GRID_VALUES.items()}
    assert grid_size(full) == 38400
    assert grid_size({"lr": [1e-2]}) == 1
    assert grid_size({}) == 0


def test_grid_validation():
    with pytest.raises(ConfigError, match="unknown grid key"):
        grid_size({"momentum": [0.9]})
    with pytest.raises(ConfigError, match="no values"):
        grid_size({"lr": []})
    with pytest.raises(ConfigError, match="admissible"):
        grid_size({"lr": [5e-2]})


def test_grid_combinations_are_sorted_and_deterministic():
    grid = {"optimizer": ["sgd", "adam"], "lr": [1e-2, 1e-3]}
    combos = list(grid_combinations(grid))
    assert combos[0] == {"lr": 1e-2, "optimizer": "sgd"}
    assert combos == list(grid_combinations(grid))
    assert len(combos) == 4


def test_grid_search_ranks_combos():
    ds = easy_dataset()
    base = quick_train(max_epochs=2, patience=1)
    rows = grid_search(ds, {"n_b": [4, 16]}, base, runs=2, seed=1)
    assert [row["rank"] for row in rows] == [1, 2]
    assert rows[0]["mean_val_auc"] >= rows[1]["mean_val_auc"]
    for row in rows:
        assert len(row["val_aucs"]) == 2
        assert row["combo"]["n_b"] in (4, 16)
    wide = grid_search(ds, {"classifier_width": [128]}, base, runs=1, seed=1)
    assert wide[0]["combo"] == {"classifier_width": 128}
