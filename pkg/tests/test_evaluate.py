"""Retrieval/classification metrics against exhaustive brute-force oracles."""

import numpy as np
import pytest

from curio.dataio import (ContainerReader, settings_hash,
                          write_gallery_container, write_grasp_container)
from curio.errors import ConfigurationError, DomainError
from curio.evaluate import (EvalReport, FeatureIndex, ablation_run,
                            ablation_table_text, evaluate_checkpoint,
                            extract_features, finetune_classify,
                            index_from_gallery, knn_classify,
                            nearest_neighbor_gallery, recall_at_k,
                            split_instances, transfer_accuracies)
from curio.network import build_network, desk_config
from curio.sim import gen_gallery_dataset, gen_grasp_dataset

SIZE = 32
HASH = settings_hash({"suite": "eval-test"})


def make_index(features, instance_ids=None, category_ids=None,
               class_ids=None, row_ids=None):
    features = np.asarray(features, dtype=np.float64)
    n = len(features)
    fill = np.arange(n)
    return FeatureIndex(
        features,
        row_ids=fill if row_ids is None else np.asarray(row_ids),
        instance_ids=fill if instance_ids is None
        else np.asarray(instance_ids),
        category_ids=fill if category_ids is None
        else np.asarray(category_ids),
        class_ids=fill if class_ids is None else np.asarray(class_ids))


def random_index(n, dim, seed, n_instances, n_categories):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(n, dim))
    inst = rng.integers(n_instances, size=n)
    cat = inst % n_categories
    return make_index(feats, instance_ids=inst, category_ids=cat,
                      class_ids=inst)


def oracle_recall(index, queries, k, level):
    """Plain-loop recall: per-pair cosine, python sort, membership."""
    hits = 0
    want = queries.labels(level)
    got = index.labels(level)
    for q in range(len(queries)):
        qv = queries.features[q]
        qv = qv / np.linalg.norm(qv)
        scored = []
        for j in range(len(index)):
            if index.row_ids[j] == queries.row_ids[q]:
                continue
            iv = index.features[j] / np.linalg.norm(index.features[j])
            scored.append((-float(qv @ iv), j))
        scored.sort()
        top = [j for _, j in scored[:k]]
        hits += int(any(got[j] == want[q] for j in top))
    return hits / len(queries)


# ------------------------------------------------------------ FeatureIndex


def test_feature_index_rejects_zero_norm_rows():
    feats = np.ones((3, 4))
    feats[1] = 0.0
    with pytest.raises(DomainError, match="row 1"):
        make_index(feats)


def test_feature_index_rejects_mismatched_labels():
    with pytest.raises(ConfigurationError, match="instance_ids"):
        make_index(np.ones((3, 4)), instance_ids=[0, 1])


def test_feature_index_unknown_level():
    with pytest.raises(ConfigurationError, match="level"):
        make_index(np.ones((2, 3))).labels("flavor")


# ----------------------------------------------------------------- recall


def test_recall_matches_exhaustive_search():
    index = random_index(20, 8, seed=11, n_instances=10, n_categories=4)
    for level in ("instance", "category"):
        for k in (1, 2, 3, 5, 10):
            assert recall_at_k(index, index, k, level) == pytest.approx(
                oracle_recall(index, index, k, level))


def test_recall_with_disjoint_queries_matches_oracle():
    index = random_index(16, 6, seed=3, n_instances=8, n_categories=4)
    rng = np.random.default_rng(4)
    inst = rng.integers(8, size=7)
    queries = make_index(rng.normal(size=(7, 6)), instance_ids=inst,
                         category_ids=inst % 4,
                         row_ids=100 + np.arange(7))
    for k in (1, 4, 16):
        assert recall_at_k(index, queries, k, "instance") == \
            pytest.approx(oracle_recall(index, queries, k, "instance"))


def test_recall_monotone_in_k_and_category_dominates_instance():
    index = random_index(24, 5, seed=7, n_instances=12, n_categories=3)
    prev_i = prev_c = 0.0
    for k in range(1, 16):
        r_i = recall_at_k(index, index, k, "instance")
        r_c = recall_at_k(index, index, k, "category")
        assert r_i >= prev_i and r_c >= prev_c
        assert r_c >= r_i  # categories group instances
        prev_i, prev_c = r_i, r_c


def test_recall_excludes_self_matches():
    # Each row's nearest *other* row belongs to a different instance, so
    # recall@1 must be 0; counting self-matches would have made it 1.
    feats = [[1.0, 0.0], [-1.0, 0.1], [0.99, 0.1], [-0.99, 0.0]]
    index = make_index(feats, instance_ids=[0, 0, 1, 1])
    assert recall_at_k(index, index, 1, "instance") == 0.0
    # The same vectors as *foreign* queries retrieve their own copies,
    # which count because no row id matches.
    queries = make_index(feats, instance_ids=[0, 0, 1, 1],
                         row_ids=[10, 11, 12, 13])
    assert recall_at_k(index, queries, 1, "instance") == 1.0


def test_recall_k_bounds():
    index = random_index(6, 3, seed=0, n_instances=3, n_categories=3)
    with pytest.raises(ConfigurationError, match="k=0"):
        recall_at_k(index, index, 0)
    with pytest.raises(ConfigurationError, match="k=6"):
        recall_at_k(index, index, 6)  # self never counts
    recall_at_k(index, index, 5)  # largest legal k


# -------------------------------------------------------------------- knn


def oracle_knn(train, test, k, level):
    labels = train.labels(level)
    hits = 0
    for q in range(len(test)):
        qv = test.features[q] / np.linalg.norm(test.features[q])
        scored = []
        for j in range(len(train)):
            iv = train.features[j] / np.linalg.norm(train.features[j])
            scored.append((-float(qv @ iv), j))
        scored.sort()
        votes = {}
        for _, j in scored[:k]:
            votes[labels[j]] = votes.get(labels[j], 0) + 1
        pred = sorted(votes, key=lambda lab: (-votes[lab], lab))[0]
        hits += int(pred == test.labels(level)[q])
    return hits / len(test)


def test_knn_matches_exhaustive_vote():
    train = random_index(30, 6, seed=21, n_instances=5, n_categories=5)
    test = random_index(12, 6, seed=22, n_instances=5, n_categories=5)
    for k in (1, 3, 5, 9):
        for level in ("instance", "category"):
            assert knn_classify(train, test, k, level) == pytest.approx(
                oracle_knn(train, test, k, level))


def test_knn_perfect_on_separated_clusters():
    rng = np.random.default_rng(0)
    centers = np.eye(3) * 10
    feats = np.concatenate([c + rng.normal(scale=0.01, size=(8, 3))
                            for c in centers])
    labels = np.repeat([0, 1, 2], 8)
    train = make_index(feats[::2], class_ids=labels[::2])
    test = make_index(feats[1::2], class_ids=labels[1::2])
    assert knn_classify(train, test, k=3, level="class") == 1.0


def test_knn_tie_breaks_to_smaller_label():
    # Two neighbors exactly equidistant from the query, labels 1 and 2:
    # the vote is tied, so the smaller label must win.
    train = make_index([[1.0, 0.1], [1.0, -0.1]], class_ids=[2, 1])
    query_as_1 = make_index([[1.0, 0.0]], class_ids=[1])
    query_as_2 = make_index([[1.0, 0.0]], class_ids=[2])
    assert knn_classify(train, query_as_1, k=2, level="class") == 1.0
    assert knn_classify(train, query_as_2, k=2, level="class") == 0.0


def test_knn_validation():
    train = random_index(4, 3, seed=1, n_instances=2, n_categories=2)
    test = random_index(2, 3, seed=2, n_instances=2, n_categories=2)
    with pytest.raises(ConfigurationError, match="k=5"):
        knn_classify(train, test, k=5)
    with pytest.raises(ConfigurationError, match="empty"):
        knn_classify(make_index(np.empty((0, 3))), test, k=1)


# ------------------------------------------------------- neighbor listings


def test_gallery_rows_sorted_and_self_handling():
    index = random_index(10, 4, seed=9, n_instances=5, n_categories=5)
    rows = nearest_neighbor_gallery(index, index, n=4, allow_self=True)
    assert len(rows) == 10
    for q, row in enumerate(rows):
        ids = [i for i, _ in row]
        dists = [d for _, d in row]
        assert ids[0] == q and dists[0] == pytest.approx(0.0, abs=1e-12)
        assert all(a <= b + 1e-12 for a, b in zip(dists, dists[1:]))
    rows = nearest_neighbor_gallery(index, index, n=4, allow_self=False)
    for q, row in enumerate(rows):
        assert q not in [i for i, _ in row]
    with pytest.raises(ConfigurationError, match="n=11"):
        nearest_neighbor_gallery(index, index, n=11)


# --------------------------------------------------------------- features


@pytest.fixture(scope="module")
def small_net():
    return build_network(desk_config(input_size=SIZE), seed=77)


@pytest.fixture(scope="module")
def gallery_path(tmp_path_factory):
    views = gen_gallery_dataset(n_instances=32, views_per_instance=2,
                                seed=101, image_size=SIZE)
    inst_class = {v.instance_id: v.class_id for v in views}
    counts = np.bincount(list(inst_class.values()), minlength=8)
    # the split helper needs >= 2 instances in every class; this seed
    # provides them, so fail loudly if generation ever drifts
    assert counts.min() >= 2, counts
    path = tmp_path_factory.mktemp("gallery") / "gallery.bin"
    write_gallery_container(path, views, seed=101, config_hash=HASH)
    return path


def test_extract_features_shapes_and_batching(small_net):
    rng = np.random.default_rng(5)
    images = rng.uniform(size=(7, 3, SIZE, SIZE)).astype(np.float32)
    fc7 = extract_features(small_net, images, "fc7")
    assert fc7.shape == (7, small_net.config.fc_width)
    conv5 = extract_features(small_net, images, "conv5")
    assert conv5.ndim == 2 and len(conv5) == 7 and conv5.shape[1] > 0
    repeat = extract_features(small_net, images, "fc7")
    np.testing.assert_array_equal(fc7, repeat)  # fixed batching is exact
    small = extract_features(small_net, images, "fc7", batch_size=3)
    np.testing.assert_allclose(fc7, small, rtol=1e-3, atol=1e-9)
    with pytest.raises(ConfigurationError, match="tap"):
        extract_features(small_net, images, "fc9")


def test_index_from_gallery(small_net, gallery_path):
    with ContainerReader(gallery_path) as reader:
        index = index_from_gallery(small_net, reader, "fc7")
        assert len(index) == len(reader)
        np.testing.assert_array_equal(index.row_ids,
                                      np.arange(len(reader)))
        sub = index_from_gallery(small_net, reader, "fc7",
                                 indices=[4, 9, 2])
    np.testing.assert_array_equal(sub.row_ids, [4, 9, 2])
    np.testing.assert_allclose(sub.features, index.features[[4, 9, 2]],
                               rtol=1e-3, atol=1e-9)
    assert len(np.unique(index.class_ids)) == 8


def test_index_from_gallery_rejects_other_kinds(small_net, tmp_path):
    samples = gen_grasp_dataset(2, seed=1, image_size=SIZE)
    path = tmp_path / "grasp.bin"
    write_grasp_container(path, samples, seed=1, config_hash=HASH)
    with ContainerReader(path) as reader:
        with pytest.raises(ConfigurationError, match="gallery"):
            index_from_gallery(small_net, reader)


# ------------------------------------------------------------------ split


def test_split_instances_holds_out_whole_instances():
    rng = np.random.default_rng(8)
    inst = np.repeat(np.arange(24), 3)
    cls = np.repeat(rng.permutation(np.repeat(np.arange(8), 3)), 3)
    train_ix, test_ix = split_instances(inst, cls, seed=4)
    assert len(train_ix) + len(test_ix) == len(inst)
    assert not np.intersect1d(inst[train_ix], inst[test_ix]).size
    for c in range(8):  # every class appears on both sides
        assert (cls[train_ix] == c).any() and (cls[test_ix] == c).any()
    again = split_instances(inst, cls, seed=4)
    np.testing.assert_array_equal(train_ix, again[0])
    other = split_instances(inst, cls, seed=5)
    assert not np.array_equal(test_ix, other[1])


def test_split_instances_rejects_singleton_class():
    inst = np.array([0, 0, 1, 1, 2])
    cls = np.array([0, 0, 0, 0, 1])
    with pytest.raises(ConfigurationError, match="class 1"):
        split_instances(inst, cls)


# ------------------------------------------------------------- finetuning


def probe_images(seed=13, n=16):
    # two label groups with very different brightness: linearly
    # separable even through a random frozen trunk
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    images = rng.uniform(size=(n, 3, SIZE, SIZE)).astype(np.float32)
    images[labels == 1] += 4.0
    return images, labels


def test_probe_learns_its_training_set(small_net):
    images, labels = probe_images()
    before = small_net.params.snapshot()
    chance = finetune_classify(small_net, images, labels, images, labels,
                               epochs=0, seed=3)
    learned = finetune_classify(small_net, images, labels, images, labels,
                                epochs=40, learning_rate=1e-2,
                                batch_size=8, seed=3)
    assert learned >= 0.9
    assert learned > chance
    for name, arr in small_net.params.snapshot().items():
        np.testing.assert_array_equal(arr, before[name])  # trunk frozen


def test_unfreeze_moves_trunk():
    net = build_network(desk_config(input_size=SIZE), seed=6)
    images, labels = probe_images(seed=14, n=8)
    before = net.params.snapshot()
    acc = finetune_classify(net, images, labels, images, labels,
                            epochs=2, batch_size=4, unfreeze=True, seed=1)
    assert 0.0 <= acc <= 1.0
    moved = any(not np.array_equal(arr, before[name])
                for name, arr in net.params.snapshot().items())
    assert moved


def test_probe_rejects_gapped_labels(small_net):
    images, labels = probe_images(n=8)
    with pytest.raises(ConfigurationError, match="contiguous"):
        finetune_classify(small_net, images, labels * 2, images,
                          labels * 2, epochs=1)


# ---------------------------------------------------------------- reports


def test_eval_report_text_and_ndjson_are_stable():
    report = EvalReport(
        recall={("instance", 1): 0.25, ("instance", 5): 0.5,
                ("category", 1): 0.5, ("category", 5): 0.75},
        classification={"knn": 0.375, "finetune": 0.5})
    text, nd = report.to_text(), report.to_ndjson()
    assert text == report.to_text() and nd == report.to_ndjson()
    assert "recall@k" in text and "k=1" in text and "k=5" in text
    assert "instance" in text and "category" in text
    lines = [ln for ln in nd.splitlines() if ln]
    assert len(lines) == 6
    import json
    recs = [json.loads(ln) for ln in lines]
    assert recs[0] == {"metric": "recall", "level": "category", "k": 1,
                       "value": 0.5}
    assert recs[-1] == {"metric": "accuracy", "name": "knn",
                        "value": 0.375}


def test_eval_report_write_round_trip(tmp_path):
    report = EvalReport(recall={("instance", 1): 1.0}, classification={})
    t1, d1 = report.write(tmp_path, "eval")
    first = open(t1, "rb").read(), open(d1, "rb").read()
    t2, d2 = report.write(tmp_path, "eval")
    assert (open(t2, "rb").read(), open(d2, "rb").read()) == first


def test_evaluate_checkpoint_recall(small_net, gallery_path, tmp_path):
    from curio.dataio import RunConfig
    cfg = RunConfig(seed=1, input_size=SIZE, recall_ks="1,2,5",
                    gallery_data=str(gallery_path),
                    out_dir=str(tmp_path))
    with ContainerReader(gallery_path) as reader:
        report = evaluate_checkpoint(small_net, reader, cfg, "recall")
        again = evaluate_checkpoint(small_net, reader, cfg, "recall")
    assert set(report.recall) == {(lvl, k)
                                  for lvl in ("instance", "category")
                                  for k in (1, 2, 5)}
    assert report.to_ndjson() == again.to_ndjson()
    for (level, k), value in report.recall.items():
        assert 0.0 <= value <= 1.0


def test_evaluate_checkpoint_rejects_unknown_metric(small_net,
                                                    gallery_path,
                                                    tmp_path):
    from curio.dataio import RunConfig
    cfg = RunConfig(seed=1, input_size=SIZE,
                    gallery_data=str(gallery_path), out_dir=str(tmp_path))
    with ContainerReader(gallery_path) as reader:
        with pytest.raises(ConfigurationError, match="metric"):
            evaluate_checkpoint(small_net, reader, cfg, "auc")


def test_transfer_accuracies_bounds(small_net, gallery_path, tmp_path):
    from curio.dataio import RunConfig
    cfg = RunConfig(seed=2, input_size=SIZE, knn_k=3, finetune_epochs=1,
                    batch_size=8, gallery_data=str(gallery_path),
                    out_dir=str(tmp_path))
    with ContainerReader(gallery_path) as reader:
        acc = transfer_accuracies(small_net, reader, cfg, seed=2)
    assert set(acc) == {"knn", "finetune"}
    assert all(0.0 <= v <= 1.0 for v in acc.values())


# ---------------------------------------------------------------- ablation


def test_ablation_row_shape(tmp_path, gallery_path):
    from curio.dataio import RunConfig
    from test_training import write_small_datasets
    paths = write_small_datasets(tmp_path)
    cfg = RunConfig(seed=9, input_size=SIZE, batch_size=4,
                    stage1_iters=2, stage2_cycles=1, finetune_epochs=1,
                    knn_k=3,
                    grasp_data=str(paths["grasp"]),
                    push_data=str(paths["push"]),
                    poke_data=str(paths["poke"]),
                    identity_data=str(paths["identity"]),
                    gallery_data=str(gallery_path),
                    out_dir=str(tmp_path / "unused"))
    full = ablation_run(cfg, "none", tmp_path / "row-all")
    no_push = ablation_run(cfg, "push", tmp_path / "row-push")
    assert full["row"] == "all" and full["divisor"] == 4
    assert no_push["row"] == "except-push" and no_push["divisor"] == 3
    assert full["config_hash"] != no_push["config_hash"]
    assert full["seed"] != no_push["seed"]  # derived from the exclusion
    for row in (full, no_push):
        assert 0.0 <= row["knn_accuracy"] <= 1.0
        assert 0.0 <= row["finetune_accuracy"] <= 1.0
    with pytest.raises(ConfigurationError, match="exclusion"):
        ablation_run(cfg, "pull", tmp_path / "row-bad")
    table = ablation_table_text([full, no_push])
    assert "all" in table and "except-push" in table
    assert full["config_hash"] in table
