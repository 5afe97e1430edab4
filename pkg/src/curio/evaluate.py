"""Retrieval, classification-transfer, and ablation protocols.

Features come from a named trunk tap (flattened pooled conv5, or fc7)
and feed cosine-distance retrieval, k-nearest-neighbor classification,
and a small softmax probe trained on top of fc7. Everything is exact
brute force — indices here are small enough that clever data structures
would only add tie-breaking ambiguity.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .dataio import ContainerReader, RunConfig, load_batch
from .errors import ConfigurationError, DomainError
from .network import MultiTaskNetwork, build_network
from .training import Rmsprop, OptimConfig, network_config_for, train

FEATURE_TAPS = ("conv5", "fc7")


def extract_features(net: MultiTaskNetwork, images: np.ndarray,
                     tap: str = "fc7", batch_size: int = 64) -> np.ndarray:
    """Tap activations for an image stack, row-aligned with the input.

    ``conv5`` means the flattened post-pool conv5 map; ``fc7`` the final
    trunk embedding.
    """
    if tap not in FEATURE_TAPS:
        raise ConfigurationError(
            f"unknown feature tap {tap!r}; choose from {FEATURE_TAPS}")
    inner = "pool5" if tap == "conv5" else "fc7"
    dt = net.config.np_dtype
    rows = []
    for start in range(0, len(images), batch_size):
        x = ad.Tensor(images[start:start + batch_size], dtype=dt)
        out = net.root.forward(x, upto=inner)[inner]
        rows.append(out.data.reshape(out.shape[0], -1).copy())
    return np.concatenate(rows, axis=0) if rows else \
        np.empty((0, 0), dtype=dt)


@dataclass
class FeatureIndex:
    """Feature rows plus aligned labels, compared by cosine distance."""

    features: np.ndarray        # [N, D]
    row_ids: np.ndarray         # global identity used for self-exclusion
    instance_ids: np.ndarray
    category_ids: np.ndarray
    class_ids: np.ndarray

    def __post_init__(self):
        n = len(self.features)
        for name in ("row_ids", "instance_ids", "category_ids",
                     "class_ids"):
            if len(getattr(self, name)) != n:
                raise ConfigurationError(
                    f"{name} length does not match feature rows")
        norms = np.linalg.norm(self.features, axis=1)
        if n and norms.min() < 1e-12:
            bad = int(np.argmin(norms))
            raise DomainError(
                f"feature row {bad} has zero norm; cosine distance "
                "is undefined for it")
        self._unit = self.features / norms[:, None] if n else self.features

    def __len__(self):
        return len(self.features)

    def labels(self, level: str) -> np.ndarray:
        if level == "instance":
            return self.instance_ids
        if level == "category":
            return self.category_ids
        if level == "class":
            return self.class_ids
        raise ConfigurationError(f"unknown label level {level!r}")

    def cosine_similarities(self, queries: "FeatureIndex") -> np.ndarray:
        return queries._unit @ self._unit.T


def index_from_gallery(net: MultiTaskNetwork, reader: ContainerReader,
                       tap: str = "fc7", batch_size: int = 64,
                       indices=None) -> FeatureIndex:
    """FeatureIndex for (a subset of) a gallery container."""
    if reader.task != "gallery":
        raise ConfigurationError(
            f"expected a gallery container, got {reader.task!r}")
    indices = np.arange(len(reader)) if indices is None \
        else np.asarray(indices)
    batch = load_batch(reader, indices)
    feats = extract_features(net, batch["images"], tap, batch_size)
    return FeatureIndex(feats, row_ids=indices,
                        instance_ids=batch["instance_ids"],
                        category_ids=batch["category_ids"],
                        class_ids=batch["class_ids"])


def _ranked_neighbors(index: FeatureIndex, queries: FeatureIndex,
                      exclude_self: bool) -> np.ndarray:
    sims = index.cosine_similarities(queries)
    if exclude_self:
        self_mask = queries.row_ids[:, None] == index.row_ids[None, :]
        sims = np.where(self_mask, -np.inf, sims)
    return np.argsort(-sims, axis=1, kind="stable")


def recall_at_k(index: FeatureIndex, queries: FeatureIndex, k: int,
                level: str = "instance") -> float:
    """Fraction of queries with a matching label among the k nearest
    neighbors. Queries that are rows of the index never count
    themselves as neighbors."""
    shared = bool(np.intersect1d(queries.row_ids, index.row_ids).size)
    available = len(index) - (1 if shared else 0)
    if not (1 <= k <= available):
        raise ConfigurationError(
            f"k={k} outside the valid range 1..{available} "
            f"for this index")
    order = _ranked_neighbors(index, queries, exclude_self=shared)
    top = order[:, :k]
    want = queries.labels(level)[:, None]
    got = index.labels(level)[top]
    return float(np.mean(np.any(got == want, axis=1)))


def knn_classify(train: FeatureIndex, test: FeatureIndex, k: int = 5,
                 level: str = "class") -> float:
    """Majority vote over the k nearest train rows; vote ties resolve
    to the smallest label id."""
    if len(train) == 0:
        raise ConfigurationError("cannot classify against an empty index")
    if not (1 <= k <= len(train)):
        raise ConfigurationError(
            f"k={k} outside the valid range 1..{len(train)}")
    order = _ranked_neighbors(train, test, exclude_self=False)
    labels = train.labels(level)[order[:, :k]]
    want = test.labels(level)
    n_labels = int(max(labels.max(), want.max())) + 1
    hits = 0
    for row, target in zip(labels, want):
        votes = np.bincount(row, minlength=n_labels)
        hits += int(np.argmax(votes) == target)
    return hits / len(test)


def nearest_neighbor_gallery(index: FeatureIndex, queries: FeatureIndex,
                             n: int, allow_self: bool = True):
    """Top-n neighbor rows per query: (row_id, cosine distance) pairs
    with nondecreasing distance."""
    if not (1 <= n <= len(index)):
        raise ConfigurationError(
            f"n={n} outside the valid range 1..{len(index)}")
    order = _ranked_neighbors(index, queries, exclude_self=not allow_self)
    sims = index.cosine_similarities(queries)
    rows = []
    for q in range(len(queries)):
        top = order[q, :n]
        rows.append([(int(index.row_ids[j]), float(1.0 - sims[q, j]))
                     for j in top])
    return rows


# ------------------------------------------------------------ classification


def split_instances(instance_ids: np.ndarray, class_ids: np.ndarray,
                    test_fraction: float = 0.25, seed: int = 0):
    """Train/test row split holding out whole instances within each
    class, so test objects are never seen during training."""
    rng = np.random.default_rng([0x5917, seed])
    test_rows = np.zeros(len(instance_ids), dtype=bool)
    for cls in np.unique(class_ids):
        instances = np.unique(instance_ids[class_ids == cls])
        n_test = max(1, int(round(test_fraction * len(instances))))
        if len(instances) < 2:
            raise ConfigurationError(
                f"class {cls} has fewer than two instances; cannot "
                "hold any out")
        chosen = rng.permutation(instances)[:n_test]
        test_rows |= np.isin(instance_ids, chosen)
    train_ix = np.flatnonzero(~test_rows)
    test_ix = np.flatnonzero(test_rows)
    return train_ix, test_ix


def _standardizer(train_features: np.ndarray):
    """Per-dimension whitening constants from the training split.

    Dimensions whose spread is negligible next to the widest one are
    left unscaled so dead units cannot blow up the probe's input.
    """
    mu = train_features.mean(axis=0)
    sigma = train_features.std(axis=0)
    floor = max(1e-8 * float(sigma.max(initial=0.0)), 1e-30)
    sigma = np.where(sigma > floor, sigma, 1.0).astype(train_features.dtype)
    return mu.astype(train_features.dtype), sigma


def finetune_classify(net: MultiTaskNetwork, train_images, train_labels,
                      test_images, test_labels, epochs: int = 10,
                      learning_rate: float = 1e-3, batch_size: int = 16,
                      unfreeze: bool = False, seed: int = 0) -> float:
    """Train a fresh softmax probe on fc7 and report test accuracy.

    The probe consumes fc7 standardized with training-split statistics
    (computed once, before any weight moves). With ``unfreeze`` the
    trunk trains along with the probe; otherwise fc7 features are
    extracted once and only the probe moves. Zero epochs scores the
    untrained probe.
    """
    train_labels = np.asarray(train_labels)
    test_labels = np.asarray(test_labels)
    classes = np.unique(np.concatenate([train_labels, test_labels]))
    n_classes = len(classes)
    if not np.array_equal(classes, np.arange(n_classes)):
        raise ConfigurationError(
            "class labels must be contiguous integers starting at 0")
    dt = net.config.np_dtype
    rng = np.random.default_rng([0xF17E, seed])
    width = net.config.fc_width
    w = ad.Tensor(rng.normal(0.0, net.config.init_std,
                             (n_classes, width)).astype(dt),
                  requires_grad=True)
    b = ad.Tensor(np.zeros(n_classes, dtype=dt), requires_grad=True)
    from .network import ParameterStore
    store = ParameterStore()
    store.register("probe/w", w)
    store.register("probe/b", b)
    names = ["probe/w", "probe/b"]
    if unfreeze:
        for name, t in net.params.items():
            store.register(name, t)
        names = store.names()
    optim = Rmsprop(store, OptimConfig(learning_rate=learning_rate))

    frozen_train = extract_features(net, train_images, "fc7", batch_size)
    mu, sigma = _standardizer(frozen_train)
    frozen_std = (frozen_train - mu) / sigma
    # whitening as a constant affine layer keeps the trunk in the graph
    white_w = ad.Tensor(np.diag(1.0 / sigma).astype(dt))
    white_b = ad.Tensor((-mu / sigma).astype(dt))

    it_seed = int(rng.integers(2 ** 31 - 1))
    n = len(train_images)
    from .training import BatchIterator
    it = BatchIterator(n, batch_size, it_seed) if epochs > 0 else None
    steps = epochs * max(1, n // min(batch_size, n))
    for _ in range(steps):
        ix = it.next_batch()
        if unfreeze:
            raw = net.root.forward(
                ad.Tensor(train_images[ix], dtype=dt), upto="fc7")["fc7"]
            feats = ad.linear(raw, white_w, white_b)
        else:
            feats = ad.Tensor(frozen_std[ix], dtype=dt)
        logits = ad.linear(feats, w, b)
        loss = ad.softmax_cross_entropy(logits, train_labels[ix])
        ad.backward(loss)
        optim.step(names)

    test_feats = extract_features(net, test_images, "fc7", batch_size)
    scores = ((test_feats - mu) / sigma) @ w.data.T + b.data
    pred = np.argmax(scores, axis=1)
    return float(np.mean(pred == test_labels))


# ------------------------------------------------------------------ reports


@dataclass
class EvalReport:
    """Deterministic result table; no timestamps, stable key order."""

    recall: dict            # {(level, k): value}
    classification: dict    # {name: accuracy}
    gallery_rows: list | None = None

    def to_text(self) -> str:
        lines = []
        if self.recall:
            ks = sorted({k for (_, k) in self.recall})
            lines.append("recall@k        " +
                         "".join(f"k={k:<8d}" for k in ks))
            for level in ("instance", "category"):
                row = [self.recall.get((level, k)) for k in ks]
                if any(v is not None for v in row):
                    cells = "".join(f"{v:<10.4f}" if v is not None
                                    else " " * 10 for v in row)
                    lines.append(f"{level:<16s}{cells}")
        for name in sorted(self.classification):
            lines.append(f"{name:<32s}{self.classification[name]:.4f}")
        if self.gallery_rows is not None:
            for q, row in enumerate(self.gallery_rows):
                cells = "  ".join(f"{i}:{d:.4f}" for i, d in row)
                lines.append(f"query {q:<4d} -> {cells}")
        return "\n".join(lines) + "\n"

    def to_ndjson(self) -> str:
        recs = []
        for (level, k) in sorted(self.recall):
            recs.append({"metric": "recall", "level": level, "k": k,
                         "value": self.recall[(level, k)]})
        for name in sorted(self.classification):
            recs.append({"metric": "accuracy", "name": name,
                         "value": self.classification[name]})
        if self.gallery_rows is not None:
            for q, row in enumerate(self.gallery_rows):
                recs.append({"metric": "neighbors", "query": q,
                             "rows": row})
        return "".join(json.dumps(r) + "\n" for r in recs)

    def write(self, out_dir, stem: str):
        os.makedirs(out_dir, exist_ok=True)
        text_path = os.path.join(out_dir, stem + ".txt")
        data_path = os.path.join(out_dir, stem + ".ndjson")
        with open(text_path, "w") as fh:
            fh.write(self.to_text())
        with open(data_path, "w") as fh:
            fh.write(self.to_ndjson())
        return text_path, data_path


def transfer_accuracies(net: MultiTaskNetwork, reader: ContainerReader,
                        config: RunConfig, seed: int = 0) -> dict:
    """Frozen-feature knn and fc7-probe accuracies on held-out
    instances of the gallery's shape-by-texture classes."""
    batch = load_batch(reader, np.arange(len(reader)))
    train_ix, test_ix = split_instances(batch["instance_ids"],
                                        batch["class_ids"], seed=seed)
    tap = config.eval_tap
    train_index = index_from_gallery(net, reader, tap, indices=train_ix)
    test_index = index_from_gallery(net, reader, tap, indices=test_ix)
    knn = knn_classify(train_index, test_index,
                       k=min(config.knn_k, len(train_index)),
                       level="class")
    probe = finetune_classify(
        net, batch["images"][train_ix], batch["class_ids"][train_ix],
        batch["images"][test_ix], batch["class_ids"][test_ix],
        epochs=config.finetune_epochs, learning_rate=config.finetune_lr,
        batch_size=config.batch_size, seed=seed)
    return {"knn": knn, "finetune": probe}


def evaluate_checkpoint(net: MultiTaskNetwork, reader: ContainerReader,
                        config: RunConfig, metric: str,
                        gallery_n: int = 5) -> EvalReport:
    """One metric family against a gallery container."""
    recall, classification, gallery_rows = {}, {}, None
    if metric == "recall":
        index = index_from_gallery(net, reader, config.eval_tap)
        for level in ("instance", "category"):
            for k in config.recall_k_list():
                recall[(level, k)] = recall_at_k(index, index, k, level)
    elif metric in ("knn", "finetune"):
        acc = transfer_accuracies(net, reader, config, seed=config.seed)
        classification[metric] = acc[metric]
    elif metric == "gallery":
        index = index_from_gallery(net, reader, config.eval_tap)
        gallery_rows = nearest_neighbor_gallery(
            index, index, n=min(gallery_n, len(index)))
    else:
        raise ConfigurationError(
            f"unknown metric {metric!r}; choose recall, knn, finetune "
            "or gallery")
    return EvalReport(recall, classification, gallery_rows)


# ------------------------------------------------------------------ ablation

ABLATION_ROWS = ("none", "grasp", "push", "poke", "identity")


def ablation_run(config: RunConfig, exclude: str, out_dir) -> dict:
    """Train with one task removed (or none) and score the transfer
    protocols; returns one report row."""
    if exclude not in ABLATION_ROWS:
        raise ConfigurationError(f"unknown exclusion {exclude!r}")
    row_cfg = replace(config, exclude=exclude, out_dir=str(out_dir))
    result = train(row_cfg)
    with ContainerReader(row_cfg.gallery_data) as reader:
        acc = transfer_accuracies(result["network"], reader, row_cfg,
                                  seed=row_cfg.seed)
    label = "all" if exclude == "none" else f"except-{exclude}"
    return {"row": label,
            "exclude": exclude,
            "divisor": len(row_cfg.tasks()),
            "seed": result["seed"],
            "config_hash": row_cfg.config_hash().hex(),
            "knn_accuracy": acc["knn"],
            "finetune_accuracy": acc["finetune"]}


def ablation_table(config: RunConfig, out_dir) -> list[dict]:
    """The five-row table: all tasks plus each single-task exclusion."""
    rows = []
    for exclude in ABLATION_ROWS:
        label = "all" if exclude == "none" else f"except-{exclude}"
        rows.append(ablation_run(config, exclude,
                                 os.path.join(str(out_dir), label)))
    return rows


def ablation_table_text(rows: list[dict]) -> str:
    header = (f"{'row':<18s}{'divisor':<9s}{'knn':<10s}"
              f"{'finetune':<10s}hash")
    lines = [header]
    for r in rows:
        lines.append(f"{r['row']:<18s}{r['divisor']:<9d}"
                     f"{r['knn_accuracy']:<10.4f}"
                     f"{r['finetune_accuracy']:<10.4f}"
                     f"{r['config_hash']}")
    return "\n".join(lines) + "\n"


def random_baseline_network(config: RunConfig,
                            seed: int) -> MultiTaskNetwork:
    """Fresh Gaussian-initialized network for baseline comparisons."""
    return build_network(network_config_for(config), seed=seed,
                         tasks=config.tasks())
