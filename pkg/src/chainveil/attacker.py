"""Decision-tree device identification from public ledger timestamps.

The attacker reads only the public view of a ledger set, slides a window of
W consecutive inter-transaction gaps along each chain, and trains a CART
classifier (Gini impurity, midpoint thresholds) to name the device behind
each window's final transaction.  The informed attacker sees every device
and is scored by stratified 10-fold cross-validation; the blind attacker
trains on a device subset and is scored on a foreign ledger set.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .ledger import LedgerSet, PublicView

__all__ = [
    "AttackReport",
    "DecisionTree",
    "FeatureInstance",
    "FeatureTable",
    "TreeParams",
    "blind_attack",
    "blind_attack_on_tables",
    "extract_features",
    "fit",
    "informed_attack",
    "informed_attack_on_table",
    "predict",
    "stratified_fold_ids",
]

_MASK64 = (1 << 64) - 1

DEFAULT_WINDOW = 3


@dataclass(frozen=True)
class TreeParams:
    """CART hyperparameters (seed only breaks feature ties deterministically)."""

    max_depth: int = 12
    min_samples_split: int = 4
    min_impurity_decrease: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")
        if self.min_impurity_decrease < 0:
            raise ValueError("min_impurity_decrease must be >= 0")

    def to_dict(self) -> dict:
        return {
            "max_depth": self.max_depth,
            "min_samples_split": self.min_samples_split,
            "min_impurity_decrease": self.min_impurity_decrease,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class FeatureInstance:
    """One window of consecutive inter-transaction gaps within a ledger."""

    gaps: np.ndarray
    label: str | None = None
    anchor_t_id: bytes | None = None
    is_genuine: bool = True


class FeatureTable:
    """Column-oriented batch of feature instances.

    ``X`` is the (n, W) gap matrix; ``labels`` (object array of device
    strings) and ``genuine`` (False where the anchoring transaction is
    spoofed) are present when a sidecar was supplied.  ``anchor_ledger`` and
    ``anchor_index`` locate each window's last transaction.
    """

    __slots__ = ("window", "X", "labels", "genuine", "anchor_ledger", "anchor_index", "_anchor_ids")

    def __init__(self, window, X, labels, genuine, anchor_ledger, anchor_index, anchor_ids=None):
        self.window = window
        self.X = X
        self.labels = labels
        self.genuine = genuine
        self.anchor_ledger = anchor_ledger
        self.anchor_index = anchor_index
        self._anchor_ids = anchor_ids

    def __len__(self) -> int:
        return len(self.X)

    def __getitem__(self, i: int) -> FeatureInstance:
        return FeatureInstance(
            gaps=self.X[i].copy(),
            label=None if self.labels is None else self.labels[i],
            anchor_t_id=None if self._anchor_ids is None else self._anchor_ids[i],
            is_genuine=bool(self.genuine[i]) if self.genuine is not None else True,
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def select(self, idx: np.ndarray) -> "FeatureTable":
        return FeatureTable(
            self.window,
            self.X[idx],
            None if self.labels is None else self.labels[idx],
            None if self.genuine is None else self.genuine[idx],
            self.anchor_ledger[idx],
            self.anchor_index[idx],
            None if self._anchor_ids is None else [self._anchor_ids[int(i)] for i in np.atleast_1d(idx)],
        )

    def subsample_per_class(self, cap: int, rng: np.random.Generator) -> "FeatureTable":
        """At most ``cap`` instances per label, drawn without replacement."""
        if self.labels is None:
            raise ValueError("cannot subsample an unlabeled feature table")
        keep: list[np.ndarray] = []
        for label in sorted(set(self.labels)):
            idx = np.nonzero(self.labels == label)[0]
            if len(idx) > cap:
                idx = np.sort(rng.choice(idx, size=cap, replace=False))
            keep.append(idx)
        return self.select(np.sort(np.concatenate(keep)))


def extract_features(
    public_ledgers: PublicView,
    window: int,
    sidecar=None,
) -> FeatureTable:
    """Slide a stride-1 gap window along each public ledger.

    A ledger of n transactions yields n - window instances (none when the
    chain is shorter than window + 1).  With a sidecar, each instance is
    labeled with the true device of its last (anchoring) transaction, and
    spoof-anchored instances are marked non-genuine so evaluation can
    exclude them.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    blocks_X = []
    blocks_labels = []
    blocks_genuine = []
    blocks_ledger = []
    blocks_anchor = []
    anchor_ids: list[bytes] | None = [] if all(l.t_id is not None for l in public_ledgers.ledgers) else None
    for li, pl in enumerate(public_ledgers.ledgers):
        n = len(pl)
        if n < window + 1:
            continue
        gaps = np.diff(pl.timestamps)
        blocks_X.append(sliding_window_view(gaps, window))
        blocks_ledger.append(np.full(n - window, li, dtype=np.int32))
        blocks_anchor.append(np.arange(window, n, dtype=np.int64))
        if anchor_ids is not None:
            anchor_ids.extend(pl.t_id[window:n])
        if sidecar is not None:
            devices, spoofed = sidecar.ledger_labels(li, pl.t_id)
            blocks_labels.append(np.asarray(devices, dtype=object)[window:])
            blocks_genuine.append(~np.asarray(spoofed, dtype=bool)[window:])
    if not blocks_X:
        empty = np.empty((0, window))
        return FeatureTable(
            window,
            empty,
            np.empty(0, dtype=object) if sidecar is not None else None,
            np.empty(0, dtype=bool) if sidecar is not None else None,
            np.empty(0, dtype=np.int32),
            np.empty(0, dtype=np.int64),
            [] if anchor_ids is not None else None,
        )
    return FeatureTable(
        window,
        np.vstack(blocks_X).astype(np.float64),
        np.concatenate(blocks_labels) if sidecar is not None else None,
        np.concatenate(blocks_genuine) if sidecar is not None else None,
        np.concatenate(blocks_ledger),
        np.concatenate(blocks_anchor),
        anchor_ids,
    )


class DecisionTree:
    """Binary CART classifier over gap windows.

    Nodes live in parallel arrays (feature < 0 marks a leaf).  Leaves carry
    the training class-count histogram; predictions follow the usual
    ``feature <= threshold goes left`` routing.
    """

    __slots__ = ("window", "classes", "feature", "threshold", "left", "right", "leaf_code", "counts")

    def __init__(self, window, classes, feature, threshold, left, right, leaf_code, counts):
        self.window = window
        self.classes = tuple(classes)
        self.feature = feature
        self.threshold = threshold
        self.left = left
        self.right = right
        self.leaf_code = leaf_code
        self.counts = counts

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depths[self.left[i]] = depths[i] + 1
                depths[self.right[i]] = depths[i] + 1
        return int(depths.max()) if self.n_nodes else 0

    def predict_codes(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.window:
            raise ValueError(f"expected (n, {self.window}) feature matrix, got {X.shape}")
        out = np.empty(len(X), dtype=np.int32)
        stack = [(0, np.arange(len(X)))]
        while stack:
            node, idx = stack.pop()
            if len(idx) == 0:
                continue
            f = self.feature[node]
            if f < 0:
                out[idx] = self.leaf_code[node]
                continue
            go_left = X[idx, f] <= self.threshold[node]
            stack.append((self.right[node], idx[~go_left]))
            stack.append((self.left[node], idx[go_left]))
        return out

    def predict_batch(self, X: np.ndarray) -> np.ndarray:
        codes = self.predict_codes(X)
        classes = np.array(self.classes, dtype=object)
        return classes[codes]

    def to_dict(self) -> dict:
        nodes = []
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                nodes.append(
                    {
                        "feature": int(self.feature[i]),
                        "threshold": float(self.threshold[i]),
                        "left": int(self.left[i]),
                        "right": int(self.right[i]),
                        "counts": [int(c) for c in self.counts[i]],
                    }
                )
            else:
                nodes.append(
                    {
                        "leaf": self.classes[self.leaf_code[i]],
                        "counts": [int(c) for c in self.counts[i]],
                    }
                )
        return {"window": self.window, "classes": list(self.classes), "nodes": nodes}

    @classmethod
    def from_dict(cls, payload: dict) -> "DecisionTree":
        classes = tuple(payload["classes"])
        raw = payload["nodes"]
        n = len(raw)
        feature = np.full(n, -1, dtype=np.int32)
        threshold = np.zeros(n, dtype=np.float64)
        left = np.full(n, -1, dtype=np.int32)
        right = np.full(n, -1, dtype=np.int32)
        leaf_code = np.full(n, -1, dtype=np.int32)
        counts = np.zeros((n, len(classes)), dtype=np.int64)
        class_index = {c: i for i, c in enumerate(classes)}
        for i, node in enumerate(raw):
            counts[i] = node["counts"]
            if "feature" in node:
                feature[i] = node["feature"]
                threshold[i] = node["threshold"]
                left[i] = node["left"]
                right[i] = node["right"]
            else:
                leaf_code[i] = class_index[node["leaf"]]
        return cls(payload["window"], classes, feature, threshold, left, right, leaf_code, counts)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "DecisionTree":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _gini(counts: np.ndarray, n: float) -> float:
    return 1.0 - float((counts * counts).sum()) / (n * n)


def _best_split(X: np.ndarray, y: np.ndarray, n_classes: int, parent_gini: float, feat_order):
    """Best (gain, feature, threshold) over midpoints of distinct sorted values."""
    n = len(y)
    onehot = np.zeros((n, n_classes), dtype=np.float64)
    onehot[np.arange(n), y] = 1.0
    best_gain = -np.inf
    best = None
    for f in feat_order:
        col = X[:, f]
        order = np.argsort(col, kind="stable")
        vals = col[order]
        cuts = np.nonzero(vals[:-1] != vals[1:])[0]
        if len(cuts) == 0:
            continue
        cum = np.cumsum(onehot[order], axis=0)
        left = cum[cuts]
        total = cum[-1]
        right = total - left
        n_left = (cuts + 1).astype(np.float64)
        n_right = n - n_left
        gini_left = 1.0 - (left * left).sum(axis=1) / (n_left * n_left)
        gini_right = 1.0 - (right * right).sum(axis=1) / (n_right * n_right)
        gains = parent_gini - (n_left * gini_left + n_right * gini_right) / n
        b = int(np.argmax(gains))
        if gains[b] > best_gain:
            best_gain = float(gains[b])
            best = (best_gain, int(f), float((vals[cuts[b]] + vals[cuts[b] + 1]) / 2.0))
    return best


def fit(instances, params: TreeParams) -> DecisionTree:
    """Grow a CART tree on labeled gap windows.

    Deterministic: nodes are expanded depth-first (left first) and feature
    ties are broken by a per-node feature ordering drawn from params.seed.
    Splitting stops on max depth, min_samples_split, node purity, or an
    impurity decrease below min_impurity_decrease.
    """
    if isinstance(instances, FeatureTable):
        table = instances
        if table.labels is None:
            raise ValueError("feature table carries no labels; extract with a sidecar")
        X, labels = table.X, table.labels
        window = table.window
    else:
        items = list(instances)
        if not items:
            raise ValueError("cannot fit a tree on an empty instance set")
        if any(inst.label is None for inst in items):
            raise ValueError("all training instances must be labeled")
        X = np.vstack([inst.gaps for inst in items]).astype(np.float64)
        labels = np.array([inst.label for inst in items], dtype=object)
        window = X.shape[1]
    if len(X) == 0:
        raise ValueError("cannot fit a tree on an empty instance set")

    classes = tuple(sorted(set(labels)))
    class_index = {c: i for i, c in enumerate(classes)}
    y = np.fromiter((class_index[l] for l in labels), dtype=np.int32, count=len(labels))
    n_classes = len(classes)
    rng = np.random.default_rng(params.seed & _MASK64)

    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    leaf_code: list[int] = []
    counts_rows: list[np.ndarray] = []

    def new_node(counts: np.ndarray) -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        leaf_code.append(int(np.argmax(counts)))
        counts_rows.append(counts)
        return len(feature) - 1

    n_total = float(len(y))
    # (indices, depth, parent, is_left) stack; children pushed right-first so
    # the left subtree is expanded first.
    stack: list[tuple[np.ndarray, int, int, bool]] = [(np.arange(len(y)), 0, -1, False)]
    while stack:
        idx, depth, parent, is_left = stack.pop()
        yn = y[idx]
        counts = np.bincount(yn, minlength=n_classes).astype(np.int64)
        node = new_node(counts)
        if parent >= 0:
            (left if is_left else right)[parent] = node
        n = len(idx)
        node_gini = _gini(counts.astype(np.float64), float(n))
        if depth >= params.max_depth or n < params.min_samples_split or node_gini == 0.0:
            continue
        best = _best_split(X[idx], yn, n_classes, node_gini, rng.permutation(X.shape[1]))
        # decrease is weighted by the node's share of the training set, so the
        # threshold prunes marginal deep splits harder than strong early ones
        if best is None or (n / n_total) * best[0] < params.min_impurity_decrease:
            continue
        _, f, thr = best
        feature[node] = f
        threshold[node] = thr
        go_left = X[idx, f] <= thr
        stack.append((idx[~go_left], depth + 1, node, False))
        stack.append((idx[go_left], depth + 1, node, True))

    return DecisionTree(
        window,
        classes,
        np.array(feature, dtype=np.int32),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int32),
        np.array(right, dtype=np.int32),
        np.array(leaf_code, dtype=np.int32),
        np.vstack(counts_rows),
    )


def predict(tree: DecisionTree, instance: FeatureInstance | np.ndarray) -> str:
    """Route one gap window to a leaf and return its label."""
    gaps = instance.gaps if isinstance(instance, FeatureInstance) else np.asarray(instance)
    gaps = np.asarray(gaps, dtype=np.float64).ravel()
    if len(gaps) != tree.window:
        raise ValueError(f"instance has {len(gaps)} gaps, tree expects {tree.window}")
    node = 0
    while tree.feature[node] >= 0:
        node = tree.left[node] if gaps[tree.feature[node]] <= tree.threshold[node] else tree.right[node]
    return tree.classes[tree.leaf_code[node]]


def stratified_fold_ids(y: np.ndarray, n_folds: int, rng: np.random.Generator) -> np.ndarray:
    """Fold assignment, stratified per label; per-stratum sizes differ by <= 1."""
    y = np.asarray(y)
    fold = np.empty(len(y), dtype=np.int32)
    for offset, label in enumerate(sorted(set(y.tolist()))):
        idx = np.nonzero(y == label)[0]
        perm = rng.permutation(idx)
        fold[perm] = (np.arange(len(idx)) + offset) % n_folds
    return fold


@dataclass
class AttackReport:
    """Evaluation of one attack over the genuine transactions of a ledger set."""

    accuracy: float
    labels: tuple[str, ...]
    confusion: np.ndarray
    per_device_accuracy: dict[str, float]
    device_level_accuracy: float
    n_instances: int
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "labels": list(self.labels),
            "confusion": self.confusion.tolist(),
            "per_device_accuracy": dict(self.per_device_accuracy),
            "device_level_accuracy": self.device_level_accuracy,
            "n_instances": self.n_instances,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "AttackReport":
        return cls(
            accuracy=float(payload["accuracy"]),
            labels=tuple(payload["labels"]),
            confusion=np.asarray(payload["confusion"], dtype=np.int64),
            per_device_accuracy={k: float(v) for k, v in payload["per_device_accuracy"].items()},
            device_level_accuracy=float(payload["device_level_accuracy"]),
            n_instances=int(payload["n_instances"]),
            meta=dict(payload.get("meta") or {}),
        )


def _build_report(y_true: np.ndarray, y_pred: np.ndarray, meta: dict) -> AttackReport:
    labels = tuple(sorted(set(y_true.tolist()) | set(y_pred.tolist())))
    index = {l: i for i, l in enumerate(labels)}
    confusion = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        confusion[index[t], index[p]] += 1
    total = int(confusion.sum())
    accuracy = float(np.trace(confusion)) / total if total else 0.0
    per_device = {}
    votes_correct = 0
    true_devices = sorted(set(y_true.tolist()))
    for dev in true_devices:
        mask = y_true == dev
        row_total = int(np.count_nonzero(mask))
        per_device[dev] = float(np.count_nonzero(y_pred[mask] == dev)) / row_total
        tally = Counter(y_pred[mask].tolist())
        majority = sorted(tally.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
        votes_correct += majority == dev
    device_level = votes_correct / len(true_devices) if true_devices else 0.0
    return AttackReport(
        accuracy=accuracy,
        labels=labels,
        confusion=confusion,
        per_device_accuracy=per_device,
        device_level_accuracy=device_level,
        n_instances=total,
        meta=meta,
    )


def informed_attack_on_table(
    table: FeatureTable,
    params: TreeParams = TreeParams(),
    folds: int = 10,
    max_instances_per_class: int = 0,
) -> AttackReport:
    """Cross-validated attack on an already-extracted labeled feature table."""
    if table.labels is None:
        raise ValueError("feature table carries no labels; extract with a sidecar")
    if len(table) < folds:
        raise ValueError(f"{len(table)} instances cannot fill {folds} folds")
    rng = np.random.default_rng(params.seed & _MASK64)
    if max_instances_per_class:
        table = table.subsample_per_class(max_instances_per_class, rng)
    classes = sorted(set(table.labels))
    class_index = {c: i for i, c in enumerate(classes)}
    y = np.fromiter((class_index[l] for l in table.labels), dtype=np.int32, count=len(table))
    fold_ids = stratified_fold_ids(y, folds, rng)
    y_pred = np.empty(len(table), dtype=object)
    for f in range(folds):
        test = fold_ids == f
        tree = fit(table.select(np.nonzero(~test)[0]), params)
        if np.any(test):
            y_pred[test] = tree.predict_batch(table.X[test])
    genuine = table.genuine
    meta = {
        "mode": "informed",
        "window": table.window,
        "tree": params.to_dict(),
        "folds": folds,
        "max_instances_per_class": max_instances_per_class,
        "n_spoofed_excluded": int(np.count_nonzero(~genuine)),
    }
    return _build_report(table.labels[genuine], y_pred[genuine], meta)


def informed_attack(
    ledger_set: LedgerSet,
    window: int = DEFAULT_WINDOW,
    params: TreeParams = TreeParams(),
    folds: int = 10,
    max_instances_per_class: int = 0,
) -> AttackReport:
    """Worst-case attacker: knows every device type, scored by k-fold CV.

    Instances are extracted from the set's public view, folds are stratified
    by label, and out-of-fold predictions are pooled into one report.
    Spoof-anchored instances train the attacker but are excluded from the
    accuracy denominator.  ``max_instances_per_class`` (0 = unlimited)
    subsamples each label before folding, which bounds fit cost and weights
    devices evenly regardless of their emission rate.
    """
    table = extract_features(ledger_set.public(), window, ledger_set.sidecar())
    return informed_attack_on_table(table, params, folds, max_instances_per_class)


def blind_attack_on_tables(
    train_table: FeatureTable,
    test_table: FeatureTable,
    params: TreeParams = TreeParams(),
    max_instances_per_class: int = 0,
) -> AttackReport:
    """Train on one labeled feature table, score on another."""
    if len(train_table) == 0 or len(test_table) == 0:
        raise ValueError("both ledger sets must yield at least one instance")
    rng = np.random.default_rng(params.seed & _MASK64)
    if max_instances_per_class:
        train_table = train_table.subsample_per_class(max_instances_per_class, rng)
        test_table = test_table.subsample_per_class(max_instances_per_class, rng)
    tree = fit(train_table, params)
    y_pred = tree.predict_batch(test_table.X)
    genuine = test_table.genuine
    meta = {
        "mode": "blind",
        "window": train_table.window,
        "tree": params.to_dict(),
        "max_instances_per_class": max_instances_per_class,
        "train_devices": sorted(set(train_table.labels)),
        "n_spoofed_excluded": int(np.count_nonzero(~genuine)),
    }
    return _build_report(test_table.labels[genuine], y_pred[genuine], meta)


def blind_attack(
    train_set: LedgerSet,
    test_set: LedgerSet,
    window: int = DEFAULT_WINDOW,
    params: TreeParams = TreeParams(),
    max_instances_per_class: int = 0,
) -> AttackReport:
    """Attacker trained on its own (possibly smaller) device population.

    Trains on every labeled instance of ``train_set`` and is scored on the
    genuine instances of ``test_set``.  Test devices absent from training
    can never be named, so they count as misclassified.
    """
    train_table = extract_features(train_set.public(), window, train_set.sidecar())
    test_table = extract_features(test_set.public(), window, test_set.sidecar())
    return blind_attack_on_tables(train_table, test_table, params, max_instances_per_class)
