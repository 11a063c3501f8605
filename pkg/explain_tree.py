"""
explain_tree.py — decision trees that explain a clustering from one-hot features.

Greedy CART on binary features (the only threshold is 0.5) with weighted Gini,
node counting, weighted precision/recall/F1, and DOT / JSON export.

Two modes:
  multiclass  one tree classifying each demographic into its cluster id
  binary      one tree per cluster, members positive and everyone else negative
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import graphviz
import numpy as np
from sklearn.metrics import accuracy_score, precision_recall_fscore_support

from common import TreeError, log, warn, write_json

THRESHOLD      = 0.5
MODES          = ("multiclass", "binary")
LOW_PRECISION  = 0.5
DEFAULT_DEPTH  = 6       # per-cluster trees
LEAF_COLORS    = ("#8dd3c7", "#ffffb3", "#bebada", "#fb8072", "#80b1d3",
                  "#fdb462", "#b3de69", "#fccde5", "#d9d9d9", "#bc80bd",
                  "#ccebc5", "#ffed6f")


# ─────────────────────────────────────────────
#  Types
# ─────────────────────────────────────────────
@dataclass
class TreeNode:
    id: int
    depth: int
    class_weights: np.ndarray           # summed row weights per class routed here
    n_samples: int
    feature: int = -1                   # -1 for a leaf
    left: int = -1                      # x_f <= 0.5
    right: int = -1                     # x_f > 0.5

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0

    @property
    def prediction(self) -> int:
        """Index into ExplainTree.classes (heaviest class, ties → lowest index)."""
        return int(np.argmax(self.class_weights))


@dataclass
class TreeMetrics:
    classes: list
    precision: list
    recall: list
    f1: list
    support: list                       # summed weight of true members per class
    weighted_f1: float
    accuracy: float
    flags: list = field(default_factory=list)

    def for_class(self, label) -> dict:
        i = self.classes.index(label)
        return {"precision": self.precision[i], "recall": self.recall[i], "f1": self.f1[i]}

    def to_dict(self) -> dict:
        return {
            "classes": [int(c) for c in self.classes],
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "support": self.support, "weighted_f1": self.weighted_f1,
            "accuracy": self.accuracy, "flags": list(self.flags),
        }


@dataclass
class ExplainTree:
    nodes: list
    classes: np.ndarray
    mode: str = "multiclass"
    metrics: TreeMetrics = None
    flagged: bool = False               # some leaf holds rows no split could separate
    target: int = -1                    # binary mode: the explained cluster

    @property
    def root(self) -> TreeNode:
        return self.nodes[0]

    @property
    def node_count(self) -> int:
        return count_nodes(self)

    @property
    def depth(self) -> int:
        return max(n.depth for n in self._reachable())

    def _reachable(self):
        stack, seen = [0], []
        while stack:
            node = self.nodes[stack.pop()]
            seen.append(node)
            if not node.is_leaf:
                stack.extend((node.right, node.left))
        return seen

    def leaves(self) -> list:
        return [n for n in self._reachable() if n.is_leaf]

    def predict(self, features) -> np.ndarray:
        x = np.asarray(features)
        out = np.empty(x.shape[0], dtype=self.classes.dtype)
        for r in range(x.shape[0]):
            node = self.root
            while not node.is_leaf:
                node = self.nodes[node.right if x[r, node.feature] > THRESHOLD else node.left]
            out[r] = self.classes[node.prediction]
        return out


# ─────────────────────────────────────────────
#  Training
# ─────────────────────────────────────────────
def _gini(class_weights, totals):
    with np.errstate(invalid="ignore", divide="ignore"):
        p = class_weights / totals[..., None]
    return np.where(totals > 0, 1.0 - np.nansum(p ** 2, axis=-1), 0.0)


def split_gains(x, y_onehot, w):
    """Weighted Gini decrease for splitting on every feature; -inf where a side would be empty."""
    wy = y_onehot * w[:, None]
    parent = wy.sum(axis=0)
    right = x.T.astype(float) @ wy                    # F × C
    left = parent[None, :] - right
    rw, lw = right.sum(axis=1), left.sum(axis=1)
    total = parent.sum()
    gain = total * _gini(parent[None, :], np.array([total]))[0] - rw * _gini(right, rw) - lw * _gini(left, lw)
    n_right = x.sum(axis=0)
    gain[(n_right == 0) | (n_right == x.shape[0])] = -np.inf
    return gain


def train_tree(features, labels, weights, max_depth=None, mode: str = "multiclass") -> ExplainTree:
    """
    Greedy CART. A node becomes a leaf when it is pure, when max_depth is
    reached, or when no feature separates its rows; otherwise it splits on
    the feature with the largest weighted Gini decrease (ties → lowest index).
    """
    x = np.asarray(features)
    y = np.asarray(labels)
    w = np.asarray(weights, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise TreeError("train_tree needs a non-empty 2-D feature matrix")
    if y.shape[0] != x.shape[0] or w.shape[0] != x.shape[0]:
        raise TreeError(f"row counts differ: features {x.shape[0]}, labels {y.shape[0]}, weights {w.shape[0]}")
    if (w <= 0).any():
        raise TreeError("all weights must be > 0")
    if mode not in MODES:
        raise TreeError(f"unknown tree mode {mode!r}")
    if max_depth is not None and max_depth < 0:
        raise TreeError(f"max_depth must be >= 0, got {max_depth}")

    x = (x > THRESHOLD).astype(np.uint8)
    classes, y_idx = np.unique(y, return_inverse=True)
    onehot = np.eye(classes.size)[y_idx]

    nodes, flagged = [], False
    # preorder construction: (rows, depth, parent id, side)
    stack = [(np.arange(x.shape[0]), 0, -1, "")]
    while stack:
        rows, depth, parent, side = stack.pop()
        node = TreeNode(len(nodes), depth, (onehot[rows] * w[rows, None]).sum(axis=0), int(rows.size))
        nodes.append(node)
        if parent >= 0:
            setattr(nodes[parent], side, node.id)

        if np.count_nonzero(node.class_weights) <= 1:
            continue
        if max_depth is not None and depth >= max_depth:
            continue
        # rounded so float noise cannot break the lowest-index tie rule
        gains = np.round(split_gains(x[rows], onehot[rows], w[rows]), 12)
        f = int(np.argmax(gains))
        if not np.isfinite(gains[f]):
            flagged = True
            continue
        node.feature = f
        go_right = x[rows, f] == 1
        # push right first so the left subtree gets the lower ids
        stack.append((rows[go_right], depth + 1, node.id, "right"))
        stack.append((rows[~go_right], depth + 1, node.id, "left"))

    if flagged:
        warn("tree: identical feature rows carry different labels; majority leaf kept")
    return ExplainTree(nodes, classes, mode, flagged=flagged)


class TreeTrainer(ABC):
    """Pluggable tree constructor: anything that turns (X, y, w) into an ExplainTree."""

    @abstractmethod
    def train(self, features, labels, weights, mode: str = "multiclass") -> ExplainTree:
        ...


class CartTrainer(TreeTrainer):
    def __init__(self, max_depth=None):
        self.max_depth = max_depth

    def train(self, features, labels, weights, mode: str = "multiclass") -> ExplainTree:
        tree = train_tree(features, labels, weights, self.max_depth, mode)
        tree.metrics = evaluate(tree, features, labels, weights)
        return tree


def count_nodes(tree: ExplainTree) -> int:
    return len(tree._reachable())


# ─────────────────────────────────────────────
#  Metrics
# ─────────────────────────────────────────────
def evaluate(tree: ExplainTree, features, labels, weights) -> TreeMetrics:
    """Weighted precision/recall/F1 on the training rows themselves."""
    y = np.asarray(labels)
    w = np.asarray(weights, dtype=float)
    pred = tree.predict(features)
    classes = sorted(set(y.tolist()) | set(tree.classes.tolist()))

    precision, recall, f1, support = precision_recall_fscore_support(
        y, pred, labels=classes, sample_weight=w, zero_division=0)
    weighted = float(np.average(f1, weights=support)) if support.sum() > 0 else 0.0
    accuracy = float(accuracy_score(y, pred, sample_weight=w)) if w.sum() > 0 else 0.0
    metrics = TreeMetrics(classes, [float(p) for p in precision], [float(r) for r in recall],
                          [float(f) for f in f1], [float(s) for s in support], weighted, accuracy)
    if tree.flagged:
        metrics.flags.append("unsplittable")
    if tree.mode == "binary" and 1 in classes and metrics.for_class(1)["precision"] < LOW_PRECISION:
        metrics.flags.append("low_precision")
    return metrics


def multiclass_tree(dataset, clustering, trainer: TreeTrainer = None) -> ExplainTree:
    trainer = trainer or CartTrainer()
    return trainer.train(dataset.features, clustering.assignment, dataset.weights, "multiclass")


def per_cluster_trees(dataset, clustering, max_depth=DEFAULT_DEPTH, trainer: TreeTrainer = None,
                      verbose: bool = True) -> list:
    """One binary tree per cluster: members vs everyone else."""
    trainer = trainer or CartTrainer(max_depth)
    x, w = dataset.features, dataset.weights
    trees = []
    for c in range(clustering.k):
        y = (clustering.assignment == c).astype(int)
        tree = trainer.train(x, y, w, "binary")
        tree.target = c
        trees.append(tree)
        if verbose and tree.metrics.flags:
            log("TREE", f"cluster {c}: {', '.join(tree.metrics.flags)}")
    return trees


def weighted_average_f1(trees, clustering, weights) -> float:
    """Positive-class F1 of each per-cluster tree, weighted by the cluster's summed weight."""
    w = np.asarray(weights, dtype=float)
    num = den = 0.0
    for tree in trees:
        cw = float(w[clustering.assignment == tree.target].sum())
        f1 = tree.metrics.for_class(1)["f1"] if 1 in tree.metrics.classes else 0.0
        num += cw * f1
        den += cw
    return num / den if den > 0 else 0.0


# ─────────────────────────────────────────────
#  Export
# ─────────────────────────────────────────────
def export_dot(tree: ExplainTree, feature_names=None, class_names=None) -> str:
    """Graphviz DOT source; nodes in preorder, leaves filled by majority class."""
    def fname(f):
        return feature_names[f] if feature_names is not None else f"x[{f}]"

    def cname(i):
        c = tree.classes[i]
        if class_names is not None:
            return str(class_names[int(c)])
        return f"cluster {c}" if tree.mode == "multiclass" else ("in" if c == 1 else "out")

    dot = graphviz.Digraph("explain_tree", comment=f"{tree.mode} tree")
    dot.attr("node", shape="box", style="rounded,filled", fontname="helvetica")
    for node in sorted(tree._reachable(), key=lambda nd: nd.id):
        weights = ", ".join(f"{v:.4g}" for v in node.class_weights)
        if node.is_leaf:
            label = f"{cname(node.prediction)}\\nsamples = {node.n_samples}\\nweights = [{weights}]"
            color = LEAF_COLORS[node.prediction % len(LEAF_COLORS)]
        else:
            label = f"{fname(node.feature)} <= {THRESHOLD}\\nsamples = {node.n_samples}\\nweights = [{weights}]"
            color = "#ffffff"
        dot.node(str(node.id), label, fillcolor=color)
    for node in sorted(tree._reachable(), key=lambda nd: nd.id):
        if not node.is_leaf:
            dot.edge(str(node.id), str(node.left), label="True")
            dot.edge(str(node.id), str(node.right), label="False")
    return dot.source


def tree_to_dict(tree: ExplainTree) -> dict:
    return {
        "mode": tree.mode,
        "target": tree.target,
        "classes": [int(c) for c in tree.classes],
        "flagged": tree.flagged,
        "node_count": tree.node_count,
        "depth": tree.depth,
        "nodes": [
            {"id": n.id, "depth": n.depth, "feature": n.feature, "threshold": THRESHOLD,
             "left": n.left, "right": n.right, "n_samples": n.n_samples,
             "class_weights": [float(v) for v in n.class_weights]}
            for n in tree.nodes
        ],
        "metrics": tree.metrics.to_dict() if tree.metrics else None,
    }


def tree_from_dict(data: dict) -> ExplainTree:
    try:
        nodes = [TreeNode(int(n["id"]), int(n["depth"]), np.array(n["class_weights"], dtype=float),
                          int(n["n_samples"]), int(n["feature"]), int(n["left"]), int(n["right"]))
                 for n in data["nodes"]]
        tree = ExplainTree(nodes, np.array(data["classes"]), data.get("mode", "multiclass"),
                           flagged=bool(data.get("flagged", False)), target=int(data.get("target", -1)))
    except (KeyError, TypeError, ValueError) as e:
        raise TreeError(f"malformed tree dump: {e}") from e
    m = data.get("metrics")
    if m:
        tree.metrics = TreeMetrics(m["classes"], m["precision"], m["recall"], m["f1"], m["support"],
                                   m["weighted_f1"], m["accuracy"], list(m.get("flags", [])))
    return tree


def write_tree_json(path, tree: ExplainTree):
    return write_json(path, tree_to_dict(tree))
