"""Bagged Gini trees with per-split feature subsampling."""
from __future__ import annotations

import numpy as np

from .trees import Tree, grow_classification_tree


def fit_forest(
    X: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    n_trees: int = 100,
    max_depth: int | None = None,
    min_leaf: int = 1,
    features_per_split="sqrt",
    seed: int = 0,
) -> list[Tree]:
    trees = []
    n = len(y)
    for t in range(n_trees):
        rng = np.random.default_rng([seed, t])
        boot = rng.integers(0, n, n)
        trees.append(
            grow_classification_tree(
                X[boot], y[boot], n_classes, rng,
                max_depth=max_depth, min_leaf=min_leaf, max_features=features_per_split,
            )
        )
    return trees


def forest_votes(trees: list[Tree], X: np.ndarray, n_classes: int) -> np.ndarray:
    """Per-row vote counts; every row's votes sum to ``len(trees)``."""
    votes = np.zeros((len(X), n_classes), dtype=np.int64)
    rows = np.arange(len(X))
    for tree in trees:
        # argmax keeps the lowest class on ties
        winner = np.argmax(tree.predict(X), axis=1)
        np.add.at(votes, (rows, winner), 1)
    return votes
