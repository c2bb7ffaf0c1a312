"""J-class LogitBoost with randomised regression trees as the base learner.

Each stage fits one weighted least-squares tree per class to the Newton
working response, then applies the symmetric J-class correction

    f_j <- (J - 1) / J * (f_j - mean_k f_k)

before adding to the class scores ``F``. Probabilities are ``softmax(F)``.
"""
from __future__ import annotations

from collections.abc import Callable

import numpy as np

from .trees import Tree, grow_regression_tree

MIN_WEIGHT = 1e-6
MAX_RESPONSE = 4.0


def softmax(F: np.ndarray) -> np.ndarray:
    F = F - F.max(axis=1, keepdims=True)
    e = np.exp(F)
    return e / e.sum(axis=1, keepdims=True)


def working_response(y_onehot: np.ndarray, p: np.ndarray):
    """Clipped Newton step target ``z`` and weights ``w`` for every class."""
    w = np.maximum(p * (1.0 - p), MIN_WEIGHT)
    z = np.clip((y_onehot - p) / w, -MAX_RESPONSE, MAX_RESPONSE)
    return z, w


def _stage_update(raw: np.ndarray, shrinkage: float) -> np.ndarray:
    J = raw.shape[1]
    return shrinkage * (J - 1) / J * (raw - raw.mean(axis=1, keepdims=True))


def fit_logitboost(
    X: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    n_stages: int = 100,
    shrinkage: float = 1.0,
    max_depth: int = 3,
    features_per_split="sqrt",
    min_leaf: int = 1,
    seed: int = 0,
    on_stage: Callable[[int, np.ndarray], None] | None = None,
) -> list[list[Tree]]:
    """Returns ``stages[m][j]``, the tree fitted for class ``j`` at stage ``m``.

    ``on_stage(m, p)`` sees the class probabilities after each stage.
    """
    n = len(y)
    Y = np.eye(n_classes)[y]
    F = np.zeros((n, n_classes))
    p = np.full((n, n_classes), 1.0 / n_classes)
    stages = []
    for m in range(n_stages):
        z, w = working_response(Y, p)
        raw = np.empty((n, n_classes))
        trees = []
        for j in range(n_classes):
            rng = np.random.default_rng([seed, m, j])
            tree = grow_regression_tree(
                X, z[:, j], w[:, j], rng,
                max_depth=max_depth, min_leaf=min_leaf, max_features=features_per_split,
            )
            trees.append(tree)
            raw[:, j] = tree.predict(X)[:, 0]
        F += _stage_update(raw, shrinkage)
        p = softmax(F)
        stages.append(trees)
        if on_stage is not None:
            on_stage(m, p)
    return stages


def logitboost_scores(stages: list[list[Tree]], X: np.ndarray, shrinkage: float) -> np.ndarray:
    n_classes = len(stages[0]) if stages else 1
    F = np.zeros((len(X), n_classes))
    for trees in stages:
        raw = np.column_stack([t.predict(X)[:, 0] for t in trees])
        F += _stage_update(raw, shrinkage)
    return F


def logitboost_proba(stages, X, shrinkage: float) -> np.ndarray:
    return softmax(logitboost_scores(stages, X, shrinkage))
