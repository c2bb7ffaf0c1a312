"""Classifier suite: random forest, LogitBoost over randomised trees,
DTW k-NN, Bag-of-Patterns and a shapelet tree."""
from .bop import bop_transform
from .dtw import dtw_distance
from .model import (
    FAMILIES,
    BopParams,
    DtwKnnParams,
    LogitBoostParams,
    PredictionResult,
    RandomForestParams,
    ShapeletParams,
    TrainedModel,
    family_name,
    predict,
    predict_many,
    train,
    train_bop,
    train_dtw_knn,
    train_logit_boost,
    train_random_forest,
    train_shapelet,
)
from .shapelet import entropy
from .trees import gini

__all__ = [
    "FAMILIES", "BopParams", "DtwKnnParams", "LogitBoostParams", "PredictionResult",
    "RandomForestParams", "ShapeletParams", "TrainedModel", "bop_transform",
    "dtw_distance", "entropy", "family_name", "gini", "predict", "predict_many",
    "train", "train_bop", "train_dtw_knn", "train_logit_boost",
    "train_random_forest", "train_shapelet",
]
