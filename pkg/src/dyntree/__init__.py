"""Dynamic regression and classification trees fit by particle learning."""

from .data import DataError, DataStore, load_csv, one_hot_encode, read_table, save_csv
from .kernels import BACKEND
from .leaves import ConstantLeaf, LinearLeaf, MultinomialLeaf, StudentT, make_model
from .particles import Cloud, FilterFailure, PredictiveSummary, bayes_factor, posterior_probability
from .tree import TreePrior

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Cloud",
    "ConstantLeaf",
    "DataError",
    "DataStore",
    "FilterFailure",
    "LinearLeaf",
    "MultinomialLeaf",
    "PredictiveSummary",
    "StudentT",
    "TreePrior",
    "bayes_factor",
    "load_csv",
    "make_model",
    "one_hot_encode",
    "posterior_probability",
    "read_table",
    "save_csv",
]
