"""Invariant-subset transfer learning for linear models."""

from .core import (
    LinearPredictor,
    MultiTaskDataset,
    SplitConfig,
    SubsetMask,
    TaskSample,
    split_train_validation,
    validate_dataset,
)
from .invariance import KernelConfig, TestOutcome, hsic_d_sample_test, hsic_statistic, levene_test
from .mtl import CovarianceModel, EmOptions, analytic_beta_opt, em_fit, naive_plugin_fit
from .regression import empirical_mse, fit_domain_only, fit_pooled_ols, lasso_screen, residuals
from .search import SearchConfig, SearchResult, full_subset_search, greedy_subset_search

__version__ = "0.1.0"
