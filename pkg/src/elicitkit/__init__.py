"""Prior elicitation from language models, with the tools to check the priors."""
from .bayes import LinearModelSpec, PosteriorSampleSet, log_posterior, posterior_predictive, sample_posterior
from .config import ExperimentConfig, load_config
from .datasets import Dataset, Fold, generate_synthetic, load_csv, make_folds, normalize, subsample_train
from .diagnostics import BayesFactorReport, bayes_factor, compare_elicited_vs_extracted, energy
from .elicitation import ElicitedPriorTable, MixturePrior, build_mixture, elicit_table
from .gateway import ChatRequest, Gateway, ProviderConfig
from .memorisation import header_test, levenshtein, normalized_levenshtein, row_test
from .probe import GaussianKDE, ProbeDesign, extract_distribution, fit_mle, kde_fit

__version__ = "0.1.0"

__all__ = [
    "BayesFactorReport", "ChatRequest", "Dataset", "ElicitedPriorTable", "ExperimentConfig", "Fold",
    "Gateway", "GaussianKDE", "LinearModelSpec", "MixturePrior", "PosteriorSampleSet", "ProbeDesign",
    "ProviderConfig", "bayes_factor", "build_mixture", "compare_elicited_vs_extracted", "elicit_table",
    "energy", "extract_distribution", "fit_mle", "generate_synthetic", "header_test", "kde_fit",
    "levenshtein", "load_config", "load_csv", "log_posterior", "make_folds", "normalize",
    "normalized_levenshtein", "posterior_predictive", "row_test", "sample_posterior", "subsample_train",
]
