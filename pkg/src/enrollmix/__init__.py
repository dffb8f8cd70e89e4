"""Gaussian latent-variable models of multi-label course-enrollment sequences.

Modules
-------
data_model     transcript ingestion, cohorts, splitting, summaries
gaussian_core  multivariate-normal utilities and orthant probabilities
cmm            the contextual mixture model: EM, inference, sampling, refinement
baselines      naive Bayes and tree-augmented naive Bayes mixtures
evaluation     mean-field error, inference accuracy, novelty, latent states
modelfile      JSON persistence of fitted models
scenarios      shipped synthetic scenarios
cli            command-line entry point
"""

from .errors import DataError, ModelFileError, NumericalError, ParseError

__version__ = "0.1.0"

__all__ = ["DataError", "ModelFileError", "NumericalError", "ParseError", "__version__"]
