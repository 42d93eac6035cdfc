"""Condition-smooth GPFA for multi-condition spike counts."""
from .data import GenerativeSpec, GroundTruth, SpikeTensor, generate_synthetic, load_dataset, write_dataset
from .errors import DataFormatError, NumericalError
from .evaluation import loglik_per_bin, rate_mae, split_trials, true_loglik_per_bin
from .inference import FitReport, fit, monitor, retained_dims
from .predict import PredictionRequest, predict_rates, predict_weights
from .state import ModelConfig, VariationalState, f_moments, initialize_state

__version__ = "0.1.0"
