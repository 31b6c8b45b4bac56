"""Differentially private training of small networks by cyclical weight transfer."""

from .dp_optimizer import DpSgdConfig, NoiseSource, clip_gradient, noisy_step, plain_step, sample_batch
from .federation import RunRecord, Site, TrainingPlan, central_train, cyclical_train, train_site_epoch
from .nn_core import ArchitectureSpec, Batch, ModelParams, forward, init_params, per_example_gradients
from .rdp_accountant import PrivacyBudget, RdpLedger, compute_epsilon, step_rdp, to_epsilon

__version__ = "0.1.0"
