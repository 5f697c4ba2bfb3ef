"""Adversarial weight perturbation lab: a numpy autodiff core, PGD attacks,
AWP/RWP training and weight loss landscape tools at desk scale."""

from .attacks import ThreatModel, fgsm, pgd, project_ball
from .awp import PerturbationState, compute_awp, project_gamma, random_weight_perturbation
from .data import Dataset, batches, load_idx, synth_blobs
from .errors import AWPLabError, ConfigError, FormatError, LabelError, NonFiniteError, ShapeError
from .landscape import flatness, pac_bayes_flatness, profile_1d, profile_2d, sample_direction
from .losses import LossSpec
from .network import Network, build_model, preset, rescale_pair
from .trainer import AWPConfig, ScheduleSpec, TrainConfig, evaluate, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
