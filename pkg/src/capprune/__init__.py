"""Contrastive pruning for small transformer encoders."""

from .bank import RepresentationBank, encode_bank, fetch, footprint
from .config import RunConfig, load_config, parse_config
from .contrastive import ContrastiveConfig, build_positive_set, info_nce, module_loss
from .errors import ConfigError, InputError, InvariantViolation, NumericalDegeneracyError, RunError, StateError
from .evalprobe import evaluate, measured_sparsity, probe_transfer, report, run_ablation
from .model import EncoderClassifier, ModelConfig
from .orchestrator import run_cap, total_loss
from .pruners import movement_update, structured_prune_step, topk_mask
from .schedule import cubic_sparsity, milestone_schedule

__version__ = "0.1.0"
