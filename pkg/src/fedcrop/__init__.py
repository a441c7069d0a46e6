"""Deterministic federated-learning simulator with backdoor attacks and defenses."""

from .aggregation import ClientUpdate, fedavg, gancrop_merge, krum, trimmed_mean, fang_lfr
from .data import ImageSet, PoisonSpec, TriggerPattern, dirichlet_partition, inject_trigger, poison_dataset
from .models import ModelSpec, ParameterVector, TrainConfig, local_train, evaluate, backdoor_accuracy
from .orchestrator import ExperimentConfig, RoundReport, desk_profile, paper_profile, run_experiment, run_round
from .metrics import SummaryReport, compare_methods, defense_success_rounds, emit_plots

__version__ = "0.1.0"
