"""Parametric distributionally robust optimization (P-DRO) and baselines on synthetic tasks."""

from .adversaries import BigramAdversary, GaussianAdversary, gaussian_kl, mle_fit, project_onto_kl_ball
from .baselines import nonparam_inner, train_erm, train_groupdro, train_nonparam
from .config import TrainConfig
from .data import Dataset, Example, gen_biased_sequences, gen_toy_gaussian, merge_small_groups
from .evaluation import evaluate
from .harness import ExperimentConfig, report, run_experiment
from .history import CheckpointRecord, RunHistory, load_run, save_run
from .pdro import RunningNormalizer, train_pdro
from .selection import greedy_minmax_select, hyperparam_select, minmax_select, select

__all__ = [
    "BigramAdversary", "CheckpointRecord", "Dataset", "Example", "ExperimentConfig", "GaussianAdversary",
    "RunHistory", "RunningNormalizer", "TrainConfig", "evaluate", "gaussian_kl", "gen_biased_sequences",
    "gen_toy_gaussian", "greedy_minmax_select", "hyperparam_select", "load_run", "merge_small_groups",
    "minmax_select", "mle_fit", "nonparam_inner", "project_onto_kl_ball", "report", "run_experiment",
    "save_run", "select", "train_erm", "train_groupdro", "train_nonparam", "train_pdro",
]
