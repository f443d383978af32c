"""Temporal-coupled adversarial training for constrained RL on desk-scale CMDPs."""
from .attackers import AttackConfig, AttackContext, CriticSet
from .cmdp import PointCircle, PointRun, TabularCmdp, grid_hazard, make_env
from .config import ExperimentConfig, config_from_dict, load_config
from .critics import TabularCritic, value_iteration_worst
from .perturbation import PerturbationBudget
from .trainer import (
    Agent, LagrangeState, PpoConfig, TrainerConfig, build_agent, evaluate_under_attack,
    make_streams, train_epoch,
)

__version__ = "0.1.0"
