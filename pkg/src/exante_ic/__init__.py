"""Incentive-compatibility checks and constructions for a player with an ex-ante constraint."""

from .builder import AutoBidMechanism, extract_menu, induce_rules, solve_multiplier
from .characterize import (
    CharacterizationCertificate, DeviationSets, characterize, critical_multiplier, deviation_sets,
    mixed_deviation, rho_sweep,
)
from .core import (
    InterimRules, OutcomeSpace, PlayerModel, Strategy, TypeSpace, evaluate, linear_allocation,
    linear_model, make_model_budget, make_model_roi, payoff_matrices, posted_price,
)
from .oracle import ICVerdict, best_response, exhaustive_verify, verify_ic
from .simulator import EpisodeConfig, compare_controllers, run_episode
from .surrogate import differential_check, full_theorem3_check, reconstruct_payment, surrogate_field

__version__ = "0.1.0"
