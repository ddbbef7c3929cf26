"""Multi-agent linear bandits with gossip sharing and distributed clustering."""

from .dccb import DCCB, PruneEvent, ThresholdParams, a_lambda, prune_and_reset, should_prune, threshold
from .env import ClusterProblem, make_cluster_problem, reward, sample_context_set
from .errors import ConfigurationError, InstrumentationError, ProtocolError
from .linalg import PsdAccumulator, convex_average, rank_one_update, weighted_norm_sq
from .metrics import (
    bound_dccb,
    bound_dcb,
    bound_delayed,
    bound_nosharing,
    comm_bits,
    instantaneous_regret,
)
from .policy import ConfidenceParams, PolicyState, confidence_radius, local_estimate, select_action
from .protocols import TAGS, AgentState, DelaySchedule, ShareBuffer, WeightTrace, delay_budget, draw_permutation
from .simulate import RunConfig, RunTrace, parse_config, run_experiment

__version__ = "0.1.0"
