"""Planning toolkit for MDP families with symbolic knowledge gaps."""

from .gap_mdp import (
    Action,
    Descriptor,
    GridSpec,
    KnowledgeGap,
    ObjectDescriptor,
    ObjectGap,
    QueryPredicate,
    boundary_descriptors,
    descriptor_consistent,
    env_reset,
    env_step,
    random_mask,
    refine_gap,
    sample_descriptor,
    to_tabular,
)
from .quantile_policy import (
    Hyper,
    QuantileModel,
    aleatoric_variance,
    best_action,
    q_stats,
    quantile_update,
    train,
)
from .mint_tree import MintTree, build_tree, curate_query, information_gain, merge_tree, prune_tree
from .elicitation import EpisodeConfig, EpisodeResult, Oracle, run_episode, should_trigger
from .theory import (
    TabularMdp,
    certify_lipschitz,
    certify_return_bound,
    dissimilarity,
    pseudo_metric,
    random_mdp,
    value_iteration,
)
from .harness import BenchmarkConfig, load_model, run_benchmark, save_model

__version__ = "0.1.0"
