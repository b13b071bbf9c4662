"""Sequential recommendation through mixtures of heterogeneous item relationships."""

from .data import (DatasetSplit, InteractionDataset, RelationGraph, load_interactions, load_relations,
                   relevant_relations, split_leave_one_out)
from .evaluation import EvalReport, evaluate_setting1, evaluate_setting2, neighbor_dump, run_ablations
from .model import (LATENT, Hyperparams, ModelParams, explicit, parameter_count, relation_probabilities,
                    score_item_given_relation, score_next_item, score_relation, squared_distance)
from .synthetic import SyntheticSpec, generate_synthetic
from .training import TrainConfig, train

__version__ = "0.1.0"
