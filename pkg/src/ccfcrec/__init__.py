"""Cold-start item recommendation with contrastive collaborative filtering."""
from .autograd import GradBag, Tape, gradient_check
from .data import (
    AttributeField,
    AttributeSchema,
    AttributeTable,
    CoocIndex,
    InteractionDataset,
    SplitBundle,
    SyntheticConfig,
    build_cooccurrence_index,
    generate_synthetic,
    load_attributes,
    load_interactions,
    split_by_item,
)
from .encoders import Hyperparams, ModelParams, init_params
from .evaluation import RankingMetrics, evaluate, hr_at_k, ndcg_at_k
from .training import AdamState, RunHistory, adam_step, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
