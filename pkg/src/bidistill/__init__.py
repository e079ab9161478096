"""Bidirectional distillation between two collaborative-filtering
recommenders of different capacities.

A high-capacity teacher and a compact student train simultaneously, each
following the other's predictions on rank-discrepant unobserved items.
"""

from .data import Dataset, RawInteraction, build_dataset, leave_one_out_split, load_interactions
from .distill import (
    Direction,
    DistillConfig,
    SamplingScheme,
    bd_loss,
    sample_items,
    sample_items_baseline,
    weight_s_to_t,
    weight_t_to_s,
)
from .evaluation import EvalReport, aggregate_runs, evaluate, paired_t_test
from .models import (
    AdamState,
    FactorModel,
    adam_step,
    cf_loss_pairwise,
    cf_loss_pointwise,
    init_adam,
    init_model,
    load_model,
    logit,
    predict,
    save_model,
)
from .ranking import (
    RankSnapshot,
    average_rank_difference,
    full_rank,
    rank_diff_report,
    rank_difference,
    snapshot,
)
from .synth import ml100k_scale_interactions, synthetic_dataset, synthetic_interactions
from .train import Seeds, TrainConfig, TrainLog, sample_cf_negatives, train_baseline_kd, train_bd, train_cf

__version__ = "0.1.0"
