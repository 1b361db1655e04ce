"""Adaptive widening of thin multi-task networks into task-grouped branches."""

from .affinity import AffinityState, branch_affinity, record_batch, task_affinity
from .datagen import Dataset, SyntheticSpec, generate
from .grouping import WideningDecision, find_number_branches, separation_cost, spectral_cluster, widening_loss
from .persist import export_dot, export_manifest, import_manifest, load_model, save_model
from .somp import SompResult, somp_init_model, somp_select
from .trainer import RunTrace, TrainConfig, adaptive_widen_train, evaluate, train_round
from .tree import GroupingFunction, ModelTree, build_thin, desk_template, tree_backward, tree_forward, widen_at

__version__ = "0.1.0"
