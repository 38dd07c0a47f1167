"""Downstream classifiers, experiment loops, metrics and baseline LF generators."""
from .baselines import (
    DecisionTreeLF,
    StudentNetworkLF,
    TooFewGroups,
    feature_groups,
    fit_decision_tree_lfs,
    fit_student_network_lfs,
    prune_lfs,
    sample_student_shape,
    subset_score,
)
from .classifier import DOWNSTREAM_PRESETS, Classifier, DownstreamConfig, train_classifier
from .loops import (
    GENERATORS,
    PAPER_FRAME_SCHEDULE,
    SYNTHETIC_SCHEDULE,
    WS_MULTIPLIERS,
    LoopConfig,
    LoopError,
    active_learning_run,
    generate_lfs,
    lf_features,
    weak_supervision_run,
)
from .metrics import KTooLarge, NoPositives, entropy, max_entropy_select, mean_average_precision, task_map
