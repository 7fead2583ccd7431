"""Adversarial defense toolkit for siamese visual trackers.

A residual U-Net pre-processor is trained adversarially against a frozen
anchor-based tracker and can be deployed on the template branch, the search
branch, or both. The package also ships the gradient and black-box attacks
used to evaluate it, synthetic sequence generation, OTB-format loading, and
standard tracking benchmark metrics.
"""

from .attacks import AttackConfig, gradient_attack, iou_blackbox_attack
from .advtrain import (
    TrainConfig,
    fgsm_step,
    init_perturbation,
    load_defense_checkpoint,
    save_defense_checkpoint,
    train_defense,
)
from .defense import (
    DefenseNet,
    DefenseStack,
    DeploymentPattern,
    apply_pattern,
    build_defense_net,
    defend,
)
from .data import (
    Sequence,
    SyntheticConfig,
    TrainingPair,
    gen_synthetic_sequence,
    load_otb_sequence,
    make_dataset,
    sample_training_pairs,
    save_otb_sequence,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataFormatError,
    TrackdefError,
    TrainingDiverged,
)
from .evaluation import (
    DefenseSelection,
    OtbDatasetSpec,
    RunSpec,
    SequenceResult,
    SyntheticDatasetSpec,
    dump_score_maps,
    evaluate_ope,
    evaluate_reset,
    norm_precision,
    precision_at,
    run_ope,
    run_reset_protocol,
    success_auc,
)
from .geometry import (
    AnchorConfig,
    AnchorGrid,
    Box,
    LabelSet,
    assign_cls_labels,
    center_error,
    decode_box,
    encode_reg_targets,
    iou,
    make_anchor_grid,
    make_label_set,
    norm_center_error,
)
from .losses import DuaLossConfig, cls_loss, dua_loss, reg_loss, smooth_l1
from .reporting import (
    RunMetrics,
    TimingReport,
    compare_runs,
    format_comparison_table,
    timing_report,
)
from .tracker import (
    ScoreMaps,
    SiamTracker,
    TrackerConfig,
    TrackerTrainConfig,
    TrackState,
    crop_search,
    crop_template,
    forward_pair,
    load_tracker_checkpoint,
    save_tracker_checkpoint,
    select_box,
    track_sequence,
    train_baseline_tracker,
)

__version__ = "0.1.0"
