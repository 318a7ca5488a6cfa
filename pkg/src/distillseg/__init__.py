"""Multi-task segmentation teachers distilled into compact students."""

from .data import (
    DataError,
    DatasetSpec,
    NiftiError,
    SCALES,
    SliceDataset,
    SliceSample,
    Volume,
    build_dataset,
    export_volume_pair,
    load_volume,
    make_synthetic_dataset,
    read_nifti,
    select_subjects,
    split_by_subject,
    subsample_by_subject,
    volume_to_slices,
    write_nifti,
    write_slices,
)
from .losses import (
    LossBreakdown,
    LossInputError,
    LossWeights,
    dice_bce_loss,
    dice_loss,
    feature_mse_loss,
    info_nce_loss,
    pmd_loss,
    recon_mse_loss,
    scale_contrastive_loss,
    student_total_loss,
    teacher_total_loss,
)
from .metrics import (
    AnovaResult,
    ConfusionCounts,
    MetricInputError,
    MetricsReport,
    confusion_counts,
    dice_coef,
    evaluate_model,
    iou,
    one_way_anova,
    precision,
    psnr,
    recall,
)
from .models import (
    CheckpointError,
    FeatureAdapter,
    FeatureTaps,
    ForwardOutput,
    ModelConfig,
    ModelError,
    ProjectionHead,
    ROLE_STUDENT_S1,
    ROLE_STUDENT_S2,
    ROLE_TEACHER,
    build_model,
    count_parameters,
    forward_with_taps,
    freeze,
    load_checkpoint,
    load_checkpoint_aux,
    parameter_checksum,
    project,
    save_checkpoint,
)
from .train import (
    DistillationPlan,
    TrainingError,
    TrainingRecord,
    distill,
    train_student_baseline,
    train_teacher,
)
from .experiments import (
    ConfigError,
    ExperimentConfig,
    ResultRow,
    ResultTable,
    collect_seed_metrics,
    emit_defaults,
    emit_training_curves,
    parse_config,
    render_report,
    run_ablation,
    validate_config_dict,
)

__version__ = "0.1.0"
