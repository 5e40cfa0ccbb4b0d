"""cmlab: conflict-aware LiDAR-camera contrastive pretraining, desk scale."""

from .correspondence import (
    GroupedEmbeddings,
    PointGroup,
    PointGroupSet,
    ProjectionResult,
    mask_miou,
    points_to_groups,
    pool_groups,
    project_points,
)
from .losses import (
    LossReport,
    PositiveSet,
    SimilarityMatrix,
    cccl_loss,
    combined_objective,
    iccl_loss,
    loss_from_similarity,
    nce_loss,
)
from .optim import cosine_lr, sgd_step
from .pretrain import (
    Checkpoint,
    TrainConfig,
    TrainingDivergedError,
    TrainResult,
    load_checkpoint,
    reference_train_config,
    save_checkpoint,
    train,
)
from .evaluate import (
    ConsistencyReport,
    ProbeResult,
    SimilarityMap,
    consistency_from_groups,
    consistency_report,
    fit_linear_probe,
    linear_probe,
    similarity_map,
)
from .scene import (
    Calibration,
    CameraCalibration,
    MaskStore,
    PayloadError,
    PointCloud,
    SceneError,
    SceneIndex,
    SceneParseError,
    SceneValidationError,
    SemanticMaskSet,
    SensorFrame,
    load_calibration,
    load_scene_index,
    read_mask,
    read_point_cloud,
    save_calibration,
    save_scene_index,
    write_mask,
    write_point_cloud,
)
from .vse import (
    SelectionReport,
    SweepPair,
    SyncStats,
    filter_sweeps,
    keyframe_sync_stats,
    pair_lidar_to_images,
    pooled_sync_stats,
    run_vse,
    select_distinct_sweep,
)
from .worldgen import (
    SyntheticWorldConfig,
    World,
    generate_planted_scene,
    generate_world,
    load_world,
)

__version__ = "0.1.0"
