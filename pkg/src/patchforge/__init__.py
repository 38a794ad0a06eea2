"""Adversarial patch attacks and evaluation against a toy grid detector."""

from .attack import (
    AttackConfig,
    AttackMode,
    AttackTrace,
    Patch,
    StyleConfig,
    batch_variation_gradient,
    init_patch,
    load_patch,
    load_trace,
    masked_update,
    nested_update,
    run_attack,
    save_patch,
    save_trace,
)
from .corpus import (
    CLASS_NAMES,
    NUM_CLASSES,
    TARGET_CLASS,
    BackgroundKind,
    BackgroundRecord,
    CorpusConfig,
    SceneCorpus,
    TargetSprite,
    build_synthetic_corpus,
    load_corpus,
    save_corpus,
)
from .detector import (
    DetectorModel,
    FeatureTap,
    GridPrediction,
    GridPredictions,
    ToyDetector,
    ToyDetectorConfig,
    TrainConfig,
    forward,
    input_gradient,
    is_detected,
    load_checkpoint,
    save_checkpoint,
    train_toy_detector,
    weight_checksum,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DegenerateGeometryWarning,
    EmptyCorpusError,
    InvalidInputError,
    NonFiniteLossError,
    PatchForgeError,
    TrainingFailedError,
)
from .evaluation import (
    CLOUDY,
    SUNNY,
    AreaRatioCurve,
    EvalReport,
    IlluminationPreset,
    InterferenceHeatmap,
    RatioPoint,
    SuccessRule,
    SweepGrid,
    WindowedRates,
    area_ratio_curve,
    interference_heatmap,
    run_sweep,
    success_rate,
    windowed_success,
)
from .losses import (
    AppearingLossConfig,
    FeatureVector,
    HidingLossConfig,
    appearing_loss,
    color_loss,
    feature_interference,
    feature_region_crop,
    hiding_loss,
    mean_pool_features,
    patch_cell_index,
    pattern_loss,
)
from .scene import (
    SceneSpec,
    VariationRanges,
    estimate_view_angle,
    grayscale_transform,
    perspective_warp,
    project_saturation,
    render_scene,
    sample_scene_batch,
)

__version__ = "0.1.0"
