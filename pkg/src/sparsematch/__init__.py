"""Dense semantic correspondence from sparse keypoint annotations."""

from .config import (
    IMAGE_MEAN,
    IMAGE_STD,
    LossWeights,
    SelectionSchedule,
    TrainConfig,
    load_config,
    save_config,
)
from .datakit import (
    PairSample,
    WarpParams,
    augment_pair,
    load_manifest,
    resize_normalize,
    save_dataset,
    synth_warp_pairs,
)
from .encoder import (
    ContextDescriptorMap,
    ContextEncoder,
    DeskBackbone,
    FeatureMap,
    FusionWeights,
    ContextFeatureMap,
    backbone_extract,
    bench_sce,
    dense_offsets,
    fuse_context,
    self_similarity_dense,
    self_similarity_sparse,
    sparse_offsets,
)
from .evalkit import EvalReport, evaluate, pck
from .matching import (
    CorrelationVolume,
    FlowField,
    correlation_4d,
    kernel_soft_argmax,
    mutual_nn_filter,
    transfer_keypoints,
    upsample_correlation,
)
from .model import CorrespondenceNet, build_model
from .supervision import (
    build_label_mask,
    combined_objective,
    dilate_mask,
    gt_loss,
    pseudo_loss_masked,
    select_small_loss,
    selection_ratio,
)
from .training import (
    Checkpoint,
    load_checkpoint,
    model_from_checkpoint,
    prepare_data,
    save_checkpoint,
    train_baseline,
    train_mutual_online_teachers,
    train_single_offline_teacher,
    validate,
)

__version__ = "0.1.0"
