"""Correlation-verification re-ranking for image retrieval.

Cross-scale 4D correlation volumes between feature pyramids are scored by a
center-pivot 4D convolutional encoder; the resulting verification similarity
is fused with global-descriptor cosine similarity to re-rank a shortlist.
"""
from ._backend import NAME as BACKEND
from .correlation import (
    CrossScaleCorrelation,
    FeaturePyramid,
    ReducerWeights,
    assemble_cross_scale,
    build_pyramid,
    correlate,
    reduce_scalewise,
)
from .encoder4d import (
    CenterPivotKernel,
    EncoderConfig,
    EncoderWeights,
    PairLogit,
    conv4d_center_pivot,
    conv4d_naive,
    encoder_forward,
    init_weights,
    load_weights,
    save_weights,
    similarity_from_logit,
)
from .objectives import (
    DescriptorBank,
    LossValue,
    MarginState,
    classification_loss,
    contrastive_loss,
    curricular_margin,
    global_total_loss,
    queue_update,
    rerank_pair_loss,
    rerank_total_loss,
)
from .retrieval import (
    FeatureStore,
    QuantizedFeatureMap,
    RankedList,
    dequantize,
    eval_map,
    global_rank,
    quantize,
    rerank_topk,
)
from .training import (
    CurriculumSchedule,
    TrainConfig,
    hide_and_seek,
    mine_hard_negatives,
    sample_triplet,
    schedule_at,
    sgd_step,
    train_rerank_toy,
)

__version__ = "0.1.0"
