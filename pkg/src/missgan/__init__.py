"""Multivariate time-series anomaly detection by conditional GRU
reconstruction with adversarial regularization, trained on multi-scale
segments discovered by an HMM/MDL segmenter."""

from .data import (
    ChannelSchema,
    TimeSeries,
    NormStats,
    SyntheticSpec,
    load_csv,
    save_csv,
    normalize_fit,
    normalize_apply,
    normalize_invert,
    coarse_segment,
    synth_generate,
)
from .numerics import (
    Projection,
    AdamState,
    pca_fit,
    pca_transform,
    adam_step,
    minmax_scale,
    child_rng,
)
from .recnet import (
    GruCellParams,
    ReconstructionModel,
    DiscriminatorParams,
    gru_step,
    encode,
    decode,
    reconstruct,
    discriminate,
    generator_loss,
    discriminator_loss,
    compute_gradients,
    init_reconstruction_model,
    init_discriminator,
)
from .hmmseg import (
    HmmParams,
    RegimeSet,
    Segmentation,
    hmm_forward_loglik,
    viterbi,
    baum_welch_fit,
    mdl_cost,
    cut_point_search,
    segment_series,
)
from .trainer import (
    TrainConfig,
    Checkpoint,
    lr_at_epoch,
    train_reconstruction_epoch,
    extract_hidden_representation,
    missgan_fit,
)
from .detector import (
    AnomalyReport,
    EvalResult,
    anomaly_scores,
    auc,
    ideal_f1,
)

__version__ = "0.1.0"
