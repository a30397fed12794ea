"""Few-shot anomaly detection by contrastive fine-tuning.

Fine-tunes a pretrained image encoder on a handful of normal samples with a
three-term contrastive objective (augmentation contrast, cross-instance
positive pairs, synthesized negative pairs), fits a Gaussian to the
L2-normalized embeddings, and scores anomalies by Mahalanobis distance.
"""

__version__ = "0.1.0"

from .augment import (
    ColorJitter,
    CorruptionParams,
    CutPasteParams,
    GaussianBlur,
    PositivePolicy,
    RandomAffine,
    RandomGrayscale,
    ScarParams,
    TrainingBatch,
    apply_negative,
    apply_positive,
    cut_paste,
    default_policies,
    make_training_batch,
)
from .data import (
    CorruptionSpec,
    DatasetManifest,
    FewShotSplit,
    ImageSample,
    SynthSpec,
    build_corruption_protocol,
    crop_patches,
    load_image_folder,
    sample_few_shot,
    subsample_anomalies,
    synth_dataset,
)
from .density import (
    DensityModel,
    ScoreRecord,
    fit_density,
    fit_gaussian,
    knn_score,
    normalize,
    percentile_normalize,
    score_embedding,
    score_images,
)
from .encoder import (
    EmbeddingSet,
    EncoderConfig,
    OnlineNetwork,
    TargetNetwork,
    ema_update,
    embed,
    init_target,
    load_checkpoint,
    load_pretrained,
    save_checkpoint,
)
from .eval import EvalReport, auroc, evaluate, export_embeddings, export_score_distribution
from .losses import (
    LossBreakdown,
    LossWeights,
    contrastive_loss,
    cross_instance_pp_loss,
    negative_pair_loss,
    total_loss,
)
from .train import TrainConfig, TrainState, init_train_state, train, training_step
